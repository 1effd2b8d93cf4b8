//! Binary weight files: magic, version, architecture id, then tensors
//! as little-endian `f64`.

use std::path::Path;
use std::sync::Arc;

use diffcore::Tensor;

use super::{Architecture, DetectorModel, ScoreMode};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CAMODET\0";
const VERSION: u32 = 1;

pub fn encode_weights(model: &DetectorModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_parameters());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id = model.arch.id().as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(match model.score_mode {
        ScoreMode::OneStage => 0,
        ScoreMode::TwoStage => 1,
    });
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Weights("truncated weight file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<DetectorModel> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Weights("bad header".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Weights(format!(
            "unsupported weight file version {version}"
        )));
    }
    let id_len = r.u32()? as usize;
    let id =
        std::str::from_utf8(r.take(id_len)?).map_err(|_| Error::Weights("bad header".into()))?;
    let arch = Architecture::from_id(id)
        .map_err(|_| Error::Weights(format!("unknown architecture {id:?}")))?;
    let score_mode = match r.take(1)?[0] {
        0 => ScoreMode::OneStage,
        1 => ScoreMode::TwoStage,
        b => return Err(Error::Weights(format!("unknown score mode {b}"))),
    };
    let shapes = arch.param_shapes();
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::Weights(format!(
            "{id} expects {} tensors, file has {count}",
            shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for expected in shapes {
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != expected {
            return Err(Error::Weights(format!(
                "tensor shape {shape:?} does not match {id} layout {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Weights("truncated weight file".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Arc::new(Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights("trailing bytes after weights".into()));
    }
    Ok(DetectorModel {
        arch,
        score_mode,
        params,
    })
}

pub fn save_weights(model: &DetectorModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<DetectorModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads weights and checks they were written for `arch`.
pub fn load_weights_expect(path: &Path, arch: Architecture) -> Result<DetectorModel> {
    let model = load_weights(path)?;
    if model.arch != arch {
        return Err(Error::Weights(format!(
            "architecture mismatch: file holds {}, expected {}",
            model.arch.id(),
            arch.id()
        )));
    }
    Ok(model)
}
