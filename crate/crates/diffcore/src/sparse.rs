//! Fixed sparse linear maps over flattened planes.
//!
//! Resampling (bilinear resize, flips, shifts, zooms) and texture-to-pixel
//! gathers are all linear in the input values with weights that do not depend
//! on them, so they share one representation. Both the row-compressed form and
//! its transpose are stored; the transpose is the backward map.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(rows: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut offsets = vec![0usize; rows + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            offsets[r + 1] += 1;
            cols.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        Self {
            offsets,
            cols,
            vals,
        }
    }

    fn apply(&self, input: &[f64], output: &mut [f64]) {
        for (r, out) in output.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in self.offsets[r]..self.offsets[r + 1] {
                acc += self.vals[i] * input[self.cols[i]];
            }
            *out = acc;
        }
    }
}

/// A linear map `y = M x` from `in_len` to `out_len` values, applied
/// independently to each consecutive block of a batched input.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinear {
    in_len: usize,
    out_len: usize,
    forward: Csr,
    transpose: Csr,
}

impl SparseLinear {
    /// Builds the map from `(row, col, weight)` entries; duplicates are summed.
    pub fn from_triplets(
        out_len: usize,
        in_len: usize,
        triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|t| t.0 >= out_len || t.1 >= in_len) {
            return Err(Error::InvalidArgument {
                op: "sparse_linear",
                msg: format!("entry ({r}, {c}) outside {out_len}x{in_len}"),
            });
        }
        let transposed = triplets.iter().map(|&(r, c, v)| (c, r, v)).collect();
        Ok(Self {
            in_len,
            out_len,
            forward: Csr::from_triplets(out_len, triplets),
            transpose: Csr::from_triplets(in_len, transposed),
        })
    }

    pub fn identity(len: usize) -> Self {
        Self::from_triplets(len, len, (0..len).map(|i| (i, i, 1.0)).collect())
            .expect("identity entries are in range")
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    /// Map composition: `self ∘ inner`, i.e. `x ↦ self(inner(x))`.
    pub fn compose(&self, inner: &SparseLinear) -> Result<SparseLinear> {
        if inner.out_len != self.in_len {
            return Err(Error::ShapeMismatch {
                op: "sparse_compose",
                lhs: vec![self.out_len, self.in_len],
                rhs: vec![inner.out_len, inner.in_len],
            });
        }
        let mut triplets = Vec::new();
        for r in 0..self.out_len {
            for i in self.forward.offsets[r]..self.forward.offsets[r + 1] {
                let mid = self.forward.cols[i];
                let w = self.forward.vals[i];
                for j in inner.forward.offsets[mid]..inner.forward.offsets[mid + 1] {
                    triplets.push((r, inner.forward.cols[j], w * inner.forward.vals[j]));
                }
            }
        }
        SparseLinear::from_triplets(self.out_len, inner.in_len, triplets)
    }

    /// Applies the map (or its transpose) blockwise. `input.len()` must be a
    /// multiple of the source length.
    pub fn apply(&self, input: &[f64], transposed: bool) -> Result<Vec<f64>> {
        let (csr, src, dst) = if transposed {
            (&self.transpose, self.out_len, self.in_len)
        } else {
            (&self.forward, self.in_len, self.out_len)
        };
        if src == 0 || !input.len().is_multiple_of(src) {
            return Err(Error::InvalidArgument {
                op: "sparse_linear",
                msg: format!("input length {} is not a multiple of {src}", input.len()),
            });
        }
        let batch = input.len() / src;
        let mut out = vec![0.0; batch * dst];
        for b in 0..batch {
            csr.apply(
                &input[b * src..(b + 1) * src],
                &mut out[b * dst..(b + 1) * dst],
            );
        }
        Ok(out)
    }
}

/// Bilinear resampling of an `ih × iw` plane to `oh × ow` using half-pixel
/// centres with edge clamping.
pub fn bilinear_resize_map(ih: usize, iw: usize, oh: usize, ow: usize) -> SparseLinear {
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        // (lower index, upper index, upper weight) per output coordinate
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                    .clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(ih, oh);
    let xs = axis(iw, ow);
    let mut triplets = Vec::with_capacity(oh * ow * 4);
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let row = oy * ow + ox;
            for (y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        triplets.push((row, y * iw + x, w));
                    }
                }
            }
        }
    }
    SparseLinear::from_triplets(oh * ow, ih * iw, triplets).expect("indices in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_accumulate() {
        let m = SparseLinear::from_triplets(1, 2, vec![(0, 1, 1.0), (0, 1, 2.0)]).unwrap();
        assert_eq!(m.apply(&[5.0, 1.0], false).unwrap(), vec![3.0]);
        assert_eq!(m.apply(&[2.0], true).unwrap(), vec![0.0, 6.0]);
    }

    #[test]
    fn resize_rows_sum_to_one() {
        let m = bilinear_resize_map(4, 4, 8, 8);
        let out = m.apply(&[1.0; 16], false).unwrap();
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn compose_matches_sequential() {
        let a = bilinear_resize_map(3, 3, 5, 5);
        let b = bilinear_resize_map(5, 5, 2, 2);
        let ba = b.compose(&a).unwrap();
        let x: Vec<f64> = (0..9).map(|i| (i * i) as f64).collect();
        let seq = b.apply(&a.apply(&x, false).unwrap(), false).unwrap();
        let fused = ba.apply(&x, false).unwrap();
        for (s, f) in seq.iter().zip(&fused) {
            assert!((s - f).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(SparseLinear::from_triplets(2, 2, vec![(2, 0, 1.0)]).is_err());
    }
}
