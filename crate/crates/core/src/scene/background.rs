use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "path")]
pub enum BackgroundKind {
    Gradient,
    Noise,
    File(PathBuf),
}

impl std::str::FromStr for BackgroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(Self::Gradient),
            "noise" => Ok(Self::Noise),
            other => match other.strip_prefix("file:") {
                Some(path) => Ok(Self::File(PathBuf::from(path))),
                None => Err(Error::Invalid(format!("unknown background kind {other:?}"))),
            },
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // muted ground/vegetation/asphalt tones
    let base = rng.gen_range(0.15..0.75);
    [0, 1, 2].map(|_| (base + rng.gen_range(-0.18f64..0.18)).clamp(0.0, 1.0))
}

fn gradient(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let a = random_color(rng);
    let b = random_color(rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    // a couple of soft stripes, like lane markings or field rows
    let freq = rng.gen_range(2.0..6.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.02..0.08);
    let mut img = Image::filled(size, size, [0.0; 3]);
    let n = size as f64;
    for y in 0..size {
        for x in 0..size {
            let u = ((x as f64 / n - 0.5) * dx + (y as f64 / n - 0.5) * dy + 0.71) / 1.42;
            let stripe = amp
                * (freq * std::f64::consts::TAU * (x as f64 * dy - y as f64 * dx) / n + phase)
                    .sin();
            for c in 0..3 {
                img.set(
                    c,
                    y,
                    x,
                    (a[c] * (1.0 - u) + b[c] * u + stripe).clamp(0.0, 1.0),
                );
            }
        }
    }
    img
}

fn noise(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let cells = 6;
    let lattice: Vec<[f64; 3]> = (0..(cells + 1) * (cells + 1))
        .map(|_| random_color(rng))
        .collect();
    let grain = rng.gen_range(0.01..0.05);
    let mut img = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / size as f64 * cells as f64;
            let gy = y as f64 / size as f64 * cells as f64;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            // smoothstep weights
            let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
            let at = |i: usize, j: usize| lattice[j * (cells + 1) + i];
            let jitter = rng.gen_range(-grain..grain);
            for c in 0..3 {
                let top = at(x0, y0)[c] * (1.0 - sx) + at(x0 + 1, y0)[c] * sx;
                let bottom = at(x0, y0 + 1)[c] * (1.0 - sx) + at(x0 + 1, y0 + 1)[c] * sx;
                img.set(
                    c,
                    y,
                    x,
                    (top * (1.0 - sy) + bottom * sy + jitter).clamp(0.0, 1.0),
                );
            }
        }
    }
    img
}

/// Deterministic square background for `(kind, seed)`.
pub fn make_background(kind: &BackgroundKind, seed: u64, size: usize) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_bac6);
    match kind {
        BackgroundKind::Gradient => Ok(gradient(&mut rng, size)),
        BackgroundKind::Noise => Ok(noise(&mut rng, size)),
        BackgroundKind::File(path) => {
            let img = Image::load(path)?;
            if img.height != size || img.width != size {
                return Err(Error::Image(format!(
                    "{}: background is {}x{}, expected {size}x{size}",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
            Ok(img)
        }
    }
}
