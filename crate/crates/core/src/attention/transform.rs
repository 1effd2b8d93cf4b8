use std::sync::Arc;

use diffcore::{SparseLinear, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};

pub const MIN_SCALE: f64 = 0.8;
pub const MAX_SCALE: f64 = 1.25;
/// Largest shift as a fraction of the image side.
pub const MAX_SHIFT_FRACTION: f64 = 0.1;

/// A geometric transform of a square image plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseTransform {
    HorizontalFlip,
    /// Content moves by `(dx, dy)` pixels; uncovered pixels become zero.
    Translate {
        dx: i64,
        dy: i64,
    },
    /// Zoom about the image centre with bilinear resampling.
    Scale {
        factor: f64,
    },
}

impl BaseTransform {
    pub fn inverse(&self) -> Self {
        match *self {
            BaseTransform::HorizontalFlip => BaseTransform::HorizontalFlip,
            BaseTransform::Translate { dx, dy } => BaseTransform::Translate { dx: -dx, dy: -dy },
            BaseTransform::Scale { factor } => BaseTransform::Scale {
                factor: 1.0 / factor,
            },
        }
    }

    fn validate(&self, size: usize) -> Result<()> {
        match *self {
            BaseTransform::HorizontalFlip => Ok(()),
            BaseTransform::Translate { dx, dy } => {
                let limit = MAX_SHIFT_FRACTION * size as f64;
                if dx.unsigned_abs() as f64 > limit || dy.unsigned_abs() as f64 > limit {
                    return Err(Error::Invalid(format!(
                        "translate({dx}, {dy}) exceeds {limit} pixels"
                    )));
                }
                Ok(())
            }
            BaseTransform::Scale { factor } => {
                // inverses of in-range factors are in range too, up to rounding
                let tol = 1e-9;
                if !(MIN_SCALE - tol..=MAX_SCALE + tol).contains(&factor) {
                    return Err(Error::Invalid(format!(
                        "scale factor {factor} outside [{MIN_SCALE}, {MAX_SCALE}]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// The transform as a linear map on a `size × size` plane.
    pub fn plane_map(&self, size: usize) -> SparseLinear {
        let n = size * size;
        let mut triplets = Vec::with_capacity(4 * n);
        match *self {
            BaseTransform::HorizontalFlip => {
                for y in 0..size {
                    for x in 0..size {
                        triplets.push((y * size + x, y * size + size - 1 - x, 1.0));
                    }
                }
            }
            BaseTransform::Translate { dx, dy } => {
                for y in 0..size as i64 {
                    for x in 0..size as i64 {
                        let (sx, sy) = (x - dx, y - dy);
                        if (0..size as i64).contains(&sx) && (0..size as i64).contains(&sy) {
                            let dst = (y * size as i64 + x) as usize;
                            triplets.push((dst, (sy * size as i64 + sx) as usize, 1.0));
                        }
                    }
                }
            }
            BaseTransform::Scale { factor } => {
                let c = size as f64 / 2.0;
                let src = |o: usize| (o as f64 + 0.5 - c) / factor + c - 0.5;
                for y in 0..size {
                    let fy = src(y);
                    for x in 0..size {
                        let fx = src(x);
                        let (x0, y0) = (fx.floor(), fy.floor());
                        let (ax, ay) = (fx - x0, fy - y0);
                        for (oy, wy) in [(0.0, 1.0 - ay), (1.0, ay)] {
                            for (ox, wx) in [(0.0, 1.0 - ax), (1.0, ax)] {
                                let (sx, sy) = (x0 + ox, y0 + oy);
                                let w = wx * wy;
                                if w != 0.0
                                    && sx >= 0.0
                                    && sy >= 0.0
                                    && sx < size as f64
                                    && sy < size as f64
                                {
                                    triplets.push((
                                        y * size + x,
                                        sy as usize * size + sx as usize,
                                        w,
                                    ));
                                }
                            }
                        }
                    }
                }
            }
        }
        SparseLinear::from_triplets(n, n, triplets).expect("indices are in range")
    }

    /// Where a point lands under the transform.
    fn map_point(&self, x: f64, y: f64, size: usize) -> (f64, f64) {
        let s = size as f64;
        match *self {
            BaseTransform::HorizontalFlip => (s - x, y),
            BaseTransform::Translate { dx, dy } => (x + dx as f64, y + dy as f64),
            BaseTransform::Scale { factor } => {
                let c = s / 2.0;
                ((x - c) * factor + c, (y - c) * factor + c)
            }
        }
    }
}

/// A compound transform: base transforms applied in listed order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransformSpec {
    pub steps: Vec<BaseTransform>,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(steps: Vec<BaseTransform>) -> Self {
        Self { steps }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        self.steps.iter().try_for_each(|t| t.validate(size))
    }

    /// Inverse: base inverses in reverse order.
    pub fn inverse(&self) -> Self {
        Self {
            steps: self
                .steps
                .iter()
                .rev()
                .map(BaseTransform::inverse)
                .collect(),
        }
    }

    /// `t_q ∘ … ∘ t_0` as one plane map.
    pub fn plane_map(&self, size: usize) -> Result<SparseLinear> {
        self.validate(size)?;
        let mut map = SparseLinear::identity(size * size);
        for t in &self.steps {
            map = t.plane_map(size).compose(&map)?;
        }
        Ok(map)
    }

    /// Image of a box under the transform (bounding box of moved corners,
    /// clipped to the frame).
    pub fn map_box(&self, b: &BBox, size: usize) -> BBox {
        let (x0, y0, x1, y1) = b.corners();
        let mut pts = [(x0, y0), (x1, y0), (x0, y1), (x1, y1)];
        for t in &self.steps {
            for p in pts.iter_mut() {
                *p = t.map_point(p.0, p.1, size);
            }
        }
        let s = size as f64;
        let fold = |f: fn(f64, f64) -> f64, init: f64, pick: fn(&(f64, f64)) -> f64| {
            pts.iter().map(pick).fold(init, f).clamp(0.0, s)
        };
        BBox::from_corners(
            fold(f64::min, f64::INFINITY, |p| p.0),
            fold(f64::min, f64::INFINITY, |p| p.1),
            fold(f64::max, f64::NEG_INFINITY, |p| p.0),
            fold(f64::max, f64::NEG_INFINITY, |p| p.1),
        )
    }

    /// `q` base transforms cycling through flip, scale, translate, with
    /// parameters drawn from `rng` inside the allowed ranges.
    pub fn random<R: Rng>(q: usize, size: usize, rng: &mut R) -> Self {
        let limit = (MAX_SHIFT_FRACTION * size as f64).floor() as i64;
        let steps = (0..q)
            .map(|i| match i % 3 {
                0 => BaseTransform::HorizontalFlip,
                1 => BaseTransform::Scale {
                    factor: rng.gen_range(MIN_SCALE..=MAX_SCALE),
                },
                _ => BaseTransform::Translate {
                    dx: rng.gen_range(-limit..=limit),
                    dy: rng.gen_range(-limit..=limit),
                },
            })
            .collect();
        Self { steps }
    }
}

/// Applies `spec` to every channel of a `[C, H, W]` image (or a `[H, W]`
/// map).
pub fn apply_transform(image: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    let size = square_side(image.shape())?;
    let out = spec.plane_map(size)?.apply(image.data(), false)?;
    Ok(Tensor::new(image.shape().to_vec(), out)?)
}

/// Maps a map computed on the transformed input back onto the original
/// frame.
pub fn inverse_align(map: &Tensor, spec: &TransformSpec) -> Result<Tensor> {
    apply_transform(map, &spec.inverse())
}

/// Tape version of a plane map applied to every channel.
pub fn transform_var<'t>(x: Var<'t>, map: &Arc<SparseLinear>) -> Result<Var<'t>> {
    let shape = x.shape();
    Ok(x.linear_arc(map.clone(), false)?.reshape(&shape)?)
}

pub(crate) fn square_side(shape: &[usize]) -> Result<usize> {
    match shape {
        [.., h, w] if h == w && *h > 0 => Ok(*h),
        _ => Err(Error::Invalid(format!(
            "transforms need square planes, got shape {shape:?}"
        ))),
    }
}
