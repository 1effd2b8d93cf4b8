//! Toy single-class detectors, their training, serialization, and the
//! attack score.

mod model;
mod train;
mod weights;

use serde::{Deserialize, Serialize};

pub use model::{
    Activation, Architecture, DetectorModel, ForwardPass, HeadOutput, HeadSpec, ScoreMode,
    CELL_OUTPUTS,
};
pub use train::{
    clean_ap, flip_image, sample_loss, train_detector, TrainOptions, TrainReport, TrainSample,
};
pub use weights::{
    decode_weights, encode_weights, load_weights, load_weights_expect, save_weights,
};

/// Axis-aligned box in pixels, centre/size form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Mirror image across the vertical centre line of a `width`-wide frame.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            cx: width - self.cx,
            ..*self
        }
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One candidate before any suppression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_prob: f64,
}

impl Detection {
    /// Ranking score used by evaluation.
    pub fn score(&self) -> f64 {
        self.objectness * self.class_prob
    }
}

/// The vehicle's box, taken from the render mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: BBox,
}
