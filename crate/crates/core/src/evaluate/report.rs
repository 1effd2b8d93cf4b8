use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{attack_success_rate, average_precision, nms};
use crate::detector::{Detection, DetectorModel, GroundTruth};
use crate::error::{Error, Result};
use crate::scene::{PreparedScene, Texture};

/// Label of the unattacked row.
pub const RAW_ROW: &str = "Raw";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub iou: f64,
    pub confidence: f64,
    pub nms_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            iou: super::MATCH_IOU,
            confidence: super::CONF_THRESHOLD,
            nms_iou: super::NMS_IOU,
        }
    }
}

/// Post-suppression detections of `model` on every scene painted with
/// `texture`, in scene order.
pub fn scene_detections(
    model: &DetectorModel,
    scenes: &[PreparedScene],
    texture: &Texture,
    nms_iou: f64,
    parallel: bool,
) -> Result<Vec<Vec<Detection>>> {
    let run = |s: &PreparedScene| -> Result<Vec<Detection>> {
        let image = s.render(texture)?.image.to_tensor();
        Ok(nms(&model.detect(&image)?, nms_iou))
    };
    if parallel {
        scenes.par_iter().map(run).collect()
    } else {
        scenes.iter().map(run).collect()
    }
}

pub fn scene_truths(scenes: &[PreparedScene]) -> Result<Vec<GroundTruth>> {
    scenes
        .iter()
        .map(|s| {
            s.ground_truth().ok_or_else(|| {
                Error::Invalid(format!("scene {} does not show the vehicle", s.spec.id()))
            })
        })
        .collect()
}

/// Scores of one texture on one model, bucketed by camera distance and
/// pitch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub distance: f64,
    pub pitch_deg: f64,
    pub images: usize,
    pub ap: f64,
    /// `None` when no image of the bucket is detected clean.
    pub asr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub texture: String,
    pub model: String,
    pub ap: f64,
    pub asr: f64,
    pub clean_ap: f64,
    pub buckets: Vec<Bucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub images: usize,
    pub thresholds: Thresholds,
    pub metadata: serde_json::Value,
}

fn buckets(
    scenes: &[PreparedScene],
    clean: &[Vec<Detection>],
    adv: &[Vec<Detection>],
    truths: &[GroundTruth],
    th: &Thresholds,
) -> Vec<Bucket> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for s in scenes {
        let k = (s.spec.pose.distance, s.spec.pose.pitch_deg);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    keys.into_iter()
        .map(|(distance, pitch_deg)| {
            let idx: Vec<usize> = (0..scenes.len())
                .filter(|&i| {
                    scenes[i].spec.pose.distance == distance
                        && scenes[i].spec.pose.pitch_deg == pitch_deg
                })
                .collect();
            let pick = |v: &[Vec<Detection>]| idx.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let t: Vec<GroundTruth> = idx.iter().map(|&i| truths[i]).collect();
            let (c, a) = (pick(clean), pick(adv));
            Bucket {
                distance,
                pitch_deg,
                images: idx.len(),
                ap: average_precision(&a, &t, th.iou),
                asr: attack_success_rate(&c, &a, &t, th.confidence).ok(),
            }
        })
        .collect()
}

/// AP and success rate of every texture against every model, with the
/// clean texture as the first ("Raw") row.
pub fn transfer_matrix(
    textures: &[(String, Texture)],
    models: &[(String, DetectorModel)],
    scenes: &[PreparedScene],
    clean_texture: &Texture,
    thresholds: &Thresholds,
    parallel: bool,
) -> Result<EvalReport> {
    let truths = scene_truths(scenes)?;
    let mut rows = Vec::new();
    let mut all: Vec<(String, &Texture)> = vec![(RAW_ROW.to_string(), clean_texture)];
    all.extend(textures.iter().map(|(n, t)| (n.clone(), t)));
    for (model_name, model) in models {
        let clean = scene_detections(model, scenes, clean_texture, thresholds.nms_iou, parallel)?;
        let clean_ap = average_precision(&clean, &truths, thresholds.iou);
        for (tex_name, texture) in &all {
            let adv = if *tex_name == RAW_ROW {
                clean.clone()
            } else {
                scene_detections(model, scenes, texture, thresholds.nms_iou, parallel)?
            };
            rows.push(ReportRow {
                texture: tex_name.clone(),
                model: model_name.clone(),
                ap: average_precision(&adv, &truths, thresholds.iou),
                asr: attack_success_rate(&clean, &adv, &truths, thresholds.confidence)?,
                clean_ap,
                buckets: buckets(scenes, &clean, &adv, &truths, thresholds),
            });
        }
    }
    // texture-major order, as in a table with one row per texture
    let order: Vec<String> = all.iter().map(|(n, _)| n.clone()).collect();
    rows.sort_by_key(|r| order.iter().position(|n| *n == r.texture));
    Ok(EvalReport {
        rows,
        images: scenes.len(),
        thresholds: *thresholds,
        metadata: serde_json::Value::Null,
    })
}

impl EvalReport {
    pub fn row(&self, texture: &str, model: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.texture == texture && r.model == model)
    }

    /// One line per (texture, model).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("texture,model,ap,asr,clean_ap\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.texture, r.model, r.ap, r.asr, r.clean_ap
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
