use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::{transfer_matrix, EvalReport, Thresholds, RAW_ROW};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::losses::PrintablePalette;
use crate::optimize::{attack, AttackConfig, RunOptions};
use crate::scene::{Mesh, PreparedScene, Texture};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of compound transforms.
    P,
    Alpha1,
    Alpha2,
    K,
    LossItems,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::P => "p",
            SweepAxis::Alpha1 => "alpha1",
            SweepAxis::Alpha2 => "alpha2",
            SweepAxis::K => "k",
            SweepAxis::LossItems => "loss_items",
        }
    }

    /// The ablation rows studied for each axis.
    pub fn default_values(&self) -> Vec<SweepValue> {
        let nums = |v: &[f64]| v.iter().map(|&x| SweepValue::Number(x)).collect();
        match self {
            SweepAxis::P => nums(&[0.0, 1.0, 2.0, 3.0]),
            SweepAxis::Alpha1 => nums(&[1.0, 2.5, 5.0, 10.0]),
            SweepAxis::Alpha2 => nums(&[0.01, 0.1, 1.0, 10.0]),
            SweepAxis::K => nums(&[50.0, 100.0, 150.0, 200.0]),
            SweepAxis::LossItems => vec![
                SweepValue::Items(LossItems::Fas),
                SweepValue::Items(LossItems::Baa),
                SweepValue::Items(LossItems::Both),
            ],
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(SweepAxis::P),
            "alpha1" => Ok(SweepAxis::Alpha1),
            "alpha2" => Ok(SweepAxis::Alpha2),
            "k" => Ok(SweepAxis::K),
            "loss_items" => Ok(SweepAxis::LossItems),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected p, alpha1, alpha2, k or loss_items)"
            ))),
        }
    }
}

/// Which attention items enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossItems {
    #[serde(rename = "FAS")]
    Fas,
    #[serde(rename = "BAA")]
    Baa,
    #[serde(rename = "FAS+BAA")]
    Both,
}

impl LossItems {
    pub fn label(&self) -> &'static str {
        match self {
            LossItems::Fas => "FAS",
            LossItems::Baa => "BAA",
            LossItems::Both => "FAS+BAA",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Number(f64),
    Items(LossItems),
}

impl SweepValue {
    pub fn label(&self) -> String {
        match self {
            SweepValue::Number(v) => format!("{v}"),
            SweepValue::Items(i) => i.label().to_string(),
        }
    }

    /// Parses a value for `axis` from its command-line spelling.
    pub fn parse(axis: SweepAxis, s: &str) -> Result<Self> {
        if axis == SweepAxis::LossItems {
            return match s.to_ascii_uppercase().as_str() {
                "FAS" => Ok(SweepValue::Items(LossItems::Fas)),
                "BAA" => Ok(SweepValue::Items(LossItems::Baa)),
                "FAS+BAA" | "BOTH" => Ok(SweepValue::Items(LossItems::Both)),
                _ => Err(Error::Config(format!("unknown loss items {s:?}"))),
            };
        }
        s.parse::<f64>()
            .map(SweepValue::Number)
            .map_err(|_| Error::Config(format!("sweep value {s:?} is not a number")))
    }
}

fn apply(axis: SweepAxis, value: &SweepValue, config: &mut AttackConfig) -> Result<()> {
    let mismatch = || {
        Error::Config(format!(
            "value {} does not fit axis {}",
            value.label(),
            axis.name()
        ))
    };
    let whole = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(mismatch())
        }
    };
    match (axis, value) {
        (SweepAxis::P, SweepValue::Number(v)) => config.transforms = whole(*v)?,
        (SweepAxis::Alpha1, SweepValue::Number(v)) => config.weights.alpha1 = *v,
        (SweepAxis::Alpha2, SweepValue::Number(v)) => config.weights.alpha2 = *v,
        (SweepAxis::K, SweepValue::Number(v)) => config.weights.k = whole(*v)?,
        (SweepAxis::LossItems, SweepValue::Items(items)) => {
            config.weights.use_fas = *items != LossItems::Baa;
            config.weights.use_baa = *items != LossItems::Fas;
        }
        _ => return Err(mismatch()),
    }
    config.validate()
}

/// Fixed inputs shared by every run of a sweep.
pub struct SweepContext<'a> {
    pub mesh: &'a Mesh,
    pub palette: &'a PrintablePalette,
    pub white_box: &'a DetectorModel,
    pub train: &'a [PreparedScene],
    pub test: &'a [PreparedScene],
    pub models: &'a [(String, DetectorModel)],
    pub clean_texture: &'a Texture,
    pub thresholds: Thresholds,
    pub options: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub value: SweepValue,
    pub label: String,
    /// Top-k size actually used at the run's image size.
    pub effective_k: usize,
    pub config: AttackConfig,
    pub final_loss: Option<f64>,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub runs: Vec<SweepRun>,
}

/// One attack and evaluation per value of `axis`.
pub fn sweep(
    ctx: &SweepContext<'_>,
    template: &AttackConfig,
    axis: SweepAxis,
    values: &[SweepValue],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let size = ctx
        .test
        .first()
        .map(|s| s.spec.pose.image_size)
        .ok_or_else(|| Error::Invalid("sweep needs test scenes".into()))?;
    let mut runs = Vec::with_capacity(values.len());
    for value in values {
        let mut config = template.clone();
        apply(axis, value, &mut config)?;
        let run = attack(
            &config,
            ctx.white_box,
            ctx.mesh,
            ctx.palette,
            ctx.train,
            &ctx.options,
        )?;
        let label = value.label();
        let report = transfer_matrix(
            &[(label.clone(), run.texture.clone())],
            ctx.models,
            ctx.test,
            ctx.clean_texture,
            &ctx.thresholds,
            ctx.options.parallel,
        )?;
        runs.push(SweepRun {
            value: *value,
            label,
            effective_k: config.weights.effective_k(size),
            final_loss: run.log.last().map(|l| l.loss.total),
            config,
            report,
        });
    }
    Ok(SweepReport { axis, runs })
}

impl SweepReport {
    /// Grid with a leading "Raw" block (clean texture), then one block per
    /// swept value; one line per target model.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},effective_k,model,ap,asr\n", self.axis.name());
        let Some(first) = self.runs.first() else {
            return out;
        };
        for r in first.report.rows.iter().filter(|r| r.texture == RAW_ROW) {
            let _ = writeln!(out, "{RAW_ROW},,{},{:.6},{:.6}", r.model, r.ap, r.asr);
        }
        for run in &self.runs {
            for r in run.report.rows.iter().filter(|r| r.texture != RAW_ROW) {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6}",
                    run.label, run.effective_k, r.model, r.ap, r.asr
                );
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
