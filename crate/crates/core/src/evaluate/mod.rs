//! Detection metrics, attack evaluation and ablation sweeps.

mod metrics;
mod report;
mod sweep;

pub use metrics::{
    attack_success_rate, average_precision, is_detected, nms, CONF_THRESHOLD, MATCH_IOU, NMS_IOU,
};
pub use report::{
    scene_detections, scene_truths, transfer_matrix, Bucket, EvalReport, ReportRow, Thresholds,
    RAW_ROW,
};
pub use sweep::{sweep, LossItems, SweepAxis, SweepContext, SweepReport, SweepRun, SweepValue};
