//! Classification and weakly supervised localization metrics.

mod auc;
mod boxes;
mod detect;
mod report;

pub use auc::roc_auc;
pub use boxes::{average_precision, iou, match_counts, max_matching, MatchCounts};
pub use detect::{connected_components, extract_detections, map_from_patch, Detection, Level};
pub use report::{dump_heatmaps, evaluate, predict, EvalReport, Prediction, AP_THRESHOLDS};
