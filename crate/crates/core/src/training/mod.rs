//! Losses, feature templates, activation-guided training and distilled
//! inference.

mod checkpoint;
mod loss;
mod peekaboo;
mod templates;
mod trainer;

pub use checkpoint::Checkpoint;
pub use loss::{cosine, har_loss, margin_loss, margin_terms, semantic_features, LossBreakdown, MarginParams};
pub use peekaboo::{
    average_maps, cells_to_pixels, crop_and_upsample, crop_mask_and_bbox, drop_patch, normalize_ham, resize_region,
    HeadChoice, PeekabooConfig,
};
pub use templates::{unit, TemplateBank};
pub use trainer::{class_map, distill_predict, DistillOutput, LossConfig, OptimConfig, Trainer};
