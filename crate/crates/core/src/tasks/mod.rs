//! Task plumbing: label rules for segmentation, keypoint and part targets,
//! prediction pipelines from heatmaps back to image space, and the
//! detection-side suppression and rescoring steps.

mod detection;
mod geometry;
mod predict;
mod targets;

pub use crate::hypernet::{Label, TargetHeatmap};
pub use detection::{
    best_match, candidate_overlap, expand_pool, nms, rescore_labels, score_order, Detection, InstanceGT, Keypoint,
    KeypointPrediction, OverlapKind, FINAL_NMS, LENIENT_NMS, RESCORE_NEGATIVE, RESCORE_POSITIVE,
};
pub use geometry::{BoundingBox, ExpandedBox, LabelImage, Mask, Superpixels, DEFAULT_EXPANSION};
pub use predict::{crop_resize, predict_keypoint, predict_mask, predict_parts, project_superpixels, splat, MASK_THRESHOLD};
pub use targets::{
    area_sample, coverage_counts, gated_box, keypoint_target, make_keypoint_target, make_part_target, make_sds_target,
    mask_target, TargetConfig, KEYPOINT_RADIUS, OVERLAP_GATE,
};
