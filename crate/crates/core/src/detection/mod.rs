//! Desk-scale single-class detection task: synthetic scenes, center-positive
//! targets, the training loss, decoding, NMS and AP.

pub mod ap;
pub mod boxes;
pub mod decode;
pub mod loss;
pub mod nms;
pub mod scene;
pub mod targets;

pub use ap::evaluate_ap;
pub use boxes::{iou, BBox};
pub use decode::{decode_detections, DecodeConfig};
pub use loss::{detection_loss, LossConfig};
pub use nms::{nms, Detection};
pub use scene::{generate_scene, SceneConfig, SizeClass, SyntheticScene};
pub use targets::{assign_levels, build_targets, LevelThresholds, TargetMaps};
