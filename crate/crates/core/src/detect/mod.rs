//! Single-scale FCOS-style detector on the stride-8 backbone map.

mod loss;
mod model;
mod targets;
mod train;

pub use loss::{detect_loss, focal, iou_loss, DetectLoss, FocalParams, HeadOutputs, NUM_CLASSES};
pub use model::{
    infer, nms, write_detections, DetectHead, Detection, Detector, HeadValues, InferConfig, CLASS_PRIOR, HEAD_BLOCKS,
    MAX_DETECTIONS, STEM_CHANNELS,
};
pub use targets::{assign_targets, centerness, Grid, TargetMap};
pub use train::{evaluate, finetune, init_detector, train_step, DetectConfig, FinetuneOutcome};
