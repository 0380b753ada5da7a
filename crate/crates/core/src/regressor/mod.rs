//! The regression network: RoI-Align pooling over a scene feature map, a
//! fully-connected head emitting offsets, training, and iterative refinement.

mod container;
mod features;
mod head;
mod refine;
mod train;

pub use container::{load_model, model_from_bytes, model_to_bytes, save_model, write_model, MODEL_MAGIC};
pub use features::{roi_align, FeatureMap};
pub use head::{Dense, ForwardCache, RegressorModel};
pub use refine::{pool_boxes, predict, refine, refine_once, refine_with_features};
pub use train::{train, EpochLog, StopReason, TrainConfig, TrainOutcome};
