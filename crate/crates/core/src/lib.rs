//! Class-agnostic, anchor-free bounding-box regression.
//!
//! A small fully-connected head reads RoI-Aligned features of an arbitrary
//! input box and predicts offsets that move it onto the nearest object. It is
//! trained with the negative log IoU loss on randomly perturbed ground truths,
//! can be applied repeatedly to refine boxes further, and turns a dense seed
//! grid into ranked object proposals.
//!
//! ```
//! use boxreg::{apply_offsets, encode_offsets, iou, BBox};
//!
//! let gt = BBox::new(50.0, 50.0, 40.0, 20.0)?;
//! let rough = BBox::new(55.0, 48.0, 30.0, 24.0)?;
//! let d = encode_offsets(&rough, &gt);
//! let fixed = apply_offsets(&rough, &d)?;
//! assert!(iou(&fixed, &gt) > 0.999_999);
//! # Ok::<(), boxreg::Error>(())
//! ```

pub mod boxes;
pub mod datasets;
mod error;
mod io;
pub mod loss;
pub mod metrics;
pub mod proposals;
pub mod records;
pub mod regressor;
pub mod sampler;

pub use boxes::{apply_offsets, encode_offsets, iou, match_nearest_gt, BBox, Corners, Offsets};
pub use datasets::Scene;
pub use error::{Error, Result};
pub use io::atomic_write;
pub use loss::{LossConfig, LossKind};
pub use metrics::{corloc, mean_iou, mean_iou_trajectory, recall_at, recall_curve, EvalRecord};
pub use proposals::{decay_nms, generate_proposals, score_proposals, seed_grid, Proposal, ProposalConfig, SeedGridConfig};
pub use regressor::{load_model, refine, save_model, train, RegressorModel, TrainConfig, TrainOutcome};
pub use sampler::{generate_training_boxes, SamplerConfig};

/// Guide chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/boxes.md")]
    mod boxes {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/refinement.md")]
    mod refinement {}
    #[doc = include_str!("../../../book/src/proposals.md")]
    mod proposals {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
