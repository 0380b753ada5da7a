//! Random training boxes around ground truths.
//!
//! Offsets are drawn independently: `tx, ty ~ U(-alpha, alpha)` and
//! `tw, th ~ U(ln(1 - beta), ln(1 + beta))`. A perturbed box is kept only if its
//! IoU with the source ground truth is at least `t`.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{apply_offsets, iou, BBox, Offsets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Center shift half-range, in units of the ground-truth side.
    pub alpha: f64,
    /// Scale half-range; `0 <= beta < 1`.
    pub beta: f64,
    /// IoU rejection threshold.
    pub t: f64,
    pub boxes_per_gt: usize,
    pub max_attempts_per_box: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            alpha: 0.35,
            beta: 0.5,
            t: 0.3,
            boxes_per_gt: 50,
            max_attempts_per_box: 1000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.alpha.is_finite()
            && (0.0..1.0).contains(&self.beta)
            && (0.0..1.0).contains(&self.t)
            && self.boxes_per_gt >= 1
            && self.max_attempts_per_box >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("sampler: {self:?}")))
        }
    }
}

/// Boxes produced for one ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBoxes {
    pub boxes: Vec<BBox>,
    /// Total draws made, accepted or not.
    pub attempts: usize,
    /// Fewer than `boxes_per_gt` boxes were accepted before the attempt cap.
    pub underfilled: bool,
}

impl SampledBoxes {
    pub fn acceptance_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.boxes.len() as f64 / self.attempts as f64
        }
    }
}

/// Per-worker stream: the base seed XOR the worker index.
pub fn worker_rng(base_seed: u64, worker: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(base_seed ^ worker)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn sample_offsets<R: Rng + ?Sized>(cfg: &SamplerConfig, rng: &mut R) -> Offsets {
    let (lo, hi) = ((1.0 - cfg.beta).ln(), (1.0 + cfg.beta).ln());
    Offsets {
        tx: uniform(rng, -cfg.alpha, cfg.alpha),
        ty: uniform(rng, -cfg.alpha, cfg.alpha),
        tw: uniform(rng, lo, hi),
        th: uniform(rng, lo, hi),
    }
}

/// Perturb `g` until `boxes_per_gt` boxes with IoU >= `t` are collected or the
/// attempt budget (`boxes_per_gt * max_attempts_per_box`) runs out.
pub fn generate_training_boxes<R: Rng + ?Sized>(
    g: &BBox,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<SampledBoxes> {
    cfg.validate()?;
    if !g.is_valid() {
        return Err(Error::InvalidBox(format!("{g:?}")));
    }
    let budget = cfg.boxes_per_gt.saturating_mul(cfg.max_attempts_per_box);
    let mut boxes = Vec::with_capacity(cfg.boxes_per_gt);
    let mut attempts = 0;
    while boxes.len() < cfg.boxes_per_gt && attempts < budget {
        attempts += 1;
        let d = sample_offsets(cfg, rng);
        let b = apply_offsets(g, &d)?;
        if iou(&b, g) >= cfg.t {
            boxes.push(b);
        }
    }
    let underfilled = boxes.len() < cfg.boxes_per_gt;
    if underfilled {
        warn!(
            "sampler under-filled: {} of {} boxes after {} attempts (t = {})",
            boxes.len(),
            cfg.boxes_per_gt,
            attempts,
            cfg.t
        );
    }
    Ok(SampledBoxes {
        boxes,
        attempts,
        underfilled,
    })
}
