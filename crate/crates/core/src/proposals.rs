//! Object proposals from a dense seed grid.
//!
//! Seeds of several scales and aspect ratios are laid on a uniform lattice and
//! refined by the regressor. Refined boxes pile up around objects, so each box
//! is scored by how many other boxes overlap it with IoU above 0.7. Ranking then
//! uses a decaying NMS: instead of discarding a neighbor of a selected box, its
//! score is divided by a constant.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::datasets::Scene;
use crate::error::{Error, Result};
use crate::regressor::{refine, RegressorModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// A proposal in emission order, remembering its position in the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ranked {
    pub source: usize,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedGridConfig {
    /// Box side lengths as fractions of the image's shorter side.
    pub scales: Vec<f64>,
    /// Width over height.
    pub aspect_ratios: Vec<f64>,
    /// Lattice spacing as a fraction of the shorter side.
    pub stride: f64,
    /// Smallest side a clipped seed may shrink to, in raster units.
    pub min_side: f64,
}

impl Default for SeedGridConfig {
    fn default() -> Self {
        SeedGridConfig {
            scales: vec![0.125, 0.25, 0.5, 0.75],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            stride: 0.0625,
            min_side: 1.0,
        }
    }
}

impl SeedGridConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: &f64| *v > 0.0 && v.is_finite();
        if !self.scales.is_empty()
            && !self.aspect_ratios.is_empty()
            && self.scales.iter().all(pos)
            && self.aspect_ratios.iter().all(pos)
            && pos(&self.stride)
            && pos(&self.min_side)
        {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("seed grid: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub grid: SeedGridConfig,
    /// Refinement passes applied to the seeds.
    pub iterations: usize,
    /// IoU above which two refined boxes count as neighbors when scoring.
    pub neighbor_iou: f64,
    pub nms_iou: f64,
    pub decay: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            grid: SeedGridConfig::default(),
            iterations: 1,
            neighbor_iou: 0.7,
            nms_iou: 0.6,
            decay: 10.0,
        }
    }
}

fn lattice(extent: f64, stride: f64) -> Vec<f64> {
    let out: Vec<f64> = (0..)
        .map(|k| (k as f64 + 0.5) * stride)
        .take_while(|&c| c < extent)
        .collect();
    if out.is_empty() {
        vec![0.5 * extent]
    } else {
        out
    }
}

/// Seeds for every (scale, ratio, lattice point), scale-major then ratio, then
/// row-major over the lattice. Each seed is clipped to the image.
pub fn seed_grid(image_w: f64, image_h: f64, cfg: &SeedGridConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    if !(image_w > 0.0 && image_h > 0.0) {
        return Err(Error::InvalidConfig(format!("image size {image_w}x{image_h}")));
    }
    let short = image_w.min(image_h);
    let step = cfg.stride * short;
    let xs = lattice(image_w, step);
    let ys = lattice(image_h, step);
    let mut seeds = Vec::with_capacity(cfg.scales.len() * cfg.aspect_ratios.len() * xs.len() * ys.len());
    for &scale in &cfg.scales {
        for &ratio in &cfg.aspect_ratios {
            let w = scale * short * ratio.sqrt();
            let h = scale * short / ratio.sqrt();
            for &y in &ys {
                for &x in &xs {
                    seeds.push(BBox { x, y, w, h }.clip(image_w, image_h, cfg.min_side));
                }
            }
        }
    }
    Ok(seeds)
}

/// Score each box by the number of other boxes overlapping it with IoU > 0.7.
pub fn score_proposals(boxes: &[BBox]) -> Vec<f64> {
    score_with_threshold(boxes, 0.7)
}

pub fn score_with_threshold(boxes: &[BBox], thresh: f64) -> Vec<f64> {
    let mut counts = vec![0usize; boxes.len()];
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if iou(&boxes[i], &boxes[j]) > thresh {
                counts[i] += 1;
                counts[j] += 1;
            }
        }
    }
    counts.into_iter().map(|c| c as f64).collect()
}

/// Rank proposals by repeatedly emitting the best remaining one and dividing
/// the scores of remaining proposals that overlap it (IoU > `iou_thresh`) by
/// `decay`. Nothing is dropped. Ties go to the lower input index. Emitted
/// scores are the (possibly decayed) scores at emission time.
pub fn decay_nms(proposals: &[Proposal], iou_thresh: f64, decay: f64) -> Result<Vec<Ranked>> {
    if decay.is_nan() || decay <= 1.0 {
        return Err(Error::InvalidConfig(format!("decay factor {decay} must exceed 1")));
    }
    let mut scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    let mut remaining: Vec<usize> = (0..proposals.len()).collect();
    let mut out = Vec::with_capacity(proposals.len());
    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, &idx) in remaining.iter().enumerate().skip(1) {
            // `remaining` stays in index order, so strict `>` keeps the lower index on ties.
            if scores[idx] > scores[remaining[best]] {
                best = pos;
            }
        }
        let sel = remaining.remove(best);
        let sel_box = proposals[sel].bbox;
        for &idx in &remaining {
            if iou(&sel_box, &proposals[idx].bbox) > iou_thresh {
                scores[idx] /= decay;
            }
        }
        out.push(Ranked {
            source: sel,
            proposal: Proposal {
                bbox: sel_box,
                score: scores[sel],
            },
        });
    }
    Ok(out)
}

/// Seed grid, refinement, neighbor-count scoring and decay NMS for one scene.
/// Returned boxes are clipped to the image.
pub fn generate_proposals(model: &RegressorModel, scene: &Scene, cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
    let seeds = seed_grid(scene.width, scene.height, &cfg.grid)?;
    let refined = refine(model, scene, &seeds, cfg.iterations.max(1))?
        .pop()
        .expect("at least one iteration");
    rank_boxes(&refined, scene.width, scene.height, cfg)
}

/// Score, rank and clip an arbitrary box set the same way as refined proposals.
pub fn rank_boxes(boxes: &[BBox], image_w: f64, image_h: f64, cfg: &ProposalConfig) -> Result<Vec<Proposal>> {
    let scores = score_with_threshold(boxes, cfg.neighbor_iou);
    let candidates: Vec<Proposal> = boxes
        .iter()
        .zip(scores)
        .map(|(&bbox, score)| Proposal { bbox, score })
        .collect();
    Ok(decay_nms(&candidates, cfg.nms_iou, cfg.decay)?
        .into_iter()
        .map(|r| Proposal {
            bbox: r.proposal.bbox.clip(image_w, image_h, cfg.grid.min_side),
            score: r.proposal.score,
        })
        .collect())
}
