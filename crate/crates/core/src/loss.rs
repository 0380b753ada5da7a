//! Regression losses and their gradients with respect to predicted offsets.
//!
//! The IoU loss is `-ln(IoU(u, v) + eps)`. Its gradient is taken through the
//! offset transform, so training only ever needs `d loss / d offsets`.

use serde::{Deserialize, Serialize};

use crate::boxes::{apply_offsets, encode_offsets, intersection_extent, iou, match_nearest_gt, BBox, Offsets};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Iou,
    SmoothL1,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(LossKind::Iou),
            "smooth_l1" | "sl1" => Ok(LossKind::SmoothL1),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Added to the IoU inside the logarithm.
    pub epsilon: f64,
    /// Quadratic/linear switch point of smooth-L1.
    pub smooth_l1_delta: f64,
    /// Scale of the smooth-L1 gradient used when the refined box misses its target.
    pub fallback_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            smooth_l1_delta: 1.0,
            fallback_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon > 0.0 && self.smooth_l1_delta > 0.0 && self.fallback_weight >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss: {self:?}")))
        }
    }
}

/// Gradient of a box loss with respect to the predicted offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetGrad {
    pub grad: [f64; 4],
    /// The refined box had no overlap with the target and the smooth-L1
    /// fallback supplied the gradient.
    pub fallback: bool,
}

pub fn iou_loss(u: &BBox, v: &BBox, cfg: &LossConfig) -> f64 {
    -(iou(u, v) + cfg.epsilon).ln()
}

// Weight of `r` in d min(r, g) (or d max). Edges that coincide take the
// midpoint of the two one-sided derivatives, which is zero at a perfect fit.
fn active(r: f64, g: f64, r_wins: bool, scale: f64) -> f64 {
    if (r - g).abs() <= 1e-9 * scale {
        0.5
    } else if r_wins {
        1.0
    } else {
        0.0
    }
}

/// d IoU / d (x, y, w, h) of `r` against fixed `g`; `None` when they do not overlap.
fn iou_grad_wrt_box(r: &BBox, g: &BBox) -> Option<(f64, [f64; 4])> {
    let (iw, ih) = intersection_extent(r, g);
    if iw <= 0.0 || ih <= 0.0 {
        return None;
    }
    let sx = r.w + g.w;
    let sy = r.h + g.h;
    let right = active(r.right(), g.right(), r.right() < g.right(), sx);
    let left = active(r.left(), g.left(), r.left() > g.left(), sx);
    let bottom = active(r.bottom(), g.bottom(), r.bottom() < g.bottom(), sy);
    let top = active(r.top(), g.top(), r.top() > g.top(), sy);

    let diw_dx = right - left;
    let diw_dw = 0.5 * (right + left);
    let dih_dy = bottom - top;
    let dih_dh = 0.5 * (bottom + top);

    let inter = iw * ih;
    let union = r.area() + g.area() - inter;
    let d_inter = [ih * diw_dx, iw * dih_dy, ih * diw_dw, iw * dih_dh];
    let d_area = [0.0, 0.0, r.h, r.w];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        grad[k] = (d_inter[k] * union - inter * d_union) / (union * union);
    }
    Some((inter / union, grad))
}

/// Gradient of `iou_loss(apply_offsets(input_box, pred), gt)` with respect to `pred`.
///
/// Without overlap the IoU is locally constant, so the smooth-L1 gradient toward
/// `encode_offsets(input_box, gt)` (scaled by `fallback_weight`) is returned instead.
pub fn iou_loss_grad(pred: &Offsets, input_box: &BBox, gt: &BBox, cfg: &LossConfig) -> Result<OffsetGrad> {
    let r = apply_offsets(input_box, pred)?;
    match iou_grad_wrt_box(&r, gt) {
        Some((v, d_iou)) => {
            let dl_diou = -1.0 / (v + cfg.epsilon);
            let chain = [input_box.w, input_box.h, r.w, r.h];
            let mut grad = [0.0; 4];
            for k in 0..4 {
                grad[k] = dl_diou * d_iou[k] * chain[k];
            }
            Ok(OffsetGrad { grad, fallback: false })
        }
        None => {
            let target = encode_offsets(input_box, gt);
            let mut grad = smooth_l1_grad(pred, &target, cfg);
            for g in &mut grad {
                *g *= cfg.fallback_weight;
            }
            Ok(OffsetGrad { grad, fallback: true })
        }
    }
}

/// Mean IoU loss over refined inputs, each scored against its best-overlapping ground truth.
pub fn batch_iou_loss(inputs: &[(BBox, Offsets)], gts: &[BBox], cfg: &LossConfig) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("batch inputs"));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("ground-truth list"));
    }
    let mut total = 0.0;
    for (b, pred) in inputs {
        let g = &gts[match_nearest_gt(b, gts)?];
        total += iou_loss(&apply_offsets(b, pred)?, g, cfg);
    }
    Ok(total / inputs.len() as f64)
}

pub fn smooth_l1_loss(pred: &Offsets, target: &Offsets, cfg: &LossConfig) -> f64 {
    let delta = cfg.smooth_l1_delta;
    let (p, t) = (pred.to_array(), target.to_array());
    p.iter()
        .zip(t.iter())
        .map(|(a, b)| {
            let d = (a - b).abs();
            if d < delta {
                0.5 * d * d / delta
            } else {
                d - 0.5 * delta
            }
        })
        .sum()
}

pub fn smooth_l1_grad(pred: &Offsets, target: &Offsets, cfg: &LossConfig) -> [f64; 4] {
    let delta = cfg.smooth_l1_delta;
    let (p, t) = (pred.to_array(), target.to_array());
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - t[k];
        grad[k] = if d.abs() < delta { d / delta } else { d.signum() };
    }
    grad
}

/// Loss and offset gradient for one (input box, prediction, target) triple.
pub fn box_loss_and_grad(
    kind: LossKind,
    input_box: &BBox,
    pred: &Offsets,
    gt: &BBox,
    cfg: &LossConfig,
) -> Result<(f64, OffsetGrad)> {
    match kind {
        LossKind::Iou => {
            let r = apply_offsets(input_box, pred)?;
            Ok((iou_loss(&r, gt, cfg), iou_loss_grad(pred, input_box, gt, cfg)?))
        }
        LossKind::SmoothL1 => {
            let target = encode_offsets(input_box, gt);
            Ok((
                smooth_l1_loss(pred, &target, cfg),
                OffsetGrad {
                    grad: smooth_l1_grad(pred, &target, cfg),
                    fallback: false,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn loss_at(pred: [f64; 4], input: &BBox, gt: &BBox, cfg: &LossConfig) -> f64 {
        iou_loss(&apply_offsets(input, &Offsets::from_array(pred)).unwrap(), gt, cfg)
    }

    // Independent oracle: central differences of the loss itself.
    fn central_diff(pred: [f64; 4], input: &BBox, gt: &BBox, cfg: &LossConfig, h: f64) -> [f64; 4] {
        let mut out = [0.0; 4];
        for k in 0..4 {
            let (mut p, mut m) = (pred, pred);
            p[k] += h;
            m[k] -= h;
            out[k] = (loss_at(p, input, gt, cfg) - loss_at(m, input, gt, cfg)) / (2.0 * h);
        }
        out
    }

    fn edges_well_separated(r: &BBox, g: &BBox, margin: f64) -> bool {
        (r.left() - g.left()).abs() > margin
            && (r.right() - g.right()).abs() > margin
            && (r.top() - g.top()).abs() > margin
            && (r.bottom() - g.bottom()).abs() > margin
    }

    #[test]
    fn loss_values() {
        let cfg = LossConfig::default();
        let u = b(0.0, 0.0, 2.0, 2.0);
        assert_abs_diff_eq!(iou_loss(&u, &u, &cfg), -(1.0 + 1e-6f64).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(iou_loss(&u, &b(10.0, 10.0, 2.0, 2.0), &cfg), 13.815510557964274, epsilon = 1e-9);
        let tiny = LossConfig {
            epsilon: 1e-300,
            ..cfg
        };
        assert_abs_diff_eq!(iou_loss(&u, &b(1.0, 1.0, 2.0, 2.0), &tiny), 7f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 100 {
            let input = b(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(1.0..6.0), rng.random_range(1.0..6.0));
            let gt = b(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(1.0..6.0), rng.random_range(1.0..6.0));
            let pred = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            let r = apply_offsets(&input, &Offsets::from_array(pred)).unwrap();
            let (iw, ih) = intersection_extent(&r, &gt);
            if iw < 1e-2 || ih < 1e-2 || !edges_well_separated(&r, &gt, 1e-3) {
                continue;
            }
            let analytic = iou_loss_grad(&Offsets::from_array(pred), &input, &gt, &cfg).unwrap();
            assert!(!analytic.fallback);
            let numeric = central_diff(pred, &input, &gt, &cfg, 1e-5);
            for k in 0..4 {
                let scale = analytic.grad[k].abs().max(numeric[k].abs()).max(1e-6);
                let rel = (analytic.grad[k] - numeric[k]).abs() / scale;
                assert!(rel < 1e-3, "k={k} analytic={:?} numeric={numeric:?}", analytic.grad);
            }
            checked += 1;
        }
    }

    #[test]
    fn perfect_prediction_has_vanishing_gradient() {
        let cfg = LossConfig::default();
        let input = b(1.0, 2.0, 3.0, 4.0);
        let gt = b(1.7, 1.1, 5.0, 2.5);
        let pred = encode_offsets(&input, &gt);
        let analytic = iou_loss_grad(&pred, &input, &gt, &cfg).unwrap();
        let numeric = central_diff(pred.to_array(), &input, &gt, &cfg, 1e-5);
        for k in 0..4 {
            assert!(analytic.grad[k].abs() < 1e-6, "{:?}", analytic.grad);
            assert!((analytic.grad[k] - numeric[k]).abs() < 1e-6, "{numeric:?}");
        }
    }

    #[test]
    fn disjoint_refinement_falls_back_to_smooth_l1() {
        let cfg = LossConfig::default();
        let input = b(0.0, 0.0, 2.0, 2.0);
        let gt = b(20.0, 0.0, 2.0, 2.0);
        let pred = Offsets::ZERO;
        let g = iou_loss_grad(&pred, &input, &gt, &cfg).unwrap();
        assert!(g.fallback);
        assert_eq!(g.grad, smooth_l1_grad(&pred, &encode_offsets(&input, &gt), &cfg));
        assert!(g.grad[0] < 0.0);
    }

    #[test]
    fn loss_never_increases_toward_optimum() {
        let cfg = LossConfig::default();
        let input = b(0.0, 0.0, 4.0, 3.0);
        let gt = b(1.0, -0.5, 5.0, 2.0);
        let opt = encode_offsets(&input, &gt).to_array();
        for k in 0..4 {
            for start in [-0.8, 0.8] {
                let mut prev = f64::INFINITY;
                for step in 0..=100 {
                    let mut p = opt;
                    p[k] += start * (1.0 - step as f64 / 100.0);
                    let l = loss_at(p, &input, &gt, &cfg);
                    assert!(l <= prev + 1e-12, "k={k} step={step}");
                    prev = l;
                }
                assert!(prev >= -(1.0 + cfg.epsilon).ln() - 1e-12);
            }
        }
    }

    #[test]
    fn batch_loss_is_mean_and_permutation_invariant() {
        let cfg = LossConfig::default();
        let gts = [b(0.0, 0.0, 2.0, 2.0), b(10.0, 10.0, 4.0, 4.0)];
        let a = (b(0.5, 0.0, 2.0, 2.0), Offsets::ZERO);
        let c = (b(10.0, 11.0, 4.0, 4.0), Offsets::new(0.0, -0.1, 0.0, 0.0));
        let la = iou_loss(&a.0, &gts[0], &cfg);
        let lc = iou_loss(&apply_offsets(&c.0, &c.1).unwrap(), &gts[1], &cfg);
        assert_abs_diff_eq!(batch_iou_loss(&[a], &gts, &cfg).unwrap(), la, epsilon = 1e-15);
        assert_abs_diff_eq!(batch_iou_loss(&[a, c], &gts, &cfg).unwrap(), 0.5 * (la + lc), epsilon = 1e-15);
        assert_eq!(batch_iou_loss(&[a, c], &gts, &cfg).unwrap(), batch_iou_loss(&[c, a], &gts, &cfg).unwrap());
        assert!(batch_iou_loss(&[], &gts, &cfg).is_err());
    }

    #[test]
    fn smooth_l1_values_and_gradient() {
        let cfg = LossConfig::default();
        let z = Offsets::ZERO;
        assert_eq!(smooth_l1_loss(&z, &z, &cfg), 0.0);
        assert_abs_diff_eq!(smooth_l1_loss(&Offsets::new(2.0, 0.0, 0.0, 0.0), &z, &cfg), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(smooth_l1_loss(&Offsets::new(0.5, 0.0, 0.0, 0.0), &z, &cfg), 0.125, epsilon = 1e-15);

        let target = Offsets::new(0.1, -0.3, 0.2, 2.0);
        let pred = [0.4, 1.1, -0.7, 0.2];
        let analytic = smooth_l1_grad(&Offsets::from_array(pred), &target, &cfg);
        let h = 1e-6;
        for k in 0..4 {
            let (mut p, mut m) = (pred, pred);
            p[k] += h;
            m[k] -= h;
            let num = (smooth_l1_loss(&Offsets::from_array(p), &target, &cfg)
                - smooth_l1_loss(&Offsets::from_array(m), &target, &cfg))
                / (2.0 * h);
            assert!((num - analytic[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("iou".parse::<LossKind>().unwrap(), LossKind::Iou);
        assert_eq!("smooth_l1".parse::<LossKind>().unwrap(), LossKind::SmoothL1);
        assert!("l2".parse::<LossKind>().is_err());
    }
}
