//! Minibatch SGD with momentum and weight decay on the box losses.
//!
//! Every epoch draws fresh training boxes around each ground truth with the
//! sampler, pools their features once, and sweeps them in shuffled minibatches.
//! Each box is regressed toward the ground truth it overlaps most. The learning
//! rate is divided by `lr_decay_factor` whenever the validation loss stalls for
//! `plateau_patience` epochs, and training stops once it reaches `stop_lr`.

use log::{info, warn};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{Dense, RegressorModel};
use super::refine::pool_boxes;
use crate::boxes::{apply_offsets, iou, match_nearest_gt, BBox, Offsets};
use crate::datasets::{Scene, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::loss::{box_loss_and_grad, LossConfig, LossKind};
use crate::sampler::{generate_training_boxes, SamplerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub plateau_patience: usize,
    /// Relative validation-loss drop that counts as an improvement.
    pub min_rel_improvement: f64,
    pub stop_lr: f64,
    pub max_epochs: usize,
    pub minibatch_size: usize,
    /// Standard deviation of the output layer's initial weights.
    pub init_std: f64,
    /// Standard deviation of hidden layers' initial weights; `None` scales by
    /// `sqrt(2 / fan_in)`.
    pub hidden_init_std: Option<f64>,
    pub pool_size: usize,
    pub hidden: Vec<usize>,
    pub loss: LossKind,
    /// Share of scenes held out for the validation loss.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            momentum: 0.9,
            weight_decay: 0.0005,
            initial_lr: 1e-3,
            lr_decay_factor: 10.0,
            plateau_patience: 3,
            min_rel_improvement: 1e-3,
            stop_lr: 1e-6,
            max_epochs: 60,
            minibatch_size: 128,
            init_std: 0.001,
            hidden_init_std: None,
            pool_size: 7,
            hidden: vec![256, 256],
            loss: LossKind::Iou,
            val_fraction: 0.04,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.initial_lr,
            self.lr_decay_factor - 1.0,
            self.stop_lr,
            self.init_std,
            self.val_fraction,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        let ok = positive
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.stop_lr < self.initial_lr
            && self.plateau_patience >= 1
            && self.max_epochs >= 1
            && self.minibatch_size >= 1
            && self.pool_size >= 1
            && self.val_fraction < 1.0
            && self.hidden.iter().all(|&w| w >= 1)
            && self.hidden_init_std.is_none_or(|s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("train: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean IoU of refined validation boxes against their targets.
    pub val_mean_iou: f64,
    pub boxes: usize,
    /// Boxes whose IoU gradient fell back to smooth-L1.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    LrFloor,
    MaxEpochs,
    /// Non-finite loss; the returned model is the last finite best.
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the lowest validation loss.
    pub model: RegressorModel,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        matches!(self.stop, StopReason::Diverged { .. })
    }
}

/// Pooled features and regression targets for a set of boxes.
struct BoxSet {
    features: Array2<f64>,
    inputs: Vec<BBox>,
    targets: Vec<BBox>,
}

impl BoxSet {
    fn len(&self) -> usize {
        self.inputs.len()
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;
const STREAM_EPOCH_BASE: u64 = 1 << 32;

fn init_model(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<RegressorModel> {
    let mut model = RegressorModel::init_gaussian(cfg.pool_size, FEATURE_CHANNELS, &cfg.hidden, 1.0, rng)?;
    let n = model.layers().len();
    for (k, layer) in model.layers_mut().iter_mut().enumerate() {
        let std = if k + 1 == n {
            cfg.init_std
        } else {
            cfg.hidden_init_std.unwrap_or((2.0 / layer.inputs() as f64).sqrt())
        };
        layer.weights.mapv_inplace(|w| w * std);
    }
    Ok(model)
}

fn sample_box_set(
    model: &RegressorModel,
    scenes: &[(&Scene, std::borrow::Cow<'_, crate::regressor::FeatureMap>)],
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BoxSet> {
    let mut parts = Vec::with_capacity(scenes.len());
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (scene, fm) in scenes {
        let mut scene_boxes = Vec::new();
        for g in &scene.gts {
            scene_boxes.extend(generate_training_boxes(g, sampler, rng)?.boxes);
        }
        for b in &scene_boxes {
            targets.push(scene.gts[match_nearest_gt(b, &scene.gts)?]);
        }
        parts.push(pool_boxes(model, fm, &scene_boxes)?);
        inputs.extend(scene_boxes);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let features = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
    Ok(BoxSet {
        features,
        inputs,
        targets,
    })
}

/// Mean loss and mean refined IoU over a box set.
fn evaluate(model: &RegressorModel, set: &BoxSet, kind: LossKind, loss_cfg: &LossConfig) -> Result<(f64, f64)> {
    let cache = model.forward_batch(set.features.view())?;
    let (mut loss, mut overlap) = (0.0, 0.0);
    for (n, row) in cache.output().rows().into_iter().enumerate() {
        let pred = Offsets::new(row[0], row[1], row[2], row[3]);
        let (l, _) = box_loss_and_grad(kind, &set.inputs[n], &pred, &set.targets[n], loss_cfg)?;
        loss += l;
        overlap += iou(&apply_offsets(&set.inputs[n], &pred)?, &set.targets[n]);
    }
    let n = set.len() as f64;
    Ok((loss / n, overlap / n))
}

struct Sgd {
    velocity: Vec<Dense>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    fn new(model: &RegressorModel, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            velocity: model
                .layers()
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
            momentum,
            weight_decay,
        }
    }

    /// `v <- momentum * v - lr * (g + decay * w)`, `w <- w + v`. Biases are not decayed.
    fn step(&mut self, model: &mut RegressorModel, grads: &[Dense], lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((layer, grad), vel) in model.layers_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            ndarray::Zip::from(&mut layer.weights)
                .and(&grad.weights)
                .and(&mut vel.weights)
                .for_each(|w, &g, v| {
                    *v = mu * *v - lr * (g + wd * *w);
                    *w += *v;
                });
            ndarray::Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut vel.bias)
                .for_each(|b, &g, v| {
                    *v = mu * *v - lr * g;
                    *b += *v;
                });
        }
    }
}

/// One epoch over `set`; returns the mean training loss and fallback count.
fn run_epoch(
    model: &mut RegressorModel,
    sgd: &mut Sgd,
    set: &BoxSet,
    order: &[usize],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    lr: f64,
) -> Result<(f64, usize)> {
    let k = model.input_width();
    let (mut total, mut fallbacks) = (0.0, 0);
    for batch in order.chunks(cfg.minibatch_size) {
        let mut x = Array2::zeros((batch.len(), k));
        for (row, &n) in batch.iter().enumerate() {
            x.row_mut(row).assign(&set.features.row(n));
        }
        let cache = model.forward_batch(x.view())?;
        let mut d_out = Array2::zeros((batch.len(), 4));
        let scale = 1.0 / batch.len() as f64;
        for (row, &n) in batch.iter().enumerate() {
            let out = cache.output().row(row);
            let pred = Offsets::new(out[0], out[1], out[2], out[3]);
            let (l, g) = match box_loss_and_grad(cfg.loss, &set.inputs[n], &pred, &set.targets[n], loss_cfg) {
                Ok(v) => v,
                Err(Error::NumericRange(_)) => return Ok((f64::NAN, fallbacks)),
                Err(e) => return Err(e),
            };
            total += l;
            fallbacks += g.fallback as usize;
            for c in 0..4 {
                d_out[[row, c]] = g.grad[c] * scale;
            }
        }
        if !total.is_finite() {
            return Ok((total, fallbacks));
        }
        let grads = model.backward(&cache, d_out.view());
        sgd.step(model, &grads, lr);
    }
    Ok((total / set.len() as f64, fallbacks))
}

/// Train a regressor on `scenes`.
///
/// A `val_fraction` share of the scenes (at least one, when there are two or
/// more) is held out for the validation loss that drives the schedule. The
/// returned model is the one with the lowest validation loss.
pub fn train(
    scenes: &[Scene],
    cfg: &TrainConfig,
    sampler_cfg: &SamplerConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    sampler_cfg.validate()?;
    loss_cfg.validate()?;
    let usable: Vec<&Scene> = scenes.iter().filter(|s| s.is_trainable()).collect();
    if usable.len() < scenes.len() {
        warn!("skipping {} scene(s) without ground truths", scenes.len() - usable.len());
    }
    if usable.is_empty() {
        return Err(Error::EmptyInput("training scenes"));
    }

    let mut model = init_model(cfg, &mut stream_rng(cfg.seed, STREAM_INIT))?;

    let mut order: Vec<usize> = (0..usable.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, STREAM_SPLIT));
    let n_val = if usable.len() < 2 {
        0
    } else {
        ((usable.len() as f64 * cfg.val_fraction).ceil() as usize).clamp(1, usable.len() - 1)
    };
    let with_maps = |idx: &[usize]| -> Vec<_> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| (usable[i], usable[i].feature_map())).collect()
    };
    let val_scenes = with_maps(&order[..n_val]);
    let train_scenes = with_maps(&order[n_val..]);
    // A single scene validates on itself.
    let val_scenes = if val_scenes.is_empty() { with_maps(&order) } else { val_scenes };
    for (s, fm) in train_scenes.iter().chain(&val_scenes) {
        if fm.channels() != FEATURE_CHANNELS {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_CHANNELS,
                actual: fm.channels(),
            });
        }
        debug_assert!(s.is_trainable());
    }

    let val_set = sample_box_set(&model, &val_scenes, sampler_cfg, &mut stream_rng(cfg.seed, STREAM_VAL))?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut sgd = Sgd::new(&model, cfg.momentum, cfg.weight_decay);

    let (mut best_val, _) = evaluate(&model, &val_set, cfg.loss, loss_cfg)?;
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut lr = cfg.initial_lr;
    let mut log = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let set = sample_box_set(
            &model,
            &train_scenes,
            sampler_cfg,
            &mut stream_rng(cfg.seed, STREAM_EPOCH_BASE + epoch as u64),
        )?;
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let (train_loss, fallbacks) = run_epoch(&mut model, &mut sgd, &set, &order, cfg, loss_cfg, lr)?;
        let (val_loss, val_mean_iou) = if train_loss.is_finite() {
            evaluate(&model, &val_set, cfg.loss, loss_cfg).unwrap_or((f64::NAN, f64::NAN))
        } else {
            (f64::NAN, f64::NAN)
        };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_mean_iou,
            boxes: set.len(),
            fallbacks,
        });
        info!("epoch {epoch}: lr {lr:e} train {train_loss:.6} val {val_loss:.6} val IoU {val_mean_iou:.4}");
        if !(train_loss.is_finite() && val_loss.is_finite()) {
            let detail = format!("non-finite loss (train {train_loss}, val {val_loss}) at lr {lr:e}");
            warn!("training diverged at epoch {epoch}: {detail}");
            stop = StopReason::Diverged { epoch, detail };
            break;
        }
        if best_val - val_loss > cfg.min_rel_improvement * best_val.abs() {
            best_val = val_loss;
            best_model = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr /= cfg.lr_decay_factor;
                stale = 0;
                if lr <= cfg.stop_lr * (1.0 + 1e-9) {
                    stop = StopReason::LrFloor;
                    break;
                }
                info!("validation loss plateaued, learning rate now {lr:e}");
            }
        }
    }

    Ok(TrainOutcome {
        model: best_model,
        best_epoch,
        log,
        stop,
    })
}
