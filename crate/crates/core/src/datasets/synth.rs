use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_feature_noise, render_features, Scene};
use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::sampler::worker_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range as a fraction of the matching image side.
    pub min_size: f64,
    pub max_size: f64,
    /// Ground truths are placed with pairwise IoU strictly below this.
    pub max_pair_iou: f64,
    /// Place exactly two objects sharing a vertical edge.
    pub adjacent_pair: bool,
    /// Standard deviation of Gaussian noise added to every feature entry.
    pub noise: f64,
    pub stride: f64,
    pub placement_attempts: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_width: 128.0,
            image_height: 128.0,
            min_objects: 1,
            max_objects: 4,
            min_size: 0.15,
            max_size: 0.5,
            max_pair_iou: 0.3,
            adjacent_pair: false,
            noise: 0.02,
            stride: super::DEFAULT_FEATURE_STRIDE,
            placement_attempts: 200,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_width > 0.0
            && self.image_height > 0.0
            && self.min_objects >= 1
            && self.min_objects <= self.max_objects
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.max_size <= 1.0
            && self.max_pair_iou > 0.0
            && self.noise >= 0.0
            && self.noise.is_finite()
            && self.stride > 0.0
            && self.placement_attempts >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("synth: {self:?}")))
        }
    }
}

fn random_object<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> BBox {
    let (iw, ih) = (cfg.image_width, cfg.image_height);
    let w = iw * rng.random_range(cfg.min_size..=cfg.max_size);
    let h = ih * rng.random_range(cfg.min_size..=cfg.max_size);
    let x = rng.random_range(0.5 * w..=iw - 0.5 * w);
    let y = rng.random_range(0.5 * h..=ih - 0.5 * h);
    BBox { x, y, w, h }
}

fn place_objects<R: Rng + ?Sized>(cfg: &SynthConfig, n: usize, rng: &mut R) -> Option<Vec<BBox>> {
    let mut placed: Vec<BBox> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        if attempts == cfg.placement_attempts {
            return None;
        }
        attempts += 1;
        let b = random_object(cfg, rng);
        if placed.iter().all(|p| iou(p, &b) < cfg.max_pair_iou) {
            placed.push(b);
        }
    }
    Some(placed)
}

fn adjacent_pair<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Vec<BBox> {
    // Two boxes side by side, touching along a vertical edge, together inside the image.
    let (iw, ih) = (cfg.image_width, cfg.image_height);
    let max_w = cfg.max_size.min(0.5);
    let w1 = iw * rng.random_range(cfg.min_size.min(max_w)..=max_w);
    let w2 = iw * rng.random_range(cfg.min_size.min(max_w)..=max_w);
    let h1 = ih * rng.random_range(cfg.min_size..=cfg.max_size);
    let h2 = ih * rng.random_range(cfg.min_size..=cfg.max_size);
    let left = rng.random_range(0.0..=iw - w1 - w2);
    let y1 = rng.random_range(0.5 * h1..=ih - 0.5 * h1);
    let y2 = (y1 + rng.random_range(-0.25..=0.25) * h1).clamp(0.5 * h2, ih - 0.5 * h2);
    vec![
        BBox {
            x: left + 0.5 * w1,
            y: y1,
            w: w1,
            h: h1,
        },
        BBox {
            x: left + w1 + 0.5 * w2,
            y: y2,
            w: w2,
            h: h2,
        },
    ]
}

/// Generate `count` scenes. Scene `k` draws from its own stream (`seed ^ k`),
/// so any subset can be regenerated independently.
pub fn synth_scenes(cfg: &SynthConfig, count: usize) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = worker_rng(cfg.seed, k as u64);
        let gts = if cfg.adjacent_pair {
            adjacent_pair(cfg, &mut rng)
        } else {
            let mut n = rng.random_range(cfg.min_objects..=cfg.max_objects);
            // A single object always fits, so this terminates.
            loop {
                if let Some(gts) = place_objects(cfg, n, &mut rng) {
                    break gts;
                }
                warn!("scene {k}: could not place {n} objects, retrying with {}", n - 1);
                n -= 1;
            }
        };
        let mut fm = render_features(cfg.image_width, cfg.image_height, &gts, cfg.stride);
        add_feature_noise(&mut fm, cfg.noise, &mut rng);
        let mut scene = Scene::new(format!("synth-{}-{k}", cfg.seed), cfg.image_width, cfg.image_height, gts);
        scene.features = Some(fm);
        scenes.push(scene);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenes() {
        let cfg = SynthConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(synth_scenes(&cfg, 5).unwrap(), synth_scenes(&cfg, 5).unwrap());
        let other = SynthConfig { seed: 18, ..cfg.clone() };
        assert_ne!(synth_scenes(&other, 5).unwrap(), synth_scenes(&cfg, 5).unwrap());
    }

    #[test]
    fn objects_respect_separation_and_bounds() {
        let cfg = SynthConfig::default();
        for s in synth_scenes(&cfg, 50).unwrap() {
            assert!((1..=4).contains(&s.gts.len()));
            for (i, a) in s.gts.iter().enumerate() {
                assert!(a.left() >= 0.0 && a.right() <= 128.0 && a.top() >= 0.0 && a.bottom() <= 128.0);
                for b in &s.gts[i + 1..] {
                    assert!(iou(a, b) < 0.3);
                }
            }
        }
    }

    #[test]
    fn occupancy_integrates_to_object_area() {
        let cfg = SynthConfig {
            max_objects: 1,
            noise: 0.0,
            seed: 3,
            ..Default::default()
        };
        for s in synth_scenes(&cfg, 30).unwrap() {
            let fm = s.features.as_ref().unwrap();
            let cells: f64 = (0..fm.height())
                .flat_map(|i| (0..fm.width()).map(move |j| (i, j)))
                .map(|(i, j)| fm.get(0, i, j))
                .sum();
            let g = s.gts[0];
            let area = cells * cfg.stride * cfg.stride;
            assert!((area - g.area()).abs() <= cfg.stride * (g.w + g.h) + cfg.stride * cfg.stride, "{area} vs {}", g.area());
        }
    }

    #[test]
    fn adjacent_pair_touches() {
        let cfg = SynthConfig {
            adjacent_pair: true,
            seed: 9,
            ..Default::default()
        };
        for s in synth_scenes(&cfg, 10).unwrap() {
            assert_eq!(s.gts.len(), 2);
            assert!((s.gts[0].right() - s.gts[1].left()).abs() < 1e-9);
            assert!(s.gts[1].right() <= 128.0 + 1e-9);
        }
    }

    #[test]
    fn crowded_config_falls_back_to_fewer_objects() {
        let cfg = SynthConfig {
            min_objects: 4,
            max_objects: 4,
            min_size: 0.9,
            max_size: 0.95,
            placement_attempts: 20,
            ..Default::default()
        };
        let scenes = synth_scenes(&cfg, 3).unwrap();
        assert!(scenes.iter().all(|s| s.gts.len() == 1));
    }
}
