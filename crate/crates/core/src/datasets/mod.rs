//! Scenes: ground-truth boxes plus the feature raster the regressor reads.
//!
//! Scenes come from COCO-style annotation files ([`load_annotations`]) or from
//! the synthetic generator ([`synth_scenes`]). Either way the feature map is
//! rendered from the ground truths, see [`render_features`].

mod cache;
mod coco;
mod synth;

use std::borrow::Cow;
use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::Result;
use crate::regressor::FeatureMap;

pub use cache::{read_scene_cache, write_scene_cache, SCENE_CACHE_MAGIC};
pub use coco::{load_annotations, parse_annotations, save_annotations};
pub use synth::{synth_scenes, SynthConfig};

/// Image pixels per feature cell.
pub const DEFAULT_FEATURE_STRIDE: f64 = 4.0;

/// Distance channels saturate at this many object widths/heights.
pub const DISTANCE_CLAMP: f64 = 2.0;

/// Number of channels produced by [`render_features`].
pub const FEATURE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub width: f64,
    pub height: f64,
    /// Ground truths in center form. Category labels never reach training.
    pub gts: Vec<BBox>,
    /// One label per ground truth, when the source had them.
    pub categories: Option<Vec<i64>>,
    /// Rendered on demand from `gts` when absent.
    pub features: Option<FeatureMap>,
}

impl Scene {
    pub fn new(id: impl Into<String>, width: f64, height: f64, gts: Vec<BBox>) -> Self {
        Scene {
            id: id.into(),
            width,
            height,
            gts,
            categories: None,
            features: None,
        }
    }

    /// Scenes without ground truths cannot supply training boxes.
    pub fn is_trainable(&self) -> bool {
        !self.gts.is_empty()
    }

    pub fn feature_map(&self) -> Cow<'_, FeatureMap> {
        match &self.features {
            Some(f) => Cow::Borrowed(f),
            None => Cow::Owned(render_features(self.width, self.height, &self.gts, DEFAULT_FEATURE_STRIDE)),
        }
    }

    pub fn with_features(mut self) -> Self {
        if self.features.is_none() {
            self.features = Some(self.feature_map().into_owned());
        }
        self
    }

    /// Rescale coordinates so the shorter image side equals `short_side`.
    /// Any rendered feature map is dropped and re-rendered on demand.
    pub fn rescaled(&self, short_side: f64) -> Scene {
        let s = short_side / self.width.min(self.height);
        Scene {
            id: self.id.clone(),
            width: self.width * s,
            height: self.height * s,
            gts: self
                .gts
                .iter()
                .map(|b| BBox {
                    x: b.x * s,
                    y: b.y * s,
                    w: b.w * s,
                    h: b.h * s,
                })
                .collect(),
            categories: self.categories.clone(),
            features: None,
        }
    }

    /// Ground truths may hang over the image edge by at most half the image size.
    pub(crate) fn within_slack(b: &BBox, width: f64, height: f64) -> bool {
        b.left() >= -0.5 * width && b.right() <= 1.5 * width && b.top() >= -0.5 * height && b.bottom() <= 1.5 * height
    }
}

/// Render the three-channel stand-in feature map for a set of objects.
///
/// Channel 0 is object occupancy at each cell center. Channels 1 and 2 are the
/// signed x and y distances from the cell center to the nearest object center,
/// divided by that object's width (height) and clamped to `[-2, 2]`. "Nearest"
/// is measured in those normalized units.
pub fn render_features(width: f64, height: f64, gts: &[BBox], stride: f64) -> FeatureMap {
    let cols = ((width / stride).ceil() as usize).max(1);
    let rows = ((height / stride).ceil() as usize).max(1);
    let mut fm = FeatureMap::zeros(cols, rows, FEATURE_CHANNELS, stride).expect("positive dimensions");
    for i in 0..rows {
        let py = (i as f64 + 0.5) * stride;
        for j in 0..cols {
            let px = (j as f64 + 0.5) * stride;
            let inside = gts
                .iter()
                .any(|g| px > g.left() && px < g.right() && py > g.top() && py < g.bottom());
            fm.set(0, i, j, if inside { 1.0 } else { 0.0 });
            let nearest = gts
                .iter()
                .map(|g| ((px - g.x) / g.w, (py - g.y) / g.h))
                .min_by(|a, b| (a.0 * a.0 + a.1 * a.1).total_cmp(&(b.0 * b.0 + b.1 * b.1)));
            if let Some((dx, dy)) = nearest {
                fm.set(1, i, j, dx.clamp(-DISTANCE_CLAMP, DISTANCE_CLAMP));
                fm.set(2, i, j, dy.clamp(-DISTANCE_CLAMP, DISTANCE_CLAMP));
            }
        }
    }
    fm
}

/// Add zero-mean Gaussian noise with standard deviation `noise` to every entry.
pub fn add_feature_noise<R: Rng + ?Sized>(fm: &mut FeatureMap, noise: f64, rng: &mut R) {
    if noise <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, noise).expect("finite noise level");
    fm.map_inplace(|v| v + normal.sample(rng));
}

/// Drop every scene containing at least one annotation from an excluded category.
pub fn filter_categories(scenes: Vec<Scene>, excluded: &HashSet<i64>) -> Vec<Scene> {
    if excluded.is_empty() {
        return scenes;
    }
    scenes
        .into_iter()
        .filter(|s| {
            s.categories
                .as_ref()
                .is_none_or(|cats| !cats.iter().any(|c| excluded.contains(c)))
        })
        .collect()
}

/// Shorthand used by the CLI and tests: trainable scenes only.
pub fn trainable(scenes: &[Scene]) -> Result<Vec<&Scene>> {
    let out: Vec<&Scene> = scenes.iter().filter(|s| s.is_trainable()).collect();
    if out.is_empty() {
        return Err(crate::error::Error::EmptyInput("no scene with ground truths"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn occupancy_marks_inside_cells() {
        let g = b(64.0, 64.0, 40.0, 24.0);
        let fm = render_features(128.0, 128.0, &[g], 4.0);
        assert_eq!((fm.width(), fm.height()), (32, 32));
        for i in 0..32 {
            for j in 0..32 {
                let (px, py) = ((j as f64 + 0.5) * 4.0, (i as f64 + 0.5) * 4.0);
                let inside = (px - 64.0).abs() < 20.0 && (py - 64.0).abs() < 12.0;
                assert_eq!(fm.get(0, i, j), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn distance_channels_vanish_at_center_cell() {
        // Center on the center of cell (16, 10).
        let g = b(42.0, 66.0, 20.0, 30.0);
        let fm = render_features(128.0, 128.0, &[g], 4.0);
        assert_eq!(fm.get(1, 16, 10), 0.0);
        assert_eq!(fm.get(2, 16, 10), 0.0);
        assert_eq!(fm.get(1, 16, 11), 4.0 / 20.0);
        assert_eq!(fm.get(2, 0, 10), -2.0);
    }

    #[test]
    fn empty_scene_renders_zeros() {
        let fm = render_features(64.0, 32.0, &[], 4.0);
        assert!(fm.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn category_filter_is_image_level() {
        let mut keep = Scene::new("a", 10.0, 10.0, vec![b(5.0, 5.0, 2.0, 2.0)]);
        keep.categories = Some(vec![1]);
        let mut mixed = Scene::new("b", 10.0, 10.0, vec![b(5.0, 5.0, 2.0, 2.0), b(2.0, 2.0, 2.0, 2.0)]);
        mixed.categories = Some(vec![1, 7]);
        let scenes = vec![keep.clone(), mixed];

        assert_eq!(filter_categories(scenes.clone(), &HashSet::new()), scenes);
        assert_eq!(filter_categories(scenes.clone(), &HashSet::from([7])), vec![keep]);
        assert!(filter_categories(scenes, &HashSet::from([1])).is_empty());
    }

    #[test]
    fn rescale_to_short_side() {
        let s = Scene::new("r", 300.0, 200.0, vec![b(100.0, 50.0, 20.0, 10.0)]).rescaled(600.0);
        assert_eq!((s.width, s.height), (900.0, 600.0));
        assert_eq!(s.gts[0], b(300.0, 150.0, 60.0, 30.0));
    }
}
