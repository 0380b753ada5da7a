use ndarray::Array2;

use super::features::{roi_align_into, FeatureMap};
use super::head::RegressorModel;
use crate::boxes::{apply_offsets, BBox, Offsets};
use crate::datasets::Scene;
use crate::error::{Error, Result};

const CHUNK: usize = 1024;

/// Pool every box into one row of a `boxes x input_width` matrix.
pub fn pool_boxes(model: &RegressorModel, fm: &FeatureMap, boxes: &[BBox]) -> Result<Array2<f64>> {
    if fm.channels() != model.channels() {
        return Err(Error::DimensionMismatch {
            expected: model.channels(),
            actual: fm.channels(),
        });
    }
    let k = model.input_width();
    let mut out = Array2::zeros((boxes.len(), k));
    for (b, mut row) in boxes.iter().zip(out.rows_mut()) {
        roi_align_into(fm, b, model.pool_size(), row.as_slice_mut().expect("standard layout"));
    }
    Ok(out)
}

/// Predicted offsets for every box.
pub fn predict(model: &RegressorModel, fm: &FeatureMap, boxes: &[BBox]) -> Result<Vec<Offsets>> {
    let mut out = Vec::with_capacity(boxes.len());
    for chunk in boxes.chunks(CHUNK) {
        let x = pool_boxes(model, fm, chunk)?;
        let cache = model.forward_batch(x.view())?;
        out.extend(
            cache
                .output()
                .rows()
                .into_iter()
                .map(|r| Offsets::new(r[0], r[1], r[2], r[3])),
        );
    }
    Ok(out)
}

/// One refinement pass: every box moved by its predicted offsets.
pub fn refine_once(model: &RegressorModel, fm: &FeatureMap, boxes: &[BBox]) -> Result<Vec<BBox>> {
    predict(model, fm, boxes)?
        .iter()
        .zip(boxes)
        .map(|(d, b)| apply_offsets(b, d))
        .collect()
}

/// Iterative refinement over a precomputed feature map.
///
/// Entry `k` of the result holds the boxes after `k + 1` passes.
pub fn refine_with_features(
    model: &RegressorModel,
    fm: &FeatureMap,
    boxes: &[BBox],
    iterations: usize,
) -> Result<Vec<Vec<BBox>>> {
    if iterations == 0 {
        return Err(Error::InvalidConfig("refinement needs at least one iteration".into()));
    }
    let mut trajectory: Vec<Vec<BBox>> = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let prev = trajectory.last().map_or(boxes, Vec::as_slice);
        let next = refine_once(model, fm, prev)?;
        trajectory.push(next);
    }
    Ok(trajectory)
}

/// Iterative refinement of `boxes` in `scene`. The feature map is built once
/// and shared by all iterations.
pub fn refine(model: &RegressorModel, scene: &Scene, boxes: &[BBox], iterations: usize) -> Result<Vec<Vec<BBox>>> {
    let fm = scene.feature_map();
    refine_with_features(model, &fm, boxes, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{synth_scenes, SynthConfig};

    #[test]
    fn zero_model_is_identity_for_all_iterations() {
        let scene = synth_scenes(&SynthConfig::default(), 1).unwrap().remove(0);
        let model = RegressorModel::zeros(7, 3, &[8, 8]).unwrap();
        let boxes = vec![BBox::new(30.0, 40.0, 20.0, 10.0).unwrap(), BBox::new(-5.0, 300.0, 7.0, 9.0).unwrap()];
        let traj = refine(&model, &scene, &boxes, 3).unwrap();
        assert_eq!(traj.len(), 3);
        assert!(traj.iter().all(|it| *it == boxes));
    }

    #[test]
    fn single_iteration_is_one_forward_pass() {
        let scene = synth_scenes(&SynthConfig::default(), 1).unwrap().remove(0);
        let mut rng = crate::sampler::worker_rng(4, 0);
        let model = RegressorModel::init_gaussian(7, 3, &[16, 16], 0.1, &mut rng).unwrap();
        let boxes = vec![BBox::new(60.0, 60.0, 30.0, 25.0).unwrap()];
        let fm = scene.feature_map();
        let feats = super::super::roi_align(&fm, &boxes[0], 7);
        let d = model.forward(&feats).unwrap();
        let traj = refine(&model, &scene, &boxes, 1).unwrap();
        assert_eq!(traj, vec![vec![apply_offsets(&boxes[0], &d).unwrap()]]);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let scene = synth_scenes(&SynthConfig::default(), 1).unwrap().remove(0);
        let model = RegressorModel::zeros(7, 2, &[4]).unwrap();
        let err = refine(&model, &scene, &[BBox::new(1.0, 1.0, 1.0, 1.0).unwrap()], 1);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
