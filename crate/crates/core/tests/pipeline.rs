//! Public API end to end: data on disk, training, refinement, proposals, metrics.

use boxreg::datasets::{load_annotations, read_scene_cache, save_annotations, synth_scenes, write_scene_cache, SynthConfig};
use boxreg::records::{read_proposals, write_proposals, ImageRecords};
use boxreg::sampler::worker_rng;
use boxreg::{
    generate_proposals, generate_training_boxes, load_model, mean_iou, recall_at, refine, save_model, train, EvalRecord,
    LossConfig, ProposalConfig, RegressorModel, SamplerConfig, TrainConfig,
};

fn small_synth(seed: u64, n: usize) -> Vec<boxreg::Scene> {
    synth_scenes(
        &SynthConfig {
            seed,
            ..Default::default()
        },
        n,
    )
    .unwrap()
}

#[test]
fn scene_cache_and_annotations_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let scenes = small_synth(1, 4);
    let cache = tmp.path().join("s.bin");
    write_scene_cache(&scenes, &cache).unwrap();
    assert_eq!(read_scene_cache(&cache).unwrap(), scenes);

    let mut numbered = scenes.clone();
    for (k, s) in numbered.iter_mut().enumerate() {
        s.id = (k + 10).to_string();
        s.features = None;
    }
    let ann = tmp.path().join("a.json");
    save_annotations(&numbered, &ann).unwrap();
    let back = load_annotations(&ann).unwrap();
    assert_eq!(back.len(), numbered.len());
    for (a, b) in back.iter().zip(&numbered) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.gts.len(), b.gts.len());
        for (u, v) in a.gts.iter().zip(&b.gts) {
            assert!(boxreg::iou(u, v) > 1.0 - 1e-12);
        }
    }
}

#[test]
fn model_container_roundtrip_and_rejects_garbage() {
    let tmp = tempfile::tempdir().unwrap();
    let model = RegressorModel::init_gaussian(7, 3, &[12, 9], 0.1, &mut worker_rng(2, 0)).unwrap();
    let path = tmp.path().join("m.ubbr");
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_model(&path).is_err());
    std::fs::write(&path, b"not a model").unwrap();
    assert!(load_model(&path).is_err());
}

#[test]
fn short_training_improves_held_out_boxes_and_proposals() {
    let scenes = small_synth(8, 30);
    let (fit, held) = scenes.split_at(24);
    let cfg = TrainConfig {
        max_epochs: 10,
        hidden: vec![64, 64],
        seed: 8,
        ..Default::default()
    };
    let out = train(fit, &cfg, &SamplerConfig::default(), &LossConfig::default()).unwrap();
    assert!(!out.diverged());

    let mut rng = worker_rng(9, 0);
    let (mut before, mut after) = (0.0, 0.0);
    for s in held {
        let inputs: Vec<_> = s
            .gts
            .iter()
            .flat_map(|g| generate_training_boxes(g, &SamplerConfig::default(), &mut rng).unwrap().boxes)
            .collect();
        let traj = refine(&out.model, s, &inputs, 1).unwrap();
        before += mean_iou(&inputs, &s.gts).unwrap();
        after += mean_iou(&traj[0], &s.gts).unwrap();
    }
    assert!(after > before + 0.05 * held.len() as f64, "before {before}, after {after}");

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.csv");
    let groups: Vec<ImageRecords<_>> = held
        .iter()
        .map(|s| ImageRecords {
            image_id: s.id.clone(),
            items: generate_proposals(&out.model, s, &ProposalConfig::default()).unwrap(),
        })
        .collect();
    write_proposals(&path, &groups).unwrap();
    let back = read_proposals(&path).unwrap();
    let records: Vec<EvalRecord> = back
        .iter()
        .zip(held)
        .map(|(g, s)| EvalRecord {
            image_id: g.image_id.clone(),
            proposals: g.items.iter().map(|p| p.bbox).collect(),
            gts: s.gts.clone(),
        })
        .collect();
    assert!(recall_at(&records, 0.5, 100) > 0.5);
    assert!(recall_at(&records, 0.5, 1000) >= recall_at(&records, 0.5, 100));
}
