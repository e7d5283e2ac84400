use mhnet::degradation::{self, DegradeSpec, Degradation};
use mhnet::io::{load_checkpoint, restore_image, Image};
use mhnet::model::{Model, ModelConfig};
use mhnet::trainer::{train, CheckpointPlan, Corpus, Pair, TrainConfig};
use mhnet::{Error, Shape, Tensor};

fn scene(h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| ((x * (c + 1) + 3 * y) % 29) as f32 / 28.0)
}

#[test]
fn degrade_train_save_restore() {
    let dir = tempfile::tempdir().unwrap();
    let clean = scene(32, 48);
    let spec = DegradeSpec { kind: Degradation::Noise(0.05), seed: 9 };
    let degraded = degradation::apply(&spec, &clean).unwrap();
    let corpus = Corpus::new(vec![Pair { degraded: degraded.clone(), clean }], 16).unwrap();
    let cfg = TrainConfig { iterations: 6, batch: 2, patch: 16, checkpoint_every: 3, ..TrainConfig::default() };
    let path = dir.path().join("run.mhnt");
    let mut model = Model::new(&ModelConfig::tiny(8), 2).unwrap();
    let trace = train(&mut model, &cfg, &corpus, Some(CheckpointPlan { path: &path, every: 3 }), |_| {}).unwrap();
    assert_eq!(trace.len(), 6);
    assert!(trace.iter().all(|r| r.loss.is_finite() && r.lr > 0.0));

    let loaded = load_checkpoint(&path, Some(&ModelConfig::tiny(8))).unwrap();
    let img = Image::from_tensor(&degraded.crop(0, 0, 27, 41).unwrap()).unwrap();
    let a = restore_image(&model, &img).unwrap();
    assert_eq!((a.width, a.height), (41, 27));
    assert_eq!(a, restore_image(&loaded, &img).unwrap());

    let wider = ModelConfig::tiny(16);
    match load_checkpoint(&path, Some(&wider)) {
        Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "config"),
        other => panic!("expected config mismatch, got {other:?}"),
    }
}
