use nl3d::data::{synth_dataset, AugmentStrategy, SynthParams};
use nl3d::model::{build_model, ModelConfig};
use nl3d::train::{evaluate, train, Dataset, TrainConfig};

fn small_data() -> Dataset {
    let (samples, _) = synth_dataset(&SynthParams {
        n_videos: 4,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    Dataset::from_synth(&samples)
}

#[test]
fn saved_weights_reproduce_predictions() {
    let data = small_data();
    let cfg = ModelConfig {
        base_width: 2,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        base_lr: 1e-3,
        batch_size: 2,
        max_epochs: Some(2),
        augmentation: AugmentStrategy::None,
        ..Default::default()
    };
    let trained = train(build_model(&cfg, 3).unwrap(), &data, None, &train_cfg).unwrap();
    assert_eq!(trained.history.len(), 2);
    assert!(trained.history.iter().all(|r| r.train_loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.nlw");
    trained.model.save_weights(&path).unwrap();
    let mut reloaded = build_model(&cfg, 99).unwrap();
    reloaded.load_weights(&path).unwrap();

    let a = evaluate(&trained.model, &data, &train_cfg.loss, 2).unwrap();
    let b = evaluate(&reloaded, &data, &train_cfg.loss, 2).unwrap();
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.accuracy, b.accuracy);
    assert_eq!(a.scores.len(), data.len());
    assert!(a.scores.iter().all(|s| (0.0..=1.0).contains(s)));
}

#[test]
fn weights_from_another_width_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.nlw");
    let narrow = build_model(&ModelConfig { base_width: 2, ..Default::default() }, 0).unwrap();
    narrow.save_weights(&path).unwrap();
    let mut wide = build_model(&ModelConfig { base_width: 4, ..Default::default() }, 0).unwrap();
    assert!(wide.load_weights(&path).is_err());
}
