use mmtsvit::data::{CoRegisteredSet, SynthConfig, SyntheticGenerator};
use mmtsvit::model::{FusionMode, Model, ModelConfig, TsvitConfig};
use mmtsvit::train::{
    evaluate, examples_for, load_checkpoint, save_checkpoint, train, AdamConfig, Example, TrainConfig, Trainer,
};

fn scenes(n: usize, seed: u64) -> Vec<CoRegisteredSet<f64>> {
    let mut config = SynthConfig::preset(2, 3, 12, n, seed).unwrap();
    config.n_timesteps = 6;
    let generator = SyntheticGenerator::new(config).unwrap();
    let manifest = generator.manifest(vec![String::new(); n]);
    (0..n).map(|i| manifest.prepare(&generator.scene(i).unwrap()).unwrap()).collect()
}

fn model(mode: FusionMode, seed: u64) -> Model<f64> {
    let config = ModelConfig {
        mode,
        tsvit: TsvitConfig {
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            dim: 16,
            heads: 2,
            mlp_ratio: 2,
            temporal_depth: 1,
            spatial_depth: 1,
            num_classes: 3,
            height: 12,
            width: 12,
        },
        modalities: vec!["s2".into(), "pf".into()],
        channels: vec![10, 4],
    };
    Model::new(config, seed).unwrap()
}

fn config(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        optim: AdamConfig { lr, ..AdamConfig::default() },
        seed: 3,
        augment: true,
        ignore_background: false,
    }
}

fn examples(m: &Model<f64>) -> Vec<Example<f64>> {
    examples_for(m, &scenes(6, 1)).unwrap()
}

#[test]
fn equal_seeds_give_identical_runs() {
    let m = model(FusionMode::CrossAttention, 2);
    let ex = examples(&m);
    let a = train(m.clone(), &ex[..4], &ex[4..], config(1e-3, 2), |_| Ok(())).unwrap();
    let b = train(m, &ex[..4], &ex[4..], config(1e-3, 2), |_| Ok(())).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.last.store.named_tensors(), b.last.store.named_tensors());
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let m = model(FusionMode::SyncClassToken, 4);
    let ex = examples(&m);
    let out = train(m.clone(), &ex, &[], config(0.0, 1), |_| Ok(())).unwrap();
    assert_eq!(out.last.store.named_tensors(), m.store.named_tensors());
}

#[test]
fn one_epoch_lowers_the_loss() {
    for mode in [FusionMode::Early, FusionMode::SyncClassToken, FusionMode::CrossAttention] {
        let m = model(mode, 5);
        let ex = examples(&m);
        let mut trainer = Trainer::new(m, config(1e-3, 1)).unwrap();
        let before = trainer.mean_loss(&ex).unwrap();
        trainer.run_epoch(&ex).unwrap();
        let after = trainer.mean_loss(&ex).unwrap();
        assert!(after < before, "{mode}: {before} → {after}");
    }
}

#[test]
fn logged_validation_matches_reloaded_checkpoint() {
    let m = model(FusionMode::SyncClassToken, 6);
    let ex = examples(&m);
    let mut logged = Vec::new();
    let out = train(m, &ex[..4], &ex[4..], config(1e-3, 3), |r| {
        logged.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(logged, out.records);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.tsvc");
    save_checkpoint(&out.last, &path).unwrap();
    let back: Model<f64> = load_checkpoint(&path).unwrap();
    let m = evaluate(&back, &ex[4..]).unwrap();
    let last = out.records.last().unwrap();
    assert_eq!((m.ma, m.oa, m.miou), (last.val_ma, last.val_oa, last.val_miou));
    let best = &out.records[out.best_epoch - 1];
    assert!(out.records.iter().all(|r| r.val_ma <= best.val_ma));
}

#[test]
fn empty_training_split_is_a_contract_error() {
    let m = model(FusionMode::Early, 0);
    assert!(train(m, &[], &[], config(1e-3, 1), |_| Ok(())).is_err());
}
