use dfa_core::data::{synth_dataset, SynthConfig, SynthDataset};
use dfa_core::train::{train, Checkpoint, TrainConfig};
use dfa_core::ModelConfig;

fn small() -> (ModelConfig, TrainConfig, SynthDataset) {
    let synth = SynthConfig {
        num_train: 4,
        num_test: 2,
        length: 64,
        channels: 8,
        max_instance: 24,
        max_instances: 2,
        ..Default::default()
    };
    let mut model = ModelConfig::default();
    model.encoder.c_feat = 8;
    model.encoder.width = 8;
    model.encoder.num_down = 3;
    model.head.width = 8;
    model.head.depth = 1;
    let cfg = TrainConfig { epochs: 4, warmup_epochs: 1, batch_size: 2, ..Default::default() };
    (model, cfg, synth_dataset(&synth).unwrap())
}

#[test]
fn training_is_deterministic() {
    let (model, cfg, set) = small();
    let mut epochs = 0;
    let a = train(&model, &cfg, &set.train, |_| epochs += 1).unwrap();
    let b = train(&model, &cfg, &set.train, |_| {}).unwrap();
    assert_eq!(epochs, 4);
    assert_eq!(a, b);
    assert!(a.log.iter().all(|e| e.loss.is_finite()));
    let c = train(&model, &TrainConfig { seed: 1, ..cfg }, &set.train, |_| {}).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let (model, cfg, set) = small();
    let ckpt = train(&model, &cfg, &set.train, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for ((_, a), (_, b)) in ckpt.params.iter().zip(back.params.iter()) {
        let bits = |t: &dfa_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    assert_eq!(ckpt, back);
    assert_eq!(ckpt.infer(&set.test).unwrap(), back.infer(&set.test).unwrap());
}

#[test]
fn ema_lags_raw_parameters() {
    let (model, cfg, set) = small();
    let ckpt = train(&model, &cfg, &set.train, |_| {}).unwrap();
    let (init, _) = dfa_core::Model::new(&model, cfg.seed).unwrap();
    assert_eq!(init, ckpt.model);
    // with decay 0.999 and a handful of steps the average stays near the start
    let (_, start) = dfa_core::Model::new(&model, cfg.seed).unwrap();
    let dist = |a: &dfa_core::ParamStore, b: &dfa_core::ParamStore| {
        a.iter().zip(b.iter()).map(|((_, x), (_, y))| x.value.max_abs_diff(&y.value)).fold(0.0, f64::max)
    };
    assert!(dist(&ckpt.ema, &start) < dist(&ckpt.params, &start));
}

#[test]
fn empty_training_set_rejected() {
    let (model, cfg, _) = small();
    assert!(train(&model, &cfg, &[], |_| {}).is_err());
}
