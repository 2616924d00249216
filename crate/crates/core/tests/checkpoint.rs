use partsmith_core::checkpoint;
use partsmith_core::denoiser::ToyConfig;
use partsmith_core::toy_task::{ToyTask, ToyTaskConfig};
use partsmith_core::training::{ModelSpec, TrainConfig, Trainer};
use partsmith_core::Error;

fn trainer(steps: u64) -> Trainer<f32> {
    let task = ToyTask::build(ToyTaskConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(steps),
        batch_size: 2,
        ..TrainConfig::toy()
    };
    let toy = ToyConfig::default();
    let spec = ModelSpec::new(toy, task.dictionary.channels(), task.dictionary.splits, &cfg);
    Trainer::new(spec, cfg, task.samples(toy.grid).unwrap()).unwrap()
}

fn bits(state: &partsmith_core::training::TrainState<f32>) -> Vec<(String, Vec<u32>)> {
    state
        .named_parameters()
        .into_iter()
        .map(|(n, t)| (n, t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run_bitwise() {
    let full = trainer(12);
    let mut a = full.init_state();
    full.run(&mut a, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = trainer(5);
    let mut b = first.init_state();
    first.run(&mut b, |_, _| Ok(())).unwrap();
    let sum = checkpoint::save(dir.path(), &first, &b, Some("dict")).unwrap();

    let mut c = checkpoint::resume(dir.path(), &full).unwrap();
    assert_eq!(c.step, 5);
    assert_eq!(c.lineage, vec![sum]);
    full.run(&mut c, |_, _| Ok(())).unwrap();

    assert_eq!(bits(&a), bits(&c));
    assert_eq!(a.rng, c.rng);
    assert_eq!(a.optimizer, c.optimizer);
    assert_eq!(a.history, c.history);
    assert_eq!(a.loss_ema, c.loss_ema);
}

#[test]
fn round_trip_restores_parameters_and_rng() {
    let tr = trainer(3);
    let mut s = tr.init_state();
    tr.run(&mut s, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &tr, &s, None).unwrap();
    let back = checkpoint::resume(dir.path(), &tr).unwrap();
    assert_eq!(bits(&s), bits(&back));
    assert_eq!(s.rng, back.rng);
    let (model, header, _) = checkpoint::load_model::<f32>(dir.path()).unwrap();
    assert_eq!(header.step, 3);
    assert_eq!(model, tr.model(&s));
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let tr = trainer(2);
    let mut s = tr.init_state();
    tr.run(&mut s, |_, _| Ok(())).unwrap();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = checkpoint::save(d1.path(), &tr, &s, None).unwrap();
    let b = checkpoint::save(d2.path(), &tr, &s, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tampered_payload_is_detected() {
    let tr = trainer(1);
    let mut s = tr.init_state();
    tr.run(&mut s, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &tr, &s, None).unwrap();
    let p = dir.path().join(checkpoint::PARAMS_FILE);
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(checkpoint::load::<f32>(dir.path()), Err(Error::Corruption(_))));
}
