use partsmith_core::composition::{generate, prompt_text, sample_composition_suite, SamplerOptions, SuiteItem};
use partsmith_core::denoiser::{Capabilities, DenoiserBackend, NoisePrediction, ToyDenoiser};
use partsmith_core::discovery::PromptCode;
use partsmith_core::evaluation::{aggregate, emr_cosim, eval_suite, predict_code, EvalResult};
use partsmith_core::experiment::probe_attention;
use partsmith_core::feature_io::RgbImage;
use partsmith_core::tensor::Tensor;
use partsmith_core::token_space::PromptEmbedding;
use partsmith_core::toy_task::{render, CreatureSpec, ToyTask, ToyTaskConfig};
use partsmith_core::training::{ModelSpec, TrainConfig, TrainedModel, Trainer};
use partsmith_core::{Error, Result};

fn task() -> ToyTask {
    ToyTask::build(ToyTaskConfig::default()).unwrap()
}

#[test]
fn tagging_a_training_image_reproduces_its_code() {
    let task = task();
    for (img, code) in task.images.iter().zip(&task.codes) {
        assert_eq!(&predict_code(img, &task.dictionary, &task.extractor).unwrap(), code);
    }
}

#[test]
fn rendered_hybrids_are_tagged_with_the_composed_code() {
    let task = task();
    // The head channel is the one with the smaller mask.
    let sizes: Vec<usize> = task.masks[0].masks.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    let head = if sizes[1] < sizes[2] { 1 } else { 2 };
    let body = 3 - head;
    let find = |f: &dyn Fn(&CreatureSpec) -> bool| task.specs.iter().position(f).unwrap();
    for background in 0..2 {
        for h in 0..2 {
            for b in 0..2 {
                let spec = CreatureSpec {
                    background,
                    head: h,
                    body: b,
                    dx: 0,
                    dy: 0,
                };
                let mut want = vec![None; 3];
                want[0] = task.codes[find(&|s| s.background == background)].split(0);
                want[head] = task.codes[find(&|s| s.head == h)].split(head);
                want[body] = task.codes[find(&|s| s.body == b)].split(body);
                let got = predict_code(&render(&spec, task.config.size), &task.dictionary, &task.extractor).unwrap();
                assert_eq!(got, PromptCode::new(want).unwrap(), "{spec:?}");
            }
        }
    }
}

fn train(task: &ToyTask, steps: u64) -> (Trainer<f32>, TrainedModel<f32>, f64, f64) {
    let cfg = TrainConfig {
        max_steps: Some(steps),
        ..TrainConfig::toy()
    };
    let toy = Default::default();
    let spec = ModelSpec::new(toy, task.dictionary.channels(), task.dictionary.splits, &cfg);
    let trainer = Trainer::<f32>::new(spec, cfg, task.samples(toy.grid).unwrap()).unwrap();
    let mut state = trainer.init_state();
    trainer.run(&mut state, |_, _| Ok(())).unwrap();
    let first = state.history.first().map_or(f64::NAN, |(_, r)| r.l_total);
    let last = state.loss_ema.unwrap_or(f64::NAN);
    let model = trainer.model(&state);
    (trainer, model, first, last)
}

fn render_code(model: &TrainedModel<f32>, task: &ToyTask, code: &PromptCode, seed: u64) -> Result<RgbImage> {
    let prompt = model.embed(code, None)?;
    let words = prompt_text(&model.spec.template, code, None);
    let opts = SamplerOptions { steps: 50, seed };
    Ok(generate(&model.backend, &prompt, words, &task.autoencoder(), &opts)?.image)
}

fn reconstruction(model: &TrainedModel<f32>, task: &ToyTask) -> EvalResult {
    let results: Vec<EvalResult> = task
        .codes
        .iter()
        .enumerate()
        .map(|(i, code)| {
            let img = render_code(model, task, code, i as u64).unwrap();
            emr_cosim(code, &predict_code(&img, &task.dictionary, &task.extractor).unwrap(), &task.dictionary).unwrap()
        })
        .collect();
    aggregate(&results).unwrap()
}

#[test]
fn training_lowers_the_loss_and_raises_exact_match() {
    let task = task();
    let (_, untrained, _, _) = train(&task, 0);
    let (_, trained, first, last) = train(&task, 500);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    let before = reconstruction(&untrained, &task);
    let after = reconstruction(&trained, &task);
    assert!(after.emr > before.emr, "EMR {} -> {}", before.emr, after.emr);
    assert!(after.cosim > before.cosim);
}

#[test]
fn generation_is_deterministic_and_shaped() {
    let task = task();
    let (_, model, _, _) = train(&task, 20);
    let prompt = model.embed(&task.codes[0], None).unwrap();
    let opts = SamplerOptions { steps: 10, seed: 42 };
    let words = prompt_text(&model.spec.template, &task.codes[0], Some("watercolor"));
    let a = generate(&model.backend, &prompt, words.clone(), &task.autoencoder(), &opts).unwrap();
    let b = generate(&model.backend, &prompt, words.clone(), &task.autoencoder(), &opts).unwrap();
    assert_eq!(a, b);
    assert!(a.prompt.ends_with("watercolor"));
    assert_eq!(a.latent.shape(), model.backend.capabilities().latent_shape());
    assert_eq!((a.image.width, a.image.height), (task.config.size, task.config.size));
    let c = generate(&model.backend, &prompt, words, &task.autoencoder(), &SamplerOptions { steps: 10, seed: 43 }).unwrap();
    assert_ne!(a.latent, c.latent);
}

#[test]
fn suite_evaluation_buckets_by_source_count_and_records_failures() {
    let task = task();
    let labelled: Vec<(String, PromptCode)> = task.ids.iter().cloned().zip(task.codes.iter().cloned()).collect();
    let mut items: Vec<SuiteItem> = Vec::new();
    for sources in 1..=4 {
        items.extend(sample_composition_suite(&labelled, 5, 4, sources, sources as u64).unwrap().items);
    }
    // Render each hybrid by copying the training image whose code it is, or
    // fail as an unreachable backend would.
    let report = eval_suite(&items, &task.dictionary, &task.extractor, |i, item| {
        if i % 7 == 3 {
            return Err(Error::BackendUnavailable("backend went away".into()));
        }
        let j = task.codes.iter().position(|c| *c == item.code).unwrap_or(0);
        Ok(task.images[j].clone())
    })
    .unwrap();
    assert_eq!(report.per_sources.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    let failed = (0..items.len()).filter(|i| i % 7 == 3).count();
    assert_eq!(report.failures.len(), failed);
    let scored: usize = report.per_sources.values().map(|r| r.n_samples).sum();
    assert_eq!(scored + failed, items.len());
    // Single-source items are training codes and are tagged exactly.
    assert_eq!(report.per_sources[&1].emr, 1.0);
    assert!(report.fid.value().is_none());
}

#[test]
fn suite_evaluation_aborts_on_non_dependency_errors() {
    let task = task();
    let labelled: Vec<(String, PromptCode)> = task.ids.iter().cloned().zip(task.codes.iter().cloned()).collect();
    let items = sample_composition_suite(&labelled, 3, 4, 2, 0).unwrap().items;
    let err = eval_suite(&items, &task.dictionary, &task.extractor, |_, _| Err(Error::Validation("bad".into())));
    assert!(matches!(err, Err(Error::Validation(_))));
    assert!(eval_suite(&[], &task.dictionary, &task.extractor, |_, _| unreachable!()).is_err());
}

/// A backend that hides its attention.
struct NoTaps(ToyDenoiser<f32>);

impl DenoiserBackend<f32> for NoTaps {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            taps: Vec::new(),
            ..self.0.capabilities()
        }
    }

    fn predict_noise(&self, z_t: &Tensor<f32>, t: usize, prompt: &PromptEmbedding<f32>) -> Result<NoisePrediction<f32>> {
        let mut out = self.0.predict_noise(z_t, t, prompt)?;
        out.attention = None;
        Ok(out)
    }
}

#[test]
fn probing_a_backend_without_taps_is_unsupported() {
    let task = task();
    let (trainer, model, _, _) = train(&task, 1);
    let sample = &trainer.samples()[0];
    let noise = Tensor::zeros(sample.latent.rows(), sample.latent.cols());
    let ok = probe_attention(&model.backend, &model, &sample.code, &sample.latent, 100, &noise).unwrap();
    assert_eq!(ok.channels, task.dictionary.channels());
    let hidden = NoTaps(model.backend.clone());
    let err = probe_attention(&hidden, &model, &sample.code, &sample.latent, 100, &noise);
    assert!(matches!(err, Err(Error::Unsupported(_))));
}
