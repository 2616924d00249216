use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args};
use partsmith_core::checkpoint::{self, CheckpointHeader};
use partsmith_core::composition::{
    compose as compose_codes, generate as render, prompt_text, sample_composition_suite, CompositionSuite, DonorRecord,
    SamplerOptions, MAX_SOURCES,
};
use partsmith_core::denoiser::PatchAutoencoder;
use partsmith_core::discovery::{downsample_masks, fit_hierarchy, tag_image, PromptCode, SubConceptDictionary};
use partsmith_core::evaluation::{dump_attention, eval_suite, SuiteReport};
use partsmith_core::experiment::{lambda_sweep, probe_attention, SweepRow, ToyRunReport, DEFAULT_LAMBDAS};
use partsmith_core::feature_io::{
    write_feature_map, ExtractorAdapter, FeatureCorpus, ManifestRecord, RgbImage, StubExtractor,
};
use partsmith_core::losses::AttnLossKind;
use partsmith_core::manifest::RunManifest;
use partsmith_core::psfm::{self, Block};
use partsmith_core::tensor::Tensor;
use partsmith_core::toy_task::{corpus_specs, render as render_creature};
use partsmith_core::training::{ModelSpec, TrainSample, Trainer};
use partsmith_core::{Error, Real, RealModel, Result};
use partsmith_service::{AppState, Artifacts};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{self, Choice};
use crate::config::{FileConfig, Recipe};

/// Codes of the images a dictionary was fitted on, written by `discover`.
pub const CODES_FILE: &str = "codes.json";

fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_png(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::from_png(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// extract

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["images", "toy"])))]
pub struct ExtractArgs {
    /// Directory of PNG images; the file stem is the image id.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Render the synthetic creature corpus into OUT/images first.
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    dataset: Option<String>,
}

pub fn extract(file: &FileConfig, args: ExtractArgs) -> Result<()> {
    let mut cfg = file.extract()?;
    let toy = file.toy_task()?;
    if args.toy {
        // The synthetic corpus brings its own extractor settings unless the
        // file or the flags say otherwise.
        let base = crate::config::ExtractConfig {
            patch: toy.patch,
            dim: toy.feature_dim,
            seed: toy.extractor_seed,
            bandwidth: toy.bandwidth,
            dataset_name: "toy-creatures".into(),
        };
        cfg = file.section("extract", base)?;
    }
    cfg.patch = args.patch.unwrap_or(cfg.patch);
    cfg.dim = args.dim.unwrap_or(cfg.dim);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.bandwidth = args.bandwidth.unwrap_or(cfg.bandwidth);
    if let Some(name) = args.dataset {
        cfg.dataset_name = name;
    }
    let extractor = StubExtractor::new(cfg.patch, cfg.dim, cfg.seed, cfg.bandwidth)?;
    create_dir(&args.out)?;

    // (image id, decoded image, source path as recorded)
    let mut images: Vec<(String, RgbImage, String)> = Vec::new();
    if args.toy {
        let dir = args.out.join("images");
        create_dir(&dir)?;
        for (i, spec) in corpus_specs(&toy).iter().enumerate() {
            let id = format!("creature_{i:02}");
            let img = render_creature(spec, toy.size);
            write_file(&dir.join(format!("{id}.png")), &img.to_png()?)?;
            images.push((id.clone(), img, format!("images/{id}.png")));
        }
    } else {
        let dir = args.images.as_deref().expect("clap requires a source");
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(validation(format!("no PNG images in {}", dir.display())));
        }
        for p in paths {
            let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let img = read_png(&p)?;
            let source = fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
            images.push((id, img, source.display().to_string()));
        }
    }

    let mut records = Vec::with_capacity(images.len());
    for (id, img, source) in &images {
        let fm = extractor.extract(id, img)?;
        let name = format!("{id}.psfm");
        write_feature_map(&args.out.join(&name), &fm)?;
        records.push(ManifestRecord {
            image_id: id.clone(),
            path: name,
            grid_h: fm.grid_h,
            grid_w: fm.grid_w,
            dim: fm.dim,
            source: Some(source.clone()),
        });
    }
    let corpus = FeatureCorpus {
        dataset_name: cfg.dataset_name.clone(),
        extractor: Some(extractor.info()),
        records,
        root: args.out.clone(),
    };
    corpus.save(&args.out)?;

    let mut run = RunManifest::new("extract").seed("extractor", cfg.seed).config(&cfg)?;
    if let Some(dir) = &args.images {
        run.input(dir)?;
    }
    run.write(&args.out)?;
    println!("extracted {} feature maps into {}", images.len(), args.out.display());
    Ok(())
}

// discover

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    /// Feature directory written by `extract`.
    #[arg(long)]
    features: PathBuf,
    /// Number of foreground parts.
    #[arg(long = "M", value_name = "M")]
    parts: Option<usize>,
    /// Sub-concepts per channel.
    #[arg(long = "K", value_name = "K")]
    splits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// k-means restarts per fit.
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

pub fn discover(file: &FileConfig, args: DiscoverArgs) -> Result<()> {
    let mut cfg = file.discover()?;
    cfg.parts = args.parts.unwrap_or(cfg.parts);
    cfg.splits = args.splits.unwrap_or(cfg.splits);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.kmeans.n_init = args.n_init.unwrap_or(cfg.kmeans.n_init);

    let corpus = FeatureCorpus::load(&args.features)?;
    let maps = corpus.load_maps()?;
    let mut dict = fit_hierarchy(&maps, &corpus.dataset_name, cfg.parts, cfg.splits, cfg.seed, &cfg.kmeans)?;
    dict.metadata.extractor = corpus.extractor.clone();
    dict.save(&args.out)?;

    let mut codes = BTreeMap::new();
    for fm in &maps {
        codes.insert(fm.image_id.clone(), tag_image(fm, &dict)?.0);
    }
    write_json(&args.out.join(CODES_FILE), &codes)?;

    let mut run = RunManifest::new("discover").seed("discover", cfg.seed).config(&cfg)?;
    run.input(&args.features)?;
    run.write(&args.out)?;
    println!(
        "dictionary {} channels x {} splits, checksum {}",
        dict.channels(),
        dict.splits,
        dict.checksum()
    );
    Ok(())
}

fn load_codes(dict_dir: &Path) -> Result<BTreeMap<String, PromptCode>> {
    read_json(&dict_dir.join(CODES_FILE))
}

// train

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// `toy` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Base settings before the `[train]` table and flags apply.
    #[arg(long, value_enum)]
    recipe: Option<Recipe>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_attn: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Train raw token rows without the projector.
    #[arg(long)]
    no_projector: bool,
    /// Attention loss; `mse` is an ablation.
    #[arg(long, value_parser = ["bce", "mse"])]
    attn_loss: Option<String>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

pub fn train(file: &FileConfig, args: TrainArgs) -> Result<()> {
    let mut cfg = file.train(args.recipe)?;
    if args.steps.is_some() {
        cfg.max_steps = args.steps;
    }
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.lambda_attn = args.lambda_attn.unwrap_or(cfg.lambda_attn);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.no_projector |= args.no_projector;
    if let Some(kind) = &args.attn_loss {
        cfg.attn_loss = if kind == "mse" { AttnLossKind::Mse } else { AttnLossKind::Bce };
    }
    cfg.validate()?;
    let denoiser = file.denoiser()?;
    let choice = backend::resolve(args.backend.as_deref(), &file.backend()?)?;
    if let Choice::Remote { .. } = choice {
        return Err(Error::Unsupported(format!(
            "{} serves inference only; training needs the local toy denoiser",
            choice.name()
        )));
    }

    let dict = SubConceptDictionary::load(&args.dict)?;
    let corpus = FeatureCorpus::load(&args.features)?;
    let maps = corpus.load_maps()?;
    let (gh, gw) = denoiser.grid;
    if gw == 0 || cfg.image_size % gw != 0 || cfg.image_size % gh.max(1) != 0 || cfg.image_size / gw != cfg.image_size / gh {
        return Err(validation(format!(
            "image size {} does not tile into the {gh}x{gw} latent grid",
            cfg.image_size
        )));
    }
    let ae = PatchAutoencoder::new(cfg.image_size / gw);
    let mut samples = Vec::with_capacity(maps.len());
    for (fm, record) in maps.iter().zip(&corpus.records) {
        let source = record
            .source
            .as_deref()
            .ok_or_else(|| validation(format!("feature record {:?} names no source image", record.image_id)))?;
        let img = read_png(&corpus.resolve(source))?;
        if (img.width, img.height) != (cfg.image_size, cfg.image_size) {
            return Err(validation(format!(
                "{source} is {}x{}, training expects {} px square images",
                img.width, img.height, cfg.image_size
            )));
        }
        let (code, masks) = tag_image(fm, &dict)?;
        samples.push(TrainSample::<Real> {
            image_id: fm.image_id.clone(),
            latent: ae.encode(&img)?,
            latent_grid: denoiser.grid,
            code,
            masks: downsample_masks(&masks, denoiser.grid)?,
        });
    }

    let spec = ModelSpec::new(denoiser, dict.channels(), dict.splits, &cfg);
    let trainer = Trainer::<Real>::new(spec, cfg.clone(), samples)?;
    let mut state = match &args.resume {
        Some(dir) => checkpoint::resume(dir, &trainer)?,
        None => trainer.init_state(),
    };
    let dict_checksum = dict.checksum();
    let total = trainer.total_steps();
    trainer.run(&mut state, |s, report| {
        if cfg.log_every > 0 && s.step % cfg.log_every == 0 {
            eprintln!(
                "step {}/{total}  loss {:.5}  ldm {:.5}  attn {:.5}",
                s.step, report.l_total, report.l_ldm, report.l_attn
            );
        }
        if cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0 && s.step < total {
            checkpoint::save(&args.out, &trainer, s, Some(&dict_checksum))?;
        }
        Ok(())
    })?;
    let checksum = checkpoint::save(&args.out, &trainer, &state, Some(&dict_checksum))?;

    #[derive(Serialize)]
    struct Effective<'a> {
        train: &'a partsmith_core::training::TrainConfig,
        denoiser: &'a partsmith_core::denoiser::ToyConfig,
        backend: String,
    }
    let mut run = RunManifest::new("train").seed("train", cfg.seed).config(&Effective {
        train: &cfg,
        denoiser: &denoiser,
        backend: choice.name(),
    })?;
    run.input(&args.features)?;
    run.input(&args.dict)?;
    if let Some(dir) = &args.resume {
        run.input(dir)?;
    }
    run.write(&args.out)?;
    println!(
        "trained {} steps, final loss {:.5}, checkpoint {checksum}",
        state.step,
        state.loss_ema.unwrap_or(f64::NAN)
    );
    Ok(())
}

// compose

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").required(true).args(["base", "base_code", "suite"])))]
pub struct ComposeArgs {
    /// Dictionary directory; image ids resolve through its code table.
    #[arg(long)]
    dict: PathBuf,
    /// Image id whose code is the base.
    #[arg(long)]
    base: Option<String>,
    /// Base code written as pairs, e.g. "(0,4) (1,2)".
    #[arg(long)]
    base_code: Option<String>,
    /// `ID:CHANNEL`: take CHANNEL's sub-concept from image ID.
    #[arg(long, value_name = "ID:CHANNEL")]
    donor: Vec<String>,
    /// Sample a suite of this many hybrids instead.
    #[arg(long, conflicts_with_all = ["base", "base_code", "donor"])]
    suite: Option<usize>,
    /// Source concepts per suite item, base included.
    #[arg(long, default_value_t = 2, requires = "suite")]
    sources: usize,
    /// Size of each of the disjoint base and donor pools.
    #[arg(long, requires = "suite")]
    pool: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// What `compose` writes for a single hybrid; `generate` reads `code`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeFile {
    pub code: PromptCode,
    pub text: String,
    #[serde(default)]
    pub base_id: Option<String>,
    #[serde(default)]
    pub donors: Vec<DonorRecord>,
}

fn parse_donor(text: &str) -> Result<(String, usize)> {
    let (id, ch) = text
        .rsplit_once(':')
        .ok_or_else(|| validation(format!("donor {text:?} is not ID:CHANNEL")))?;
    let ch = ch
        .parse()
        .map_err(|_| validation(format!("donor {text:?} has a non-numeric channel")))?;
    Ok((id.to_string(), ch))
}

pub fn compose(args: ComposeArgs) -> Result<()> {
    let dict = SubConceptDictionary::load(&args.dict)?;
    let mut run = RunManifest::new("compose").seed("compose", args.seed);
    run.input(&args.dict)?;
    if let Some(n) = args.suite {
        if !(1..=MAX_SOURCES).contains(&args.sources) {
            return Err(validation(format!("--sources must be in 1..={MAX_SOURCES}")));
        }
        let labelled: Vec<(String, PromptCode)> = load_codes(&args.dict)?.into_iter().collect();
        let pool = args.pool.unwrap_or(labelled.len() / 2);
        let suite = sample_composition_suite(&labelled, n, pool, args.sources, args.seed)?;
        write_json(&args.out, &suite)?;
        run.config(&serde_json::json!({"suite": n, "sources": args.sources, "pool": pool}))?
            .write_sidecar(&args.out)?;
        println!("wrote {n} hybrids from {} sources each to {}", args.sources, args.out.display());
        return Ok(());
    }

    let needs_table = args.base.is_some() || !args.donor.is_empty();
    let codes = if needs_table { load_codes(&args.dict)? } else { BTreeMap::new() };
    let lookup = |id: &str| {
        codes
            .get(id)
            .cloned()
            .ok_or_else(|| validation(format!("unknown image id {id:?}")))
    };
    let base = match (&args.base, &args.base_code) {
        (Some(id), None) => lookup(id)?,
        (None, Some(text)) => PromptCode::parse(dict.channels(), text)?,
        _ => return Err(validation("give exactly one of --base and --base-code")),
    };
    base.check_against(dict.channels(), dict.splits)?;
    let mut donors = Vec::new();
    for d in &args.donor {
        let (id, channel) = parse_donor(d)?;
        donors.push(DonorRecord {
            code: lookup(&id)?,
            image_id: id,
            channel,
        });
    }
    let pairs: Vec<(PromptCode, usize)> = donors.iter().map(|d| (d.code.clone(), d.channel)).collect();
    let code = compose_codes(&base, &pairs)?;
    let out = CodeFile {
        text: code.to_string(),
        code,
        base_id: args.base.clone(),
        donors,
    };
    write_json(&args.out, &out)?;
    run.config(&serde_json::json!({"base": args.base, "base_code": args.base_code, "donors": args.donor}))?
        .write_sidecar(&args.out)?;
    println!("{}", out.text);
    Ok(())
}

/// A code from a `compose` output or a bare code object.
fn read_code(path: &Path) -> Result<PromptCode> {
    let value: serde_json::Value = read_json(path)?;
    let code = value.get("code").cloned().unwrap_or(value);
    serde_json::from_value(code).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

// models

struct Loaded {
    model: RealModel,
    header: CheckpointHeader,
    checksum: String,
    autoencoder: PatchAutoencoder,
}

fn load_checkpoint(dir: &Path) -> Result<Loaded> {
    let (model, header, checksum) = checkpoint::load_model::<Real>(dir)?;
    let grid = header.spec.denoiser.grid;
    let patch = header.config.image_size / grid.1.max(1);
    if patch == 0 {
        return Err(validation("checkpoint image size is smaller than its latent grid"));
    }
    Ok(Loaded {
        model,
        header,
        checksum,
        autoencoder: PatchAutoencoder::new(patch),
    })
}

fn check_dictionary(loaded: &Loaded, dict: &SubConceptDictionary) -> Result<()> {
    match &loaded.header.dictionary_checksum {
        Some(want) if *want != dict.checksum() => Err(validation("checkpoint was trained against a different dictionary")),
        _ => Ok(()),
    }
}

fn seeded_noise(rows: usize, cols: usize, seed: u64) -> Tensor<Real> {
    Tensor::normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn latent_block(t: &Tensor<Real>) -> Result<Block> {
    Block::matrix(t.rows(), t.cols(), t.data().to_vec())
}

// generate

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Code file written by `compose`, or a bare code object.
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Words appended after the pseudo-tokens.
    #[arg(long)]
    style: Option<String>,
    /// `toy` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Debug, Serialize)]
struct GenerationRecord {
    prompt: String,
    code: PromptCode,
    text: String,
    seed: u64,
    steps: usize,
    backend: String,
    checkpoint_checksum: String,
}

pub fn generate(file: &FileConfig, args: GenerateArgs) -> Result<()> {
    let steps = args.steps.unwrap_or(file.sample()?.steps);
    let code = read_code(&args.code)?;
    let loaded = load_checkpoint(&args.ckpt)?;
    let choice = backend::resolve(args.backend.as_deref(), &file.backend()?)?;
    let backend = backend::connect(&choice, &loaded.model.backend)?;
    let style = args.style.as_deref();
    let prompt = loaded.model.embed(&code, style)?;
    let words = prompt_text(&loaded.model.spec.template, &code, style);
    let gen = render(&backend, &prompt, words, &loaded.autoencoder, &SamplerOptions { steps, seed: args.seed })?;

    create_dir(&args.out)?;
    write_file(&args.out.join("image.png"), &gen.image.to_png()?)?;
    psfm::write_block(&args.out.join("latent.psfm"), &latent_block(&gen.latent)?)?;
    let record = GenerationRecord {
        prompt: gen.prompt,
        text: code.to_string(),
        code,
        seed: args.seed,
        steps,
        backend: backend.name(),
        checkpoint_checksum: loaded.checksum,
    };
    write_json(&args.out.join("generation.json"), &record)?;

    let mut run = RunManifest::new("generate")
        .seed("sample", args.seed)
        .config(&serde_json::json!({"steps": steps, "style": args.style, "backend": choice.name()}))?;
    run.input(&args.code)?;
    run.input(&args.ckpt)?;
    run.write(&args.out)?;
    println!("{}", args.out.join("image.png").display());
    Ok(())
}

// eval

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Suite written by `compose --suite`.
    #[arg(long)]
    suite: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Sampler steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Item `i` is sampled with seed `SEED + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `toy` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Debug, Serialize)]
struct EvalRecord<'a> {
    items: usize,
    seed: u64,
    steps: usize,
    backend: String,
    checkpoint_checksum: &'a str,
    dictionary_checksum: String,
    #[serde(flatten)]
    report: &'a SuiteReport,
}

pub fn eval(file: &FileConfig, args: EvalArgs) -> Result<()> {
    let ckpt = args.ckpt.as_deref().ok_or_else(|| validation("eval needs a checkpoint (--ckpt)"))?;
    let steps = args.steps.unwrap_or(file.sample()?.steps);
    let suite: CompositionSuite = read_json(&args.suite)?;
    let dict = SubConceptDictionary::load(&args.dict)?;
    let loaded = load_checkpoint(ckpt)?;
    check_dictionary(&loaded, &dict)?;
    let info = dict
        .metadata
        .extractor
        .clone()
        .ok_or_else(|| Error::Dependency("the dictionary records no feature extractor".into()))?;
    let extractor = StubExtractor::from_info(&info)?;
    let choice = backend::resolve(args.backend.as_deref(), &file.backend()?)?;
    let backend = backend::connect(&choice, &loaded.model.backend)?;

    let model = &loaded.model;
    let report = eval_suite(&suite.items, &dict, &extractor, |i, item| {
        let prompt = model.embed(&item.code, None)?;
        let words = prompt_text(&model.spec.template, &item.code, None);
        let opts = SamplerOptions {
            steps,
            seed: args.seed.wrapping_add(i as u64),
        };
        Ok(render(&backend, &prompt, words, &loaded.autoencoder, &opts)?.image)
    })?;

    let record = EvalRecord {
        items: suite.items.len(),
        seed: args.seed,
        steps,
        backend: backend.name(),
        checkpoint_checksum: &loaded.checksum,
        dictionary_checksum: dict.checksum(),
        report: &report,
    };
    write_json(&args.report, &record)?;
    let mut run = RunManifest::new("eval")
        .seed("sample", args.seed)
        .config(&serde_json::json!({"steps": steps, "backend": choice.name()}))?;
    run.input(&args.suite)?;
    run.input(ckpt)?;
    run.input(&args.dict)?;
    run.write_sidecar(&args.report)?;

    match &report.overall {
        Some(r) => println!("overall  EMR {:.4}  CoSim {:.4}  n {}", r.emr, r.cosim, r.n_samples),
        None => println!("overall  no sample rendered"),
    }
    for (sources, r) in &report.per_sources {
        println!("sources {sources}  EMR {:.4}  CoSim {:.4}  n {}", r.emr, r.cosim, r.n_samples);
    }
    if !report.failures.is_empty() {
        eprintln!("{} samples failed to render", report.failures.len());
    }
    Ok(())
}

// sweep

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    /// Attention-loss weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training steps per run.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    suite_size: Option<usize>,
    /// Train raw token rows without the projector.
    #[arg(long)]
    no_projector: bool,
}

#[derive(Debug, Serialize)]
struct SweepRecord<'a> {
    config: &'a partsmith_core::experiment::ToyExperimentConfig,
    rows: &'a [SweepRow],
    runs: &'a [ToyRunReport],
}

pub fn sweep(file: &FileConfig, args: SweepArgs) -> Result<()> {
    let mut cfg = file.sweep()?;
    if args.steps.is_some() {
        cfg.train.max_steps = args.steps;
    }
    cfg.suite_size = args.suite_size.unwrap_or(cfg.suite_size);
    cfg.train.no_projector |= args.no_projector;
    let lambdas = if args.lambdas.is_empty() { DEFAULT_LAMBDAS.to_vec() } else { args.lambdas };
    let seeds = if args.seeds.is_empty() { vec![0] } else { args.seeds };
    let (rows, runs) = lambda_sweep(&lambdas, &seeds, &cfg)?;

    create_dir(&args.out)?;
    write_json(
        &args.out.join("sweep.json"),
        &SweepRecord {
            config: &cfg,
            rows: &rows,
            runs: &runs,
        },
    )?;
    let mut run = RunManifest::new("sweep").config(&serde_json::json!({
        "experiment": cfg, "lambdas": lambdas, "seeds": seeds
    }))?;
    for s in &seeds {
        run = run.seed(&format!("train_{s}"), *s);
    }
    run.write(&args.out)?;

    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{:>10}  {:>7}  {:>7}  {:>7}  fid", "lambda", "EMR", "CoSim", "IoU");
    for r in &rows {
        let fid = r.fid.value().map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            stdout,
            "{:>10}  {:>7.4}  {:>7.4}  {:>7.4}  {fid}",
            r.lambda_attn, r.emr, r.cosim, r.attention_iou
        );
    }
    Ok(())
}

// dump-attn

#[derive(Debug, Args)]
pub struct DumpAttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Code file written by `compose`, or a bare code object.
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Diffusion timestep at which attention is read.
    #[arg(long, default_value_t = partsmith_service::DEFAULT_PROBE_T)]
    t: usize,
    /// Seeds the probe noise and, without --image, the generated latent.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe on this image instead of a freshly generated one.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Sampler steps when generating.
    #[arg(long)]
    steps: Option<usize>,
    /// `toy` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
}

pub fn dump_attn(file: &FileConfig, args: DumpAttnArgs) -> Result<()> {
    let code = read_code(&args.code)?;
    let loaded = load_checkpoint(&args.ckpt)?;
    let choice = backend::resolve(args.backend.as_deref(), &file.backend()?)?;
    let backend = backend::connect(&choice, &loaded.model.backend)?;
    let model = &loaded.model;
    let steps = args.steps.unwrap_or(file.sample()?.steps);
    let z0 = match &args.image {
        Some(path) => {
            let img = read_png(path)?;
            let grid = loaded.autoencoder.grid_for(img.width, img.height);
            if grid != model.spec.denoiser.grid {
                return Err(validation(format!(
                    "{} maps to a {grid:?} latent grid, the model uses {:?}",
                    path.display(),
                    model.spec.denoiser.grid
                )));
            }
            loaded.autoencoder.encode(&img)?
        }
        None => {
            let prompt = model.embed(&code, None)?;
            let words = prompt_text(&model.spec.template, &code, None);
            render(&backend, &prompt, words, &loaded.autoencoder, &SamplerOptions { steps, seed: args.seed })?.latent
        }
    };
    let noise = seeded_noise(z0.rows(), z0.cols(), args.seed);
    let att = probe_attention(&backend, model, &code, &z0, args.t, &noise)?;
    let written = dump_attention(&att, &args.out)?;

    let mut run = RunManifest::new("dump-attn")
        .seed("probe", args.seed)
        .config(&serde_json::json!({"t": args.t, "steps": steps, "backend": choice.name()}))?;
    run.input(&args.code)?;
    run.input(&args.ckpt)?;
    if let Some(p) = &args.image {
        run.input(p)?;
    }
    run.write(&args.out)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

// serve

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    host: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// Generation jobs allowed to run at once.
    #[arg(long)]
    max_jobs: Option<usize>,
    /// Sampler steps per job.
    #[arg(long)]
    steps: Option<usize>,
    /// Allowed CORS origin; repeat for several. Any origin when omitted.
    #[arg(long)]
    allow_origin: Vec<String>,
    /// `toy` or `remote:URL`.
    #[arg(long)]
    backend: Option<String>,
    /// Directory for the run manifest recording what is being served.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn serve(file: &FileConfig, args: ServeArgs) -> Result<()> {
    let mut cfg = file.serve()?;
    cfg.host = args.host.unwrap_or(cfg.host);
    cfg.port = args.port.unwrap_or(cfg.port);
    cfg.service.max_jobs = args.max_jobs.unwrap_or(cfg.service.max_jobs);
    cfg.service.sampler_steps = args.steps.unwrap_or(cfg.service.sampler_steps);
    if !args.allow_origin.is_empty() {
        cfg.service.allowed_origins = args.allow_origin;
    }
    let artifacts = Artifacts::load(&args.ckpt, &args.dict)?;
    // Remote backends use a blocking client, so connect before the runtime.
    let choice = backend::resolve(args.backend.as_deref(), &file.backend()?)?;
    let backend = backend::connect(&choice, &artifacts.model.backend)?;
    let state = AppState::new(artifacts, backend, cfg.service.clone())?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        let mut run = RunManifest::new("serve").config(&serde_json::json!({"serve": cfg, "backend": choice.name()}))?;
        run.input(&args.ckpt)?;
        run.input(&args.dict)?;
        run.write(out)?;
    }

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Dependency(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let addr = format!("{}:{}", cfg.host, cfg.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::io(PathBuf::from(&addr), e))?;
        let local = listener.local_addr().map_err(|e| Error::io(PathBuf::from(&addr), e))?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        partsmith_service::serve(listener, state)
            .await
            .map_err(|e| Error::io(PathBuf::from(&addr), e))
    })
}
