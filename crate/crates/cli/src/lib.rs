//! Command-line orchestration: configs, training, generation and evaluation
//! runs, each writing a self-describing output directory.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use log::info;
use ridgeforge_core::contrastive::EmbeddingModel;
use ridgeforge_core::dataset::{
    generate_dataset, ingest_real_dataset, make_toy_dataset, DatasetManifest, Split, SplitConfig, MANIFEST_FILE,
};
use ridgeforge_core::eval::{
    appearance_control_precision, evaluate_verification, intra_class_stats, real_data_reference_stats,
    write_report_bundle, Report,
};
use ridgeforge_core::generator::{sample_grid, GanState, LossReport};
use ridgeforge_core::recognition::{export_embeddings, train_recognizer, EmbeddingRecord, Recognizer};
use ridgeforge_core::{Error, Result};

pub use config::{require, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAULT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "ridgeforge", version, about = "Identity/appearance-controllable fingerprint synthesis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the procedural ridge-texture corpus into --out.
    MakeToyDataset(Flags),
    /// Train a recognizer on --dataset; writes recognizer.ckpt.
    TrainRecognizer(Flags),
    /// Train the generator on --data with the --id-model recognizer; writes gan.ckpt.
    TrainGan(Flags),
    /// Generate a labeled synthetic dataset from --gan.
    GenDataset(Flags),
    /// Intra-class identity and appearance distances of --gan.
    EvalIntra(Flags),
    /// Appearance-control precision of --gan.
    EvalControl(Flags),
    /// TAR@FAR of --recognizer on --dataset.
    EvalVerify(Flags),
    /// Every evaluation whose inputs are configured, as one report bundle.
    Report(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MakeToyDataset(_) => "make-toy-dataset",
            Self::TrainRecognizer(_) => "train-recognizer",
            Self::TrainGan(_) => "train-gan",
            Self::GenDataset(_) => "gen-dataset",
            Self::EvalIntra(_) => "eval-intra",
            Self::EvalControl(_) => "eval-control",
            Self::EvalVerify(_) => "eval-verify",
            Self::Report(_) => "report",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Self::MakeToyDataset(f)
            | Self::TrainRecognizer(f)
            | Self::TrainGan(f)
            | Self::GenDataset(f)
            | Self::EvalIntra(f)
            | Self::EvalControl(f)
            | Self::EvalVerify(f)
            | Self::Report(f) => f,
        }
    }
}

/// Overrides shared by every subcommand; each uses the ones it needs.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub w_app: Option<f64>,
    /// Identities to generate, or pairs to sample for evaluation.
    #[arg(long)]
    pub num_identities: Option<usize>,
    #[arg(long)]
    pub impressions_per_id: Option<usize>,
    /// FAR operating point; repeatable.
    #[arg(long)]
    pub far: Vec<f64>,
    /// e.g. resnet18, mobilenet100, efficientnet-b0, resnet-toy.
    #[arg(long)]
    pub backbone: Option<String>,
    #[arg(long, conflicts_with = "first_subsample")]
    pub no_first_subsample: bool,
    #[arg(long)]
    pub first_subsample: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub determinism: bool,
    /// Real dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub id_model: Option<PathBuf>,
    #[arg(long)]
    pub gan: Option<PathBuf>,
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    /// Dataset to train on (train-recognizer) or evaluate on (eval-verify, report).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

/// Loads the config file (if any) and applies flag overrides.
pub fn effective_config(cmd: &Command) -> Result<RunConfig> {
    let f = cmd.flags();
    let mut c = match &f.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = f.seed {
        c.seed = s;
    }
    if let Some(o) = &f.out {
        c.out = Some(o.clone());
    }
    if let Some(w) = f.w_app {
        c.contrastive.w_app = w;
    }
    if let Some(n) = f.num_identities {
        c.synth.num_identities = n;
        c.eval.n_identities = n;
        c.eval.n_pairs = n;
    }
    if let Some(k) = f.impressions_per_id {
        c.synth.impressions_per_id = k;
    }
    if !f.far.is_empty() {
        c.eval.far_targets = f.far.clone();
    }
    if let Some(b) = &f.backbone {
        c.recognizer.backbone = b.clone();
    }
    if f.no_first_subsample {
        c.recognizer.remove_first_subsample = true;
    }
    if f.first_subsample {
        c.recognizer.remove_first_subsample = false;
    }
    if let Some(s) = f.steps {
        c.generator.train.steps = s;
    }
    c.determinism |= f.determinism;
    let paths = &mut c.paths;
    for (flag, slot) in [
        (&f.data, &mut paths.real_data),
        (&f.id_model, &mut paths.id_model),
        (&f.gan, &mut paths.gan),
        (&f.recognizer, &mut paths.recognizer),
    ] {
        if let Some(p) = flag {
            *slot = Some(p.clone());
        }
    }
    if let Some(d) = &f.dataset {
        match cmd {
            Command::EvalVerify(_) | Command::Report(_) => paths.verify_dataset = Some(d.clone()),
            _ => paths.dataset = Some(d.clone()),
        }
    }
    c.synth.seed = c.seed;
    c.data.toy.resolution = c.generator.resolution;
    c.validate()?;
    Ok(c)
}

pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) if e.is_usage() => EXIT_USAGE,
        Err(_) => EXIT_FAULT,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(&cli.command)?;
    setup_threads(cfg.determinism);
    let out = cfg.out_dir()?.to_path_buf();
    create_dir(&out)?;
    write_file(&out.join(format!("{}.config.toml", cli.command.name())), cfg.to_toml().as_bytes())?;
    let provenance = serde_json::json!({
        "command": cli.command.name(),
        "seed": cfg.seed,
        "run_tag": cfg.run_tag,
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": ridgeforge_core::par::is_parallel(),
        "determinism": cfg.determinism,
    });
    write_file(
        &out.join(format!("{}.provenance.json", cli.command.name())),
        serde_json::to_string_pretty(&provenance).expect("json").as_bytes(),
    )?;
    info!("{} -> {}", cli.command.name(), out.display());
    match &cli.command {
        Command::MakeToyDataset(_) => cmd_make_toy(&cfg, &out),
        Command::TrainRecognizer(_) => cmd_train_recognizer(&cfg, &out),
        Command::TrainGan(_) => cmd_train_gan(&cfg, &out),
        Command::GenDataset(_) => cmd_gen_dataset(&cfg, &out),
        Command::EvalIntra(_) => cmd_eval(&cfg, &out, Evals { intra: true, ..Evals::default() }),
        Command::EvalControl(_) => cmd_eval(&cfg, &out, Evals { control: true, ..Evals::default() }),
        Command::EvalVerify(_) => cmd_eval(&cfg, &out, Evals { verify: true, ..Evals::default() }),
        Command::Report(_) => cmd_report(&cfg, &out),
    }
}

fn setup_threads(determinism: bool) {
    #[cfg(feature = "parallel")]
    if determinism {
        if rayon::ThreadPoolBuilder::new().num_threads(1).build_global().is_err() {
            log::warn!("worker pool already initialized; determinism relies on order-preserving kernels");
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = determinism;
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = p.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, p).map_err(|e| Error::io(p, e))
}

struct Heartbeat {
    every: Duration,
    last: Instant,
}

impl Heartbeat {
    fn new(secs: u64) -> Self {
        Self { every: Duration::from_secs(secs), last: Instant::now() }
    }

    fn tick(&mut self, msg: impl FnOnce() -> String) {
        if self.last.elapsed() >= self.every {
            info!("{}", msg());
            self.last = Instant::now();
        }
    }
}

fn split_config(cfg: &RunConfig) -> SplitConfig {
    SplitConfig { train_fraction: cfg.data.train_fraction, seed: cfg.data.split_seed, source_tag: "real".into() }
}

/// A generated dataset directory as-is, or the given split of a real root.
fn load_dataset(cfg: &RunConfig, path: &Path, real_split: Split) -> Result<DatasetManifest> {
    let manifest = path.join(MANIFEST_FILE);
    if manifest.is_file() {
        DatasetManifest::load(&manifest)
    } else {
        Ok(ingest_real_dataset(path, &split_config(cfg))?.filter_split(real_split))
    }
}

fn cmd_make_toy(cfg: &RunConfig, out: &Path) -> Result<()> {
    make_toy_dataset(out, &cfg.data.toy)?;
    let m = ingest_real_dataset(out, &split_config(cfg))?;
    info!(
        "wrote {} identities / {} images ({} train identities)",
        m.num_identities(),
        m.len(),
        m.filter_split(Split::Train).num_identities()
    );
    Ok(())
}

fn cmd_train_recognizer(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require(cfg.paths.dataset.as_ref(), "training dataset")?;
    let manifest = load_dataset(cfg, &data, Split::Train)?;
    let side = cfg.generator.resolution;
    let (samples, labels) = manifest.load_labeled(side)?;
    info!("training {} on {} images of {} identities", cfg.recognizer.backbone, samples.len(), labels.len());
    let spec = cfg.recognizer.spec()?;
    let mut csv = String::from("epoch,loss,accuracy\n");
    let trained = train_recognizer(&samples, &spec, &cfg.recognizer.train, cfg.seed, |e| {
        info!("epoch {} loss {:.4} accuracy {:.3}", e.epoch, e.loss, e.accuracy);
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.accuracy));
    })?;
    write_file(&out.join("recognizer_log.csv"), csv.as_bytes())?;
    let extra = serde_json::json!({ "num_classes": labels.len(), "log": trained.log });
    trained.model.save(&out.join("recognizer.ckpt"), extra)
}

fn cmd_train_gan(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require(cfg.paths.real_data.as_ref(), "real dataset")?;
    let id_path = require(cfg.paths.id_model.as_ref(), "identity model checkpoint")?;
    let res = cfg.generator.resolution;
    let ccfg = cfg.contrastive.resolve(res)?;
    let model = Recognizer::load(&id_path)?;
    if model.input_dims() != (res, res) {
        return Err(Error::Config(format!(
            "identity model expects {:?} inputs, generator resolution is {res}",
            model.input_dims()
        )));
    }
    let manifest = ingest_real_dataset(&data, &split_config(cfg))?.filter_split(Split::Train);
    let pool: Vec<_> = manifest.load_labeled(res)?.0.into_iter().map(|(img, _)| img).collect();
    if pool.is_empty() {
        return Err(Error::Config(format!("no training images in {}", data.display())));
    }

    let ckpt = out.join("gan.ckpt");
    let log_path = out.join("train_log.csv");
    let mut state = if ckpt.is_file() {
        let s = GanState::load(&ckpt)?;
        let mut want = cfg.generator.clone();
        want.train.steps = s.config().train.steps;
        if *s.config() != want {
            return Err(Error::Config(format!("{} was trained with a different generator config", ckpt.display())));
        }
        info!("resuming from step {}", s.step);
        s
    } else {
        GanState::new(&cfg.generator, cfg.seed)?
    };
    let mut log_text = String::from(LossReport::CSV_HEADER) + "\n";
    if state.step > 0 {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
                if step < state.step {
                    log_text.push_str(line);
                    log_text.push('\n');
                }
            }
        }
    }
    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("samples"))?;
    let steps = cfg.generator.train.steps;
    let batch = cfg.generator.train.batch_size;
    let mut beat = Heartbeat::new(cfg.heartbeat_secs);
    let started = Instant::now();
    info!("training from step {} to {steps} with w_app = {}", state.step, ccfg.w_app);
    while state.step < steps {
        let plan = state.sample_plan()?;
        let real = state.sample_real(&pool, batch)?;
        let rep = state.train_step(&plan, &real, &ccfg, &model)?;
        if rep.step % cfg.gan.log_every == 0 {
            log_text.push_str(&rep.csv_row());
            log_text.push('\n');
        }
        beat.tick(|| {
            let rate = started.elapsed().as_secs_f64() / rep.step.max(1) as f64;
            format!(
                "step {}/{steps}  adv {:.4}  id {:.4}  app {:.4}  disc {:.4}  ({:.1} ms/step)",
                state.step, rep.adversarial, rep.id_part, rep.app_part, rep.disc_loss, rate * 1e3
            )
        });
        if state.step % cfg.gan.checkpoint_every == 0 || state.step == steps {
            save_gan(cfg, out, &state, &log_text)?;
        }
    }
    if !ckpt.is_file() {
        save_gan(cfg, out, &state, &log_text)?;
    }
    Ok(())
}

fn save_gan(cfg: &RunConfig, out: &Path, state: &GanState, log_text: &str) -> Result<()> {
    state.save(&out.join(format!("checkpoints/step_{:07}.ckpt", state.step)))?;
    let grid = sample_grid(state.sampler(), cfg.gan.grid_cols, cfg.gan.grid_rows, cfg.seed)?;
    grid.save_png(&out.join(format!("samples/grid_{:07}.png", state.step)))?;
    write_file(&out.join("train_log.csv"), log_text.as_bytes())?;
    state.save(&out.join("gan.ckpt"))?;
    info!("checkpoint at step {}", state.step);
    Ok(())
}

fn cmd_gen_dataset(cfg: &RunConfig, out: &Path) -> Result<()> {
    let gan = require(cfg.paths.gan.as_ref(), "generator checkpoint")?;
    let state = GanState::load(&gan)?;
    let mut beat = Heartbeat::new(cfg.heartbeat_secs);
    let m = generate_dataset(state.sampler(), &cfg.synth, out, |done, total| {
        beat.tick(|| format!("generated {done}/{total} identities"))
    })?;
    info!("dataset: {} identities, {} images", m.num_identities(), m.len());
    Ok(())
}

#[derive(Clone, Copy, Default)]
struct Evals {
    intra: bool,
    control: bool,
    verify: bool,
}

fn cmd_report(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = &cfg.paths;
    let evals = Evals {
        intra: p.gan.is_some() && p.id_model.is_some(),
        control: p.gan.is_some(),
        verify: p.recognizer.is_some() && p.verify_dataset.is_some(),
    };
    if !(evals.intra || evals.control || evals.verify) {
        return Err(Error::Usage("report needs --gan (with --id-model) and/or --recognizer with --dataset".into()));
    }
    cmd_eval(cfg, out, evals)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, evals: Evals) -> Result<()> {
    let report_path = out.join("report.json");
    let mut report = if report_path.is_file() { Report::load(&report_path)? } else { Report::new(&cfg.run_tag, cfg.seed) };
    report.run_tag = cfg.run_tag.clone();
    report.seed = cfg.seed;
    let res = cfg.generator.resolution;
    let filter = cfg.contrastive.resolve(res)?.filter;
    let mut scores = None;

    if evals.intra || evals.control {
        let gan = require(cfg.paths.gan.as_ref(), "generator checkpoint")?;
        let state = GanState::load(&gan)?;
        let gen = state.sampler();
        if evals.intra {
            let model = Recognizer::load(&require(cfg.paths.id_model.as_ref(), "identity model checkpoint")?)?;
            let s = intra_class_stats(gen, &model, &filter, cfg.eval.n_identities, cfg.seed)?;
            info!(
                "intra-class: id {:.4} ± {:.4}, app {:.5} ± {:.5}",
                s.id_dist.mean, s.id_dist.std, s.app_dist.mean, s.app_dist.std
            );
            report.intra_class = Some(s);
            if let Some(real) = &cfg.paths.real_data {
                let real = require(Some(real), "real dataset")?;
                let m = ingest_real_dataset(&real, &split_config(cfg))?;
                let r = real_data_reference_stats(&m, &model, &filter, cfg.seed)?;
                info!("real reference: id {:.4}, app {:.5}", r.id_dist.mean, r.app_dist.mean);
                report.real_reference = Some(r);
            }
        }
        if evals.control {
            let c = appearance_control_precision(gen, &filter, cfg.eval.n_pairs, cfg.seed)?;
            info!("control precision: {:.5} ± {:.5}", c.mean, c.std);
            report.control_precision = Some(c);
        }
    }

    if evals.verify {
        let model = Recognizer::load(&require(cfg.paths.recognizer.as_ref(), "recognizer checkpoint")?)?;
        let data = require(cfg.paths.verify_dataset.as_ref(), "verification dataset")?;
        let manifest = load_dataset(cfg, &data, Split::Test)?;
        let side = model.input_dims().0;
        let (samples, labels) = manifest.load_labeled(side)?;
        let images: Vec<_> = samples.iter().map(|(img, _)| img.clone()).collect();
        let mut vectors = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            vectors.extend(model.embed(chunk)?);
        }
        let records: Vec<EmbeddingRecord> = manifest
            .records()
            .iter()
            .zip(&samples)
            .zip(vectors)
            .map(|((r, (_, class)), vector)| {
                debug_assert_eq!(labels[*class], r.identity_label);
                EmbeddingRecord { identity_label: r.identity_label.clone(), impression_index: r.impression_index, vector }
            })
            .collect();
        export_embeddings(&records, &out.join("embeddings"))?;
        let (v, s) = evaluate_verification(&records, &cfg.eval.protocol, &cfg.eval.far_targets)?;
        for (t, b) in v.tar_at_far.iter().zip(&v.shuffled_baseline) {
            info!("TAR@FAR={}: {:.4} (shuffled-label baseline {:.4})", t.far_target, t.tar, b.tar);
        }
        report.verification = Some(v);
        scores = Some(s);
    }
    write_report_bundle(out, &report, scores.as_ref(), cfg.eval.bins)
}
