//! `vad` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vad_core::config::{parse_size, parse_value};
use vad_core::data::{self, AnomalyKind, Split, SynthConfig};
use vad_core::model::Checkpoint;
use vad_core::scoring::{self, Pooling, ScoringConfig};
use vad_core::trainer::{self, Resume, TrainConfig, TrainOutputs};
use vad_core::verify::{self, Suite, VerifyOptions};
use vad_core::{KvConfig, LossConfig, ModelConfig, Result, VadError};

pub use manifest::{DirLock, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vad", version, about = "Prediction-based video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with frame-level labels.
    Synth(SynthArgs),
    /// Train a model on a dataset's train split.
    Train(TrainArgs),
    /// Score a dataset's test split and report AUC.
    Eval(EvalArgs),
    /// Run the numerical oracle suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Normal training videos.
    #[arg(long, default_value_t = 12)]
    videos: usize,
    /// Test videos carrying one anomalous segment each.
    #[arg(long, default_value_t = 6)]
    anomalous: usize,
    /// Fully normal test videos.
    #[arg(long, default_value_t = 0)]
    normal_test: usize,
    /// Comma-separated kinds: speed, extra_object, direction.
    #[arg(long, default_value = "speed,extra_object")]
    anomalies: String,
    #[arg(long, default_value_t = 80)]
    frames: usize,
    /// Frame size as HxW.
    #[arg(long, default_value = "32x32")]
    size: String,
    /// Fixed inclusive anomaly range as A:B; drawn per video otherwise.
    #[arg(long)]
    segment: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Dataset root with `train/` (and optionally `test/`).
    #[arg(long)]
    data: PathBuf,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds both parameter init and data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_bi: bool,
    #[arg(long)]
    no_sho: bool,
    #[arg(long)]
    no_att: bool,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_seconds: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root with a labeled `test/` split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config the checkpoint is expected to match; also supplies `score.*`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write |prediction - target| images for every scored frame.
    #[arg(long)]
    dump_error_maps: bool,
    /// normalize_then_pool or pool_raw.
    #[arg(long)]
    pooling: Option<String>,
    /// Resize frames whose native size differs from the model's.
    #[arg(long)]
    resize: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Run only these suites; repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
    /// Write results and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &VadError) -> i32 {
    match e {
        VadError::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn parse_kinds(list: &str) -> Result<Vec<AnomalyKind>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn parse_segment(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| VadError::Config(format!("--segment expects A:B, got {s:?}")))?;
    let (a, b) = (parse_value("--segment", a.trim())?, parse_value("--segment", b.trim())?);
    if a > b {
        return Err(VadError::Config(format!("--segment start {a} is after end {b}")));
    }
    Ok((a, b))
}

fn synth_kv(cfg: &SynthConfig) -> KvConfig {
    let mut kv = KvConfig::default();
    kv.set("synth.frame_size", format!("{}x{}", cfg.frame_size.0, cfg.frame_size.1));
    kv.set("synth.videos", cfg.num_normal_videos.to_string());
    kv.set("synth.anomalous", cfg.num_anomalous_videos.to_string());
    kv.set("synth.normal_test", cfg.num_normal_test_videos.to_string());
    let kinds: Vec<&str> = cfg.anomaly_kinds.iter().map(|k| k.name()).collect();
    kv.set("synth.anomalies", kinds.join(","));
    kv.set("synth.frames", cfg.frames_per_video.to_string());
    kv.set(
        "synth.segment",
        cfg.anomaly_segment.map_or("random".into(), |(a, b)| format!("{a}:{b}")),
    );
    kv.set("synth.seed", cfg.seed.to_string());
    kv
}

fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        frame_size: parse_size("--size", &a.size)?,
        num_normal_videos: a.videos,
        num_anomalous_videos: a.anomalous,
        num_normal_test_videos: a.normal_test,
        anomaly_kinds: parse_kinds(&a.anomalies)?,
        frames_per_video: a.frames,
        anomaly_segment: a.segment.as_deref().map(parse_segment).transpose()?,
        seed: a.seed,
    };
    cfg.validate()?;
    let _lock = DirLock::acquire(&a.out)?;
    let manifest = RunManifest::start("synth", &synth_kv(&cfg), cfg.seed, &[], &a.out);
    let summary = data::generate_synthetic(&cfg, &a.out)?;
    manifest.finish(&a.out)?;
    log::info!(
        "wrote {} train and {} test videos to {}",
        summary.train_videos.len(),
        summary.test_videos.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

/// Fully resolved training configuration.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

impl TrainSetup {
    /// Desk defaults, then `kv`, then validation of every part.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        for (key, _) in kv.iter() {
            let known = ["model.", "train.", "loss.", "score."];
            if !known.iter().any(|p| key.starts_with(p)) {
                return Err(VadError::Config(format!("unknown key `{key}`")));
            }
        }
        let mut model = ModelConfig::desk();
        model.apply_kv(kv)?;
        let mut train = TrainConfig::default();
        train.apply_kv(kv)?;
        let mut loss = LossConfig::default();
        loss.apply_kv(kv)?;
        let setup = Self { model, train, loss };
        setup.validate()?;
        Ok(setup)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let (h, w) = self.model.frame_size;
        if self.loss.ssim_window > h.min(w) {
            return Err(VadError::Config(format!(
                "loss.ssim_window {} exceeds the {h}x{w} frame",
                self.loss.ssim_window
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.model.to_kv();
        kv.merge(&self.train.to_kv());
        kv.merge(&self.loss.to_kv());
        kv
    }
}

fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| VadError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn resolve_train_kv(a: &TrainArgs) -> Result<KvConfig> {
    let mut kv = match &a.config {
        Some(p) => KvConfig::load(p).map_err(|e| match e {
            VadError::Io { path, source } => VadError::Config(format!("cannot read {}: {source}", path.display())),
            other => other,
        })?,
        None => KvConfig::default(),
    };
    for s in &a.set {
        let (k, v) = parse_assignment(s)?;
        kv.set(&k, v);
    }
    if let Some(seed) = a.seed {
        kv.set("model.seed", seed.to_string());
        kv.set("train.seed", seed.to_string());
    }
    for (flag, key) in [(a.no_bi, "model.bi"), (a.no_sho, "model.sho"), (a.no_att, "model.att")] {
        if flag {
            kv.set(key, "false");
        }
    }
    if let Some(e) = a.max_epochs {
        kv.set("train.max_epochs", e.to_string());
    }
    if let Some(s) = a.max_seconds {
        kv.set("train.max_seconds", s.to_string());
    }
    Ok(kv)
}

fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let setup = TrainSetup::from_kv(&resolve_train_kv(a)?)?;
    let records = data::load_dataset(&a.data, Split::Train)?;
    if records.is_empty() {
        return Err(VadError::Config(format!("{} has no training videos", a.data.display())));
    }
    let (_, _, channels) = data::native_frame_shape(&records[0])?;
    if channels != setup.model.in_channels {
        return Err(VadError::Config(format!(
            "data has {channels} channel(s) but model.in_channels is {}",
            setup.model.in_channels
        )));
    }

    let _lock = DirLock::acquire(&a.out)?;
    let outputs = TrainOutputs { dir: a.out.clone() };
    let resume = if a.resume { Some(Resume::load(&outputs, &setup.model)?) } else { None };
    let resolved = setup.to_kv();
    let manifest = RunManifest::start("train", &resolved, setup.train.seed, &[&a.data], &a.out);
    vad_core::model::write_atomic(&a.out.join("config.cfg"), resolved.to_text().as_bytes())?;

    let (train_recs, val_recs) = trainer::split_train_val(&records, setup.train.val_ratio, setup.train.seed)?;
    let train_videos = trainer::load_videos(&train_recs, setup.model.frame_size)?;
    let val_videos = trainer::load_videos(&val_recs, setup.model.frame_size)?;
    let mut model = vad_core::build_model::<f32>(&setup.model)?;
    log::info!(
        "training {} parameters on {} videos ({} held out)",
        model.param_count(),
        train_videos.len(),
        val_videos.len()
    );
    let outcome = trainer::train(
        &mut model,
        &train_videos,
        &val_videos,
        &setup.loss,
        &setup.train,
        Some(&outputs),
        resume,
    )?;
    log::info!(
        "best epoch {} with validation loss {:.6} after {:.1} s",
        outcome.report.best_epoch,
        outcome.report.best_val_loss,
        outcome.report.seconds
    );
    manifest.finish(&a.out)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let mut scoring_cfg = ScoringConfig::default();
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if let Some(p) = &a.config {
        let kv = KvConfig::load(p)?;
        scoring_cfg.apply_kv(&kv)?;
        let mut expected = ModelConfig::desk();
        if kv.get("model.seed").is_none() {
            // Init seed is irrelevant to scoring unless pinned explicitly.
            expected.seed = ckpt.config.seed;
        }
        expected.apply_kv(&kv)?;
        let diff = expected.diff(&ckpt.config);
        if !diff.is_empty() {
            return Err(VadError::Config(format!(
                "checkpoint {} does not match {}: {}",
                a.ckpt.display(),
                p.display(),
                diff.join(", ")
            )));
        }
    }
    if let Some(p) = &a.pooling {
        scoring_cfg.pooling = p.parse::<Pooling>()?;
    }
    let mc = ckpt.config.clone();
    let records = data::load_dataset(&a.data, Split::Test)?;
    if records.is_empty() {
        return Err(VadError::Config(format!("{} has no test videos", a.data.display())));
    }
    for r in &records {
        let (h, w, c) = data::native_frame_shape(r)?;
        if c != mc.in_channels {
            return Err(VadError::Config(format!(
                "video {} has {c} channel(s) but the checkpoint expects {}",
                r.video_id, mc.in_channels
            )));
        }
        if (h, w) != mc.frame_size && !a.resize {
            return Err(VadError::Config(format!(
                "video {} frames are {h}x{w} but the checkpoint expects {}x{}; pass --resize to rescale",
                r.video_id, mc.frame_size.0, mc.frame_size.1
            )));
        }
    }

    let _lock = DirLock::acquire(&a.out)?;
    let mut resolved = mc.to_kv();
    resolved.merge(&scoring_cfg.to_kv());
    let manifest = RunManifest::start("eval", &resolved, mc.seed, &[&a.ckpt, &a.data], &a.out);
    let model = ckpt.to_model()?;
    let videos = trainer::load_videos(&records, mc.frame_size)?;
    let maps = a.out.join("error_maps");
    let eval = scoring::evaluate_dataset(&model, &videos, &scoring_cfg, |id, f, pred, target| {
        if !a.dump_error_maps {
            return Ok(());
        }
        let dir = maps.join(id);
        fs::create_dir_all(&dir).map_err(|e| VadError::io(&dir, e))?;
        data::write_error_map(&dir.join(format!("{f:05}.png")), pred, target)
    })?;
    eval.write(&a.out)?;
    print!("{}", eval.summary());
    manifest.finish(&a.out)?;
    Ok(EXIT_OK)
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let suites: Vec<Suite> = if a.only.is_empty() {
        Suite::ALL.to_vec()
    } else {
        a.only.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?
    };
    let opts = VerifyOptions {
        seed: a.seed,
        corrupt_gradient: a.corrupt_gradient,
    };
    let lock = match &a.out {
        Some(dir) => Some(DirLock::acquire(dir)?),
        None => None,
    };
    let mut kv = KvConfig::default();
    kv.set("verify.suites", suites.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
    kv.set("verify.corrupt_gradient", a.corrupt_gradient.to_string());
    let manifest = a
        .out
        .as_deref()
        .map(|dir| RunManifest::start("verify", &kv, a.seed, &[], dir));

    let results = verify::run_suites(&suites, &opts)?;
    let mut report = String::new();
    for r in &results {
        println!("{r}");
        report.push_str(&format!("{r}\n"));
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}.{}", r.suite, r.property))
        .collect();
    if let (Some(dir), Some(m)) = (&a.out, manifest) {
        write_text(&dir.join("results.txt"), &report)?;
        m.finish(dir)?;
    }
    drop(lock);
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("failed properties: {}", failed.join(", "));
        Ok(EXIT_RUNTIME)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    vad_core::model::write_atomic(path, text.as_bytes())
}
