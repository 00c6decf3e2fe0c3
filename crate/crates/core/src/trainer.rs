//! Training loop: Adam updates on mixed-loss clips, per-epoch validation,
//! early stopping and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KvConfig};
use crate::data::{training_windows, ClipWindow, LoadedVideo};
use crate::error::{Result, VadError};
use crate::graph::Var;
use crate::losses::{sequence_loss_var, LossContext};
use crate::model::{write_atomic, Checkpoint, Model, Session};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_ratio: f64,
    pub seed: u64,
    pub clip_stride: usize,
    /// Joint gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
    /// Wall-clock budget; no epoch starts that is expected to overrun it.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            val_ratio: 0.1,
            seed: 0,
            clip_stride: 4,
            grad_clip: None,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(VadError::Config(m));
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return err(format!("train.val_ratio must be in (0, 1), got {}", self.val_ratio));
        }
        if self.patience == 0 {
            return err("train.patience must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return err(format!("train.lr must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.clip_stride == 0 {
            return err("train.batch_size, train.max_epochs and train.clip_stride must be >= 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return err("train.grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("train.lr", self.learning_rate.to_string());
        kv.set("train.batch_size", self.batch_size.to_string());
        kv.set("train.max_epochs", self.max_epochs.to_string());
        kv.set("train.patience", self.patience.to_string());
        kv.set("train.val_ratio", self.val_ratio.to_string());
        kv.set("train.seed", self.seed.to_string());
        kv.set("train.clip_stride", self.clip_stride.to_string());
        kv.set("train.grad_clip", self.grad_clip.map_or("off".into(), |c| c.to_string()));
        kv.set("train.max_seconds", self.max_seconds.map_or("off".into(), |c| c.to_string()));
        kv
    }

    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        let optional = |k: &str, v: &str| -> Result<Option<f64>> {
            if v == "off" || v == "none" {
                Ok(None)
            } else {
                parse_value(k, v).map(Some)
            }
        };
        for (key, v) in kv.section("train") {
            let full = format!("train.{key}");
            let k = full.as_str();
            match key {
                "lr" => self.learning_rate = parse_value(k, v)?,
                "batch_size" => self.batch_size = parse_value(k, v)?,
                "max_epochs" => self.max_epochs = parse_value(k, v)?,
                "patience" => self.patience = parse_value(k, v)?,
                "val_ratio" => self.val_ratio = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "clip_stride" => self.clip_stride = parse_value(k, v)?,
                "grad_clip" => self.grad_clip = optional(k, v)?,
                "max_seconds" => self.max_seconds = optional(k, v)?,
                _ => return Err(VadError::Config(format!("unknown key `{full}`"))),
            }
        }
        Ok(())
    }
}

/// Splits at video granularity: `ceil(ratio * N)` items go to validation.
pub fn split_train_val<T: Clone>(items: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() < 2 {
        return Err(VadError::Config(format!(
            "need at least 2 training videos to split off validation, got {}",
            items.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(VadError::Config(format!("validation ratio must be in (0, 1), got {ratio}")));
    }
    let n_val = ((ratio * items.len() as f64).ceil() as usize).clamp(1, items.len() - 1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| items[i].clone()).collect(),
        val_idx.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

/// Optimizer and early-stopping progress stored alongside a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingState {
    pub optimizer: Adam<f32>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_without_improvement: usize,
    pub history: Vec<EpochStats>,
    pub elapsed_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub seconds: f64,
}

impl TrainReport {
    /// `epoch,train_loss,val_loss`
    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub report: TrainReport,
}

/// Training loss for one batch: the fused sequence loss, plus half-weighted
/// per-direction terms when both directions run.
pub fn clip_loss_var<F: Real>(
    sess: &mut Session<'_, F>,
    inputs: &[Var],
    targets: &[Var],
    ctx: &LossContext<F>,
) -> Result<Var> {
    let set = sess.predict(inputs)?;
    let g = &mut sess.graph;
    let fused = sequence_loss_var(g, targets, &set.fused, ctx)?;
    let Some(backward) = set.backward else {
        return Ok(fused);
    };
    let f = sequence_loss_var(g, targets, &set.forward, ctx)?;
    let b = sequence_loss_var(g, targets, &backward, ctx)?;
    let dirs = g.add(f, b)?;
    let dirs = g.scale(dirs, F::lit(0.5));
    g.add(fused, dirs)
}

/// Stacks the windows into per-timestep batches `[B, C, H, W]`.
fn batch_frames(videos: &[LoadedVideo], windows: &[ClipWindow], len: usize) -> Result<Vec<Tensor<f32>>> {
    (0..len)
        .map(|t| {
            let items: Vec<&Tensor<f32>> = windows.iter().map(|w| &videos[w.video].frames[w.start + t]).collect();
            Tensor::stack(&items)
        })
        .collect()
}

fn window_list(videos: &[LoadedVideo], clip_len: usize, stride: usize, seed: u64) -> Vec<ClipWindow> {
    let counts: Vec<_> = videos
        .iter()
        .map(|v| (v.record.video_id.clone(), v.frames.len()))
        .collect();
    training_windows(&counts, clip_len, stride, seed)
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut Adam<f32>,
    frames: &[Tensor<f32>],
    ctx: &LossContext<f32>,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let (t_len, n) = (model.config().clip_len, model.config().horizon);
    let (loss, mut grads, observed) = {
        let mut sess = Session::new(model, true, true);
        let vars: Vec<Var> = frames.iter().map(|f| sess.graph.constant(f.clone())).collect();
        let loss = clip_loss_var(&mut sess, &vars[..t_len], &vars[n..n + t_len], ctx)?;
        let value = sess.graph.value(loss).to_scalar() as f64;
        let mut g = sess.graph.backward(loss);
        let grads: Vec<Option<Tensor<f32>>> = sess.param_vars().iter().map(|&v| g.take(v)).collect();
        (value, grads, sess.take_observed())
    };
    if !loss.is_finite() {
        return Ok(loss);
    }
    if let Some(c) = grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    opt.update(model.params_mut().tensors_mut(), &grads)?;
    model.apply_observed(&observed);
    Ok(loss)
}

/// Mean inference-mode loss over every window of `videos`.
pub fn evaluate_loss(
    model: &Model<f32>,
    videos: &[LoadedVideo],
    ctx: &LossContext<f32>,
    stride: usize,
    batch_size: usize,
) -> Result<f64> {
    let (t_len, n) = (model.config().clip_len, model.config().horizon);
    let mut windows = window_list(videos, t_len + n, stride, 0);
    windows.sort();
    if windows.is_empty() {
        return Err(VadError::Config(format!(
            "no validation video has the {} frames a clip needs",
            t_len + n
        )));
    }
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let frames = batch_frames(videos, chunk, t_len + n)?;
        let mut sess = Session::new(model, false, false);
        let vars: Vec<Var> = frames.into_iter().map(|f| sess.graph.constant(f)).collect();
        let loss = clip_loss_var(&mut sess, &vars[..t_len], &vars[n..n + t_len], ctx)?;
        total += sess.graph.value(loss).to_scalar() as f64 * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Where training artifacts go.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.csv")
    }

    pub fn epoch(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:03}.ckpt"))
    }
}

/// State to continue from: the latest parameters with optimizer progress,
/// and the best parameters so far.
pub struct Resume {
    pub last: Checkpoint,
    pub best: Checkpoint,
}

impl Resume {
    pub fn load(outputs: &TrainOutputs, expected: &crate::model::ModelConfig) -> Result<Self> {
        let last = Checkpoint::load_matching(&outputs.last(), expected)?;
        if last.training.is_none() {
            return Err(VadError::Checkpoint(format!(
                "{} carries no optimizer state",
                outputs.last().display()
            )));
        }
        let best = Checkpoint::load_matching(&outputs.best(), expected)?;
        Ok(Self { last, best })
    }
}

/// Trains `model` in place and returns the best checkpoint with the report.
///
/// `model` ends up holding the last epoch's parameters.
pub fn train(
    model: &mut Model<f32>,
    train_videos: &[LoadedVideo],
    val_videos: &[LoadedVideo],
    loss_cfg: &crate::losses::LossConfig,
    cfg: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    resume: Option<Resume>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ctx = LossContext::<f32>::new(loss_cfg)?;
    let (t_len, n) = (model.config().clip_len, model.config().horizon);
    let clip_len = t_len + n;
    if train_videos.is_empty() {
        return Err(VadError::Config("training split is empty".into()));
    }
    if window_list(train_videos, clip_len, cfg.clip_stride, 0).is_empty() {
        return Err(VadError::Config(format!(
            "no training video has the T + n = {clip_len} frames a clip needs"
        )));
    }
    if let Some(out) = outputs {
        std::fs::create_dir_all(&out.dir).map_err(|e| VadError::io(&out.dir, e))?;
    }

    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let (mut state, mut best) = match resume {
        Some(r) => {
            let mut st = r.last.training.clone().expect("checked on load");
            st.optimizer.config = adam;
            let m = r.last.to_model()?;
            model.load_state(m.params().clone(), m.running_stats().to_vec())?;
            if !st.optimizer.matches(model.params().tensors()) {
                return Err(VadError::Checkpoint("optimizer state does not fit the model".into()));
            }
            (st, r.best)
        }
        None => (
            TrainingState {
                optimizer: Adam::new(adam, model.params().tensors()),
                best_val_loss: f64::INFINITY,
                best_epoch: 0,
                epochs_without_improvement: 0,
                history: Vec::new(),
                elapsed_seconds: 0.0,
            },
            Checkpoint::from_model(model, 0),
        ),
    };

    let started = Instant::now();
    let prior = state.elapsed_seconds;
    let elapsed = |s: &Instant| prior + s.elapsed().as_secs_f64();
    let first_epoch = state.history.last().map_or(1, |e| e.epoch + 1);
    let mut epoch_secs: Vec<f64> = Vec::new();

    for epoch in first_epoch..=cfg.max_epochs {
        if state.epochs_without_improvement >= cfg.patience {
            break;
        }
        if let (Some(budget), Some(&last)) = (cfg.max_seconds, epoch_secs.last()) {
            if elapsed(&started) + last > budget {
                log::info!("stopping before epoch {epoch}: time budget of {budget}s would be exceeded");
                break;
            }
        }
        let epoch_start = Instant::now();
        let seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64);
        let windows = window_list(train_videos, clip_len, cfg.clip_stride, seed);
        let mut sum = 0.0;
        for (b, chunk) in windows.chunks(cfg.batch_size).enumerate() {
            let frames = batch_frames(train_videos, chunk, clip_len)?;
            let loss = train_step(model, &mut state.optimizer, &frames, &ctx, cfg.grad_clip)?;
            if !loss.is_finite() {
                return Err(VadError::NonFinite {
                    epoch,
                    batch: b + 1,
                    value: loss,
                });
            }
            sum += loss * chunk.len() as f64;
        }
        let train_loss = sum / windows.len() as f64;
        let val_loss = evaluate_loss(model, val_videos, &ctx, cfg.clip_stride, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(VadError::NonFinite {
                epoch,
                batch: 0,
                value: val_loss,
            });
        }
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        state.history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let improved = val_loss < state.best_val_loss;
        if improved {
            state.best_val_loss = val_loss;
            state.best_epoch = epoch;
            state.epochs_without_improvement = 0;
            best = Checkpoint::from_model(model, epoch);
        } else {
            state.epochs_without_improvement += 1;
        }
        epoch_secs.push(epoch_start.elapsed().as_secs_f64());
        state.elapsed_seconds = elapsed(&started);

        if let Some(out) = outputs {
            if improved {
                best.save(&out.epoch(epoch))?;
                best.save(&out.best())?;
            }
            let mut last = Checkpoint::from_model(model, epoch);
            last.training = Some(state.clone());
            last.save(&out.last())?;
            write_atomic(&out.report(), report_from(&state).csv().as_bytes())?;
        }
    }

    if state.history.is_empty() {
        return Err(VadError::Config("training ran no epoch".into()));
    }
    Ok(TrainOutcome {
        best,
        report: report_from(&state),
    })
}

fn report_from(state: &TrainingState) -> TrainReport {
    TrainReport {
        epochs: state.history.clone(),
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val_loss,
        seconds: state.elapsed_seconds,
    }
}

/// Loads every record of a split into memory at the model's frame size.
pub fn load_videos(records: &[crate::data::VideoRecord], size: (usize, usize)) -> Result<Vec<LoadedVideo>> {
    records.iter().map(|r| LoadedVideo::load(r, size)).collect()
}

/// Reads a `report.csv` back.
pub fn read_report(path: &Path) -> Result<Vec<EpochStats>> {
    let text = std::fs::read_to_string(path).map_err(|e| VadError::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(VadError::Validation(format!("malformed report row {l:?}")));
            }
            Ok(EpochStats {
                epoch: parse_value("epoch", f[0])?,
                train_loss: parse_value("train_loss", f[1])?,
                val_loss: parse_value("val_loss", f[2])?,
            })
        })
        .collect()
}
