//! The bi-directional ConvLSTM auto-encoder.
//!
//! Each auto-encoder stacks, per stage, a stride-2 convolution with batch
//! normalization and leaky ReLU, an optional attention mask, and a ConvLSTM.
//! The decoder mirrors the stages in reverse with (higher-order) ConvLSTMs
//! followed by stride-2 transposed convolutions, and a `tanh` head maps back
//! to image space. With bi-directionality on, a second auto-encoder with its
//! own parameters reads the clip in reverse and a fusion head merges the two
//! predictions for each target frame.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_weights_var, AttentionVars};
use crate::cells::{step_var, CellVars};
use crate::config::{parse_bool, parse_list, parse_size, parse_value, KvConfig};
use crate::error::{Result, VadError};
use crate::graph::{Graph, NormStats, ObservedStats, Var};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Architecture and ablation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input clip length `T`.
    pub clip_len: usize,
    /// Prediction offset `n`: input `t` predicts frame `t + n`.
    pub horizon: usize,
    /// `(H, W)`
    pub frame_size: (usize, usize),
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub convlstm_kernel: usize,
    pub leaky_slope: f64,
    pub enable_bi: bool,
    pub enable_sho: bool,
    pub enable_att: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 grayscale, two stages, every mechanism on.
    pub fn desk() -> Self {
        Self {
            clip_len: 9,
            horizon: 7,
            frame_size: (32, 32),
            in_channels: 1,
            stage_channels: vec![32, 64],
            conv_kernel: 3,
            convlstm_kernel: 5,
            leaky_slope: 0.2,
            enable_bi: true,
            enable_sho: true,
            enable_att: true,
            seed: 0,
        }
    }

    /// 192x192 frames with three stages.
    pub fn full_scale(in_channels: usize) -> Self {
        Self {
            frame_size: (192, 192),
            in_channels,
            stage_channels: vec![64, 128, 128],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(VadError::Config(m));
        if self.clip_len == 0 || self.horizon == 0 {
            return err(format!(
                "model.T and model.n must be >= 1, got {} and {}",
                self.clip_len, self.horizon
            ));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return err("model.stage_channels must list at least one positive width".into());
        }
        if self.in_channels == 0 {
            return err("model.in_channels must be positive".into());
        }
        let div = 1usize << self.stage_channels.len();
        let (h, w) = self.frame_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return err(format!(
                "model.frame_size {h}x{w} is not divisible by 2^{} = {div}",
                self.stage_channels.len()
            ));
        }
        if self.conv_kernel % 2 == 0 || self.convlstm_kernel % 2 == 0 {
            return err(format!(
                "kernel sizes must be odd, got conv {} and convlstm {}",
                self.conv_kernel, self.convlstm_kernel
            ));
        }
        if !(self.leaky_slope >= 0.0) {
            return err("model.leaky_slope must be >= 0".into());
        }
        Ok(())
    }

    /// Spatial size of the deepest encoder stage.
    pub fn bottleneck_size(&self) -> (usize, usize) {
        let div = 1usize << self.stage_channels.len();
        (self.frame_size.0 / div, self.frame_size.1 / div)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("model.T", self.clip_len.to_string());
        kv.set("model.n", self.horizon.to_string());
        kv.set("model.frame_size", format!("{}x{}", self.frame_size.0, self.frame_size.1));
        kv.set("model.in_channels", self.in_channels.to_string());
        kv.set(
            "model.stage_channels",
            self.stage_channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("model.conv_kernel", self.conv_kernel.to_string());
        kv.set("model.convlstm_kernel", self.convlstm_kernel.to_string());
        kv.set("model.leaky_slope", self.leaky_slope.to_string());
        kv.set("model.bi", self.enable_bi.to_string());
        kv.set("model.sho", self.enable_sho.to_string());
        kv.set("model.att", self.enable_att.to_string());
        kv.set("model.seed", self.seed.to_string());
        kv
    }

    /// Applies every `model.*` entry of `kv`.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        for (key, v) in kv.section("model") {
            let full = format!("model.{key}");
            let k = full.as_str();
            match key {
                "T" => self.clip_len = parse_value(k, v)?,
                "n" => self.horizon = parse_value(k, v)?,
                "frame_size" => self.frame_size = parse_size(k, v)?,
                "in_channels" => self.in_channels = parse_value(k, v)?,
                "stage_channels" => self.stage_channels = parse_list(k, v)?,
                "conv_kernel" => self.conv_kernel = parse_value(k, v)?,
                "convlstm_kernel" => self.convlstm_kernel = parse_value(k, v)?,
                "leaky_slope" => self.leaky_slope = parse_value(k, v)?,
                "bi" => self.enable_bi = parse_bool(k, v)?,
                "sho" => self.enable_sho = parse_bool(k, v)?,
                "att" => self.enable_att = parse_bool(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                _ => return Err(VadError::Config(format!("unknown key `{full}`"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Keys whose values differ between two configurations.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = self.to_kv();
        let b = other.to_kv();
        a.iter()
            .filter(|(k, v)| b.get(k) != Some(*v))
            .map(|(k, v)| format!("{k} ({v} vs {})", b.get(k).unwrap_or("<missing>")))
            .collect()
    }
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn add(&mut self, name: String, t: Tensor<F>) -> ParamId {
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Running mean and variance of one normalization layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Real> RunningStats<F> {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    /// Exponential update with unbiased batch variance.
    pub fn update(&mut self, obs: &ObservedStats<F>) {
        let m = F::lit(NORM_MOMENTUM);
        let keep = F::one() - m;
        let unbias = if obs.count > 1 {
            F::from_usize(obs.count).unwrap() / F::from_usize(obs.count - 1).unwrap()
        } else {
            F::one()
        };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * obs.mean[c];
            self.var[c] = keep * self.var[c] + m * obs.var[c] * unbias;
        }
    }

    fn cast<G: Real>(&self) -> RunningStats<G> {
        RunningStats {
            mean: self.mean.iter().map(|v| G::lit(v.to_f64().unwrap())).collect(),
            var: self.var.iter().map(|v| G::lit(v.to_f64().unwrap())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Clone, Copy, Debug)]
struct AttentionLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct CellLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: ConvLayer,
    norm: NormLayer,
    attention: Option<AttentionLayer>,
    cell: CellLayer,
    channels: usize,
    size: (usize, usize),
}

#[derive(Clone, Debug)]
struct DecoderStage {
    /// Encoder stage this stage mirrors.
    mirror: usize,
    cell: CellLayer,
    higher_order: bool,
    deconv: ConvLayer,
    norm: NormLayer,
}

#[derive(Clone, Debug)]
struct AutoEncoder {
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    head: ConvLayer,
}

struct Builder<'a, F> {
    params: &'a mut ParamStore<F>,
    running: &'a mut Vec<RunningStats<F>>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Real> Builder<'_, F> {
    fn uniform(&mut self, name: String, shape: [usize; 4], fan_in: usize) -> ParamId {
        let s = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-s..=s)));
        self.params.add(name, t)
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvLayer {
        let fan_in = c_in * k * k;
        ConvLayer {
            weight: self.uniform(format!("{name}.weight"), [c_out, c_in, k, k], fan_in),
            bias: self.uniform(format!("{name}.bias"), [1, c_out, 1, 1], fan_in),
        }
    }

    fn deconv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> ConvLayer {
        let fan_in = c_out * k * k;
        ConvLayer {
            weight: self.uniform(format!("{name}.weight"), [c_in, c_out, k, k], fan_in),
            bias: self.uniform(format!("{name}.bias"), [1, c_out, 1, 1], fan_in),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormLayer {
        let gamma = self.params.add(format!("{name}.gamma"), Tensor::full([1, c, 1, 1], F::one()));
        let beta = self.params.add(format!("{name}.beta"), Tensor::zeros([1, c, 1, 1]));
        self.running.push(RunningStats::new(c));
        NormLayer {
            gamma,
            beta,
            stats: self.running.len() - 1,
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> AttentionLayer {
        let k = crate::attention::ATTENTION_KERNEL;
        let mid = c;
        AttentionLayer {
            w1: self.uniform(format!("{name}.w1"), [mid, 2 * c, k, k], 2 * c * k * k),
            b1: self.uniform(format!("{name}.b1"), [1, mid, 1, 1], 2 * c * k * k),
            w2: self.uniform(format!("{name}.w2"), [c, mid, k, k], mid * k * k),
        }
    }

    fn cell(&mut self, name: &str, input: usize, hidden: usize, encoder: usize, k: usize) -> CellLayer {
        let stack = input + hidden + encoder;
        let fan_in = stack * k * k;
        CellLayer {
            weight: self.uniform(format!("{name}.weight"), [4 * hidden, stack, k, k], fan_in),
            bias: self.uniform(format!("{name}.bias"), [1, 4 * hidden, 1, 1], fan_in),
        }
    }

    fn autoencoder(&mut self, prefix: &str, cfg: &ModelConfig) -> AutoEncoder {
        let stages = &cfg.stage_channels;
        let mut encoder = Vec::with_capacity(stages.len());
        let mut c_in = cfg.in_channels;
        let (mut h, mut w) = cfg.frame_size;
        for (s, &c) in stages.iter().enumerate() {
            h /= 2;
            w /= 2;
            let name = format!("{prefix}.enc{s}");
            encoder.push(EncoderStage {
                conv: self.conv(&format!("{name}.conv"), c_in, c, cfg.conv_kernel),
                norm: self.norm(&format!("{name}.norm"), c),
                attention: cfg.enable_att.then(|| self.attention(&format!("{name}.att"), c)),
                cell: self.cell(&format!("{name}.cell"), c, c, 0, cfg.convlstm_kernel),
                channels: c,
                size: (h, w),
            });
            c_in = c;
        }
        let mut decoder = Vec::with_capacity(stages.len());
        for s in (0..stages.len()).rev() {
            let c = stages[s];
            let out = if s > 0 { stages[s - 1] } else { stages[0] };
            let name = format!("{prefix}.dec{s}");
            let enc_ch = if cfg.enable_sho { c } else { 0 };
            decoder.push(DecoderStage {
                mirror: s,
                cell: self.cell(&format!("{name}.cell"), c, c, enc_ch, cfg.convlstm_kernel),
                higher_order: cfg.enable_sho,
                deconv: self.deconv(&format!("{name}.deconv"), c, out, cfg.conv_kernel),
                norm: self.norm(&format!("{name}.norm"), out),
            });
        }
        let head = self.conv(&format!("{prefix}.head"), stages[0], cfg.in_channels, cfg.conv_kernel);
        AutoEncoder {
            encoder,
            decoder,
            head,
        }
    }
}

/// Built network: structure plus parameters and normalization statistics.
#[derive(Clone, Debug)]
pub struct Model<F> {
    config: ModelConfig,
    params: ParamStore<F>,
    running: Vec<RunningStats<F>>,
    forward_ae: AutoEncoder,
    backward_ae: Option<AutoEncoder>,
    fusion: Option<ConvLayer>,
}

/// Builds a model with parameters drawn deterministically from `config.seed`.
pub fn build_model<F: Real>(config: &ModelConfig) -> Result<Model<F>> {
    Model::new(config)
}

impl<F: Real> Model<F> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut running = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            params: &mut params,
            running: &mut running,
            rng: &mut rng,
        };
        let forward_ae = b.autoencoder("fwd", config);
        let backward_ae = config.enable_bi.then(|| b.autoencoder("bwd", config));
        let fusion = config
            .enable_bi
            .then(|| b.conv("fusion", 2 * config.in_channels, config.in_channels, config.conv_kernel));
        Ok(Self {
            config: config.clone(),
            params,
            running,
            forward_ae,
            backward_ae,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<F>] {
        &self.running
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Replaces parameters and statistics after checking names and shapes.
    pub fn load_state(&mut self, params: ParamStore<F>, running: Vec<RunningStats<F>>) -> Result<()> {
        if params.names != self.params.names {
            return Err(VadError::Checkpoint("parameter names do not match the model layout".into()));
        }
        for ((name, a), b) in self.params.names.iter().zip(&self.params.tensors).zip(&params.tensors) {
            if a.shape() != b.shape() {
                return Err(VadError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, checkpoint has {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if running.len() != self.running.len()
            || running.iter().zip(&self.running).any(|(a, b)| a.mean.len() != b.mean.len())
        {
            return Err(VadError::Checkpoint("normalization statistics do not match the model layout".into()));
        }
        self.params = params;
        self.running = running;
        Ok(())
    }

    pub fn apply_observed(&mut self, observed: &[(usize, ObservedStats<F>)]) {
        for (idx, obs) in observed {
            self.running[*idx].update(obs);
        }
    }

    /// Same model in another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            running: self.running.iter().map(RunningStats::cast).collect(),
            forward_ae: self.forward_ae.clone(),
            backward_ae: self.backward_ae.clone(),
            fusion: self.fusion,
        }
    }

    /// A copy whose backward pass reuses the forward auto-encoder's parameters.
    pub fn with_shared_directions(&self) -> Self {
        let mut m = self.clone();
        if m.backward_ae.is_some() {
            m.backward_ae = Some(m.forward_ae.clone());
        }
        m
    }
}

/// Encoder hidden states and attention masks, indexed `[stage][step]` in
/// processing order.
#[derive(Clone, Debug)]
pub struct EncoderTrace<T> {
    pub hidden: Vec<Vec<T>>,
    pub masks: Vec<Vec<Option<T>>>,
}

/// Predictions aligned by ascending target index `1 + n ..= T + n`.
#[derive(Clone, Debug)]
pub struct PredictionSet<T> {
    pub forward: Vec<T>,
    pub backward: Option<Vec<T>>,
    pub fused: Vec<T>,
}

/// One forward computation over a model on a fresh graph.
pub struct Session<'m, F: Real> {
    model: &'m Model<F>,
    pub graph: Graph<F>,
    params: Vec<Var>,
    training: bool,
    observed: Vec<(usize, ObservedStats<F>)>,
}

impl<'m, F: Real> Session<'m, F> {
    /// `training` selects batch statistics for normalization; `track_grads`
    /// makes parameters differentiable leaves.
    pub fn new(model: &'m Model<F>, training: bool, track_grads: bool) -> Self {
        let mut graph = Graph::new();
        let params = model
            .params
            .tensors
            .iter()
            .map(|t| {
                if track_grads {
                    graph.variable(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Self {
            model,
            graph,
            params,
            training,
            observed: Vec::new(),
        }
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Batch statistics seen by each normalization layer, in call order.
    pub fn take_observed(&mut self) -> Vec<(usize, ObservedStats<F>)> {
        std::mem::take(&mut self.observed)
    }

    fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    fn cell_vars(&self, layer: CellLayer) -> CellVars {
        CellVars {
            weight: self.p(layer.weight),
            bias: self.p(layer.bias),
        }
    }

    fn norm(&mut self, x: Var, layer: NormLayer) -> Result<Var> {
        let stats = if self.training {
            NormStats::Batch { eps: F::lit(NORM_EPS) }
        } else {
            let r = &self.model.running[layer.stats];
            NormStats::Fixed {
                mean: r.mean.clone(),
                var: r.var.clone(),
                eps: F::lit(NORM_EPS),
            }
        };
        let (y, obs) = self
            .graph
            .batch_norm(x, self.p(layer.gamma), self.p(layer.beta), &stats)?;
        if let Some(obs) = obs {
            self.observed.push((layer.stats, obs));
        }
        Ok(y)
    }

    fn conv_norm_act(&mut self, x: Var, conv: ConvLayer, norm: NormLayer, transposed: bool) -> Result<Var> {
        let k = self.model.config.conv_kernel;
        let pad = k / 2;
        let y = if transposed {
            self.graph
                .deconv2d(x, self.p(conv.weight), Some(self.p(conv.bias)), 2, pad, 1)?
        } else {
            self.graph.conv2d(x, self.p(conv.weight), Some(self.p(conv.bias)), 2, pad)?
        };
        let y = self.norm(y, norm)?;
        Ok(self.graph.leaky_relu(y, F::lit(self.model.config.leaky_slope)))
    }

    fn zeros_like_state(&mut self, batch: usize, c: usize, (h, w): (usize, usize)) -> Var {
        self.graph.constant(Tensor::zeros([batch, c, h, w]))
    }

    fn check_frames(&self, frames: &[Var]) -> Result<usize> {
        let cfg = &self.model.config;
        if frames.len() != cfg.clip_len {
            return Err(VadError::Contract(format!(
                "clip has {} frames, the model expects T = {}",
                frames.len(),
                cfg.clip_len
            )));
        }
        let first = self.graph.value(frames[0]).shape();
        let want = [first[0], cfg.in_channels, cfg.frame_size.0, cfg.frame_size.1];
        for &f in frames {
            if self.graph.value(f).shape() != want {
                return Err(VadError::Shape(format!(
                    "frame {:?} does not match the model's {want:?}",
                    self.graph.value(f).shape()
                )));
            }
        }
        Ok(first[0])
    }

    /// Runs one auto-encoder over `frames` (given in index order) in the
    /// requested temporal direction.
    ///
    /// Returns predictions aligned by ascending target index and the trace in
    /// processing order.
    pub fn direction_pass(&mut self, frames: &[Var], direction: Direction) -> Result<(Vec<Var>, EncoderTrace<Var>)> {
        let ae = match direction {
            Direction::Forward => &self.model.forward_ae,
            Direction::Backward => self.model.backward_ae.as_ref().unwrap_or(&self.model.forward_ae),
        }
        .clone();
        self.run_autoencoder(&ae, frames, direction)
    }

    fn run_autoencoder(
        &mut self,
        ae: &AutoEncoder,
        frames: &[Var],
        direction: Direction,
    ) -> Result<(Vec<Var>, EncoderTrace<Var>)> {
        let batch = self.check_frames(frames)?;
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..frames.len()).collect(),
            Direction::Backward => (0..frames.len()).rev().collect(),
        };
        let stages = ae.encoder.len();
        let mut enc_state = Vec::with_capacity(stages);
        let mut dec_state = vec![None; stages];
        for st in &ae.encoder {
            let h = self.zeros_like_state(batch, st.channels, st.size);
            enc_state.push((h, h));
        }
        for (j, st) in ae.decoder.iter().enumerate() {
            let e = &ae.encoder[st.mirror];
            let h = self.zeros_like_state(batch, e.channels, e.size);
            dec_state[j] = Some((h, h));
        }
        let mut prev_features: Vec<Option<Var>> = vec![None; stages];
        let mut trace = EncoderTrace {
            hidden: vec![Vec::with_capacity(frames.len()); stages],
            masks: vec![Vec::with_capacity(frames.len()); stages],
        };
        let mut preds = Vec::with_capacity(frames.len());

        for &t in &order {
            let mut input = frames[t];
            let mut masks = Vec::with_capacity(stages);
            for (s, st) in ae.encoder.iter().enumerate() {
                let feat = self.conv_norm_act(input, st.conv, st.norm, false)?;
                let mask = match st.attention {
                    Some(att) => {
                        // the first step compares the features with themselves
                        let prev = prev_features[s].unwrap_or(feat);
                        let vars = AttentionVars {
                            w1: self.p(att.w1),
                            b1: self.p(att.b1),
                            w2: self.p(att.w2),
                        };
                        let z = attention_weights_var(&mut self.graph, feat, prev, vars)?;
                        Some(self.graph.min_max_mask(z))
                    }
                    None => None,
                };
                prev_features[s] = Some(feat);
                let x = match mask {
                    Some(a) => self.graph.mul(feat, a)?,
                    None => feat,
                };
                let (h, c) = enc_state[s];
                let cell = self.cell_vars(st.cell);
                let out = step_var(&mut self.graph, x, h, c, None, cell)?;
                enc_state[s] = (out.h, out.c);
                trace.hidden[s].push(out.h);
                trace.masks[s].push(mask);
                masks.push(mask);
                input = out.h;
            }

            for (j, st) in ae.decoder.iter().enumerate() {
                let s = st.mirror;
                let x = match masks[s] {
                    Some(a) => self.graph.mul(input, a)?,
                    None => input,
                };
                let (h, c) = dec_state[j].expect("initialized above");
                let h_enc = st.higher_order.then_some(enc_state[s].0);
                let cell = self.cell_vars(st.cell);
                let out = step_var(&mut self.graph, x, h, c, h_enc, cell)?;
                dec_state[j] = Some((out.h, out.c));
                input = self.conv_norm_act(out.h, st.deconv, st.norm, true)?;
            }

            let pad = self.model.config.conv_kernel / 2;
            let head = self
                .graph
                .conv2d(input, self.p(ae.head.weight), Some(self.p(ae.head.bias)), 1, pad)?;
            preds.push(self.graph.tanh(head));
        }

        if direction == Direction::Backward {
            preds.reverse();
        }
        Ok((preds, trace))
    }

    /// Both passes (when enabled) and the fused predictions.
    pub fn predict(&mut self, frames: &[Var]) -> Result<PredictionSet<Var>> {
        let (forward, _) = self.direction_pass(frames, Direction::Forward)?;
        let Some(fusion) = self.model.fusion else {
            return Ok(PredictionSet {
                fused: forward.clone(),
                forward,
                backward: None,
            });
        };
        let (backward, _) = self.direction_pass(frames, Direction::Backward)?;
        let pad = self.model.config.conv_kernel / 2;
        let mut fused = Vec::with_capacity(forward.len());
        for (&f, &b) in forward.iter().zip(&backward) {
            let cat = self.graph.concat_channels(&[f, b])?;
            let y = self
                .graph
                .conv2d(cat, self.p(fusion.weight), Some(self.p(fusion.bias)), 1, pad)?;
            fused.push(self.graph.tanh(y));
        }
        Ok(PredictionSet {
            forward,
            backward: Some(backward),
            fused,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.graph.value(v)
    }
}

fn constants<F: Real>(g: &mut Graph<F>, frames: &[Tensor<F>]) -> Vec<Var> {
    frames.iter().map(|f| g.constant(f.clone())).collect()
}

/// Inference-mode single-direction pass over `clip` (`T` frames, each `[B, C, H, W]`).
///
/// Predictions are aligned by ascending target index.
pub fn forward_pass<F: Real>(
    model: &Model<F>,
    clip: &[Tensor<F>],
    direction: Direction,
) -> Result<(Vec<Tensor<F>>, EncoderTrace<Tensor<F>>)> {
    let mut sess = Session::new(model, false, false);
    let frames = constants(&mut sess.graph, clip);
    let (preds, trace) = sess.direction_pass(&frames, direction)?;
    let g = &sess.graph;
    Ok((
        preds.iter().map(|&v| g.value(v).clone()).collect(),
        EncoderTrace {
            hidden: trace
                .hidden
                .iter()
                .map(|s| s.iter().map(|&v| g.value(v).clone()).collect())
                .collect(),
            masks: trace
                .masks
                .iter()
                .map(|s| s.iter().map(|m| m.map(|v| g.value(v).clone())).collect())
                .collect(),
        },
    ))
}

/// Inference-mode predictions for `clip`.
pub fn predict<F: Real>(model: &Model<F>, clip: &[Tensor<F>]) -> Result<PredictionSet<Tensor<F>>> {
    let mut sess = Session::new(model, false, false);
    let frames = constants(&mut sess.graph, clip);
    let set = sess.predict(&frames)?;
    let g = &sess.graph;
    let grab = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
    Ok(PredictionSet {
        forward: grab(&set.forward),
        backward: set.backward.as_deref().map(grab),
        fused: grab(&set.fused),
    })
}

/// Serialized model state, optionally with training progress for resuming.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub running: Vec<RunningStats<f32>>,
    pub epoch: usize,
    pub training: Option<crate::trainer::TrainingState>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VADCKPT1";

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, epoch: usize) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            running: model.running.clone(),
            epoch,
            training: None,
        }
    }

    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(&self.config)?;
        m.load_state(self.params.clone(), self.running.clone())?;
        Ok(m)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".cfg");
        PathBuf::from(s)
    }

    /// Writes the binary blob and its plain-text config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob = CHECKPOINT_MAGIC.to_vec();
        bincode::serialize_into(&mut blob, self)
            .map_err(|e| VadError::Checkpoint(format!("cannot serialize: {e}")))?;
        write_atomic(path, &blob)?;
        write_atomic(&Self::sidecar_path(path), self.config.to_kv().to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| VadError::io(path, e))?;
        let body = bytes
            .strip_prefix(CHECKPOINT_MAGIC.as_slice())
            .ok_or_else(|| VadError::Checkpoint(format!("{} is not a checkpoint", path.display())))?;
        let ckpt: Self = bincode::deserialize(body)
            .map_err(|e| VadError::Checkpoint(format!("cannot decode {}: {e}", path.display())))?;
        let sidecar = Self::sidecar_path(path);
        if sidecar.exists() {
            let cfg = ModelConfig::from_kv(&KvConfig::load(&sidecar)?)?;
            let diff = cfg.diff(&ckpt.config);
            if !diff.is_empty() {
                return Err(VadError::Checkpoint(format!(
                    "sidecar {} disagrees with the checkpoint: {}",
                    sidecar.display(),
                    diff.join(", ")
                )));
            }
        }
        Ok(ckpt)
    }

    /// Loads a checkpoint that must have been produced under `expected`.
    pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let diff = expected.diff(&ckpt.config);
        if !diff.is_empty() {
            return Err(VadError::Config(format!(
                "checkpoint {} was built with a different model config: {}",
                path.display(),
                diff.join(", ")
            )));
        }
        Ok(ckpt)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| VadError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| VadError::io(&tmp, e))?;
    f.sync_all().map_err(|e| VadError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| VadError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(bi: bool, sho: bool, att: bool) -> ModelConfig {
        ModelConfig {
            clip_len: 3,
            horizon: 2,
            frame_size: (8, 8),
            in_channels: 1,
            stage_channels: vec![2, 3],
            enable_bi: bi,
            enable_sho: sho,
            enable_att: att,
            seed: 5,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn desk_config_bottleneck_is_eight() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.bottleneck_size(), (8, 8));
        ModelConfig::full_scale(3).validate().unwrap();
    }

    #[test]
    fn indivisible_frame_size_is_config_error() {
        let cfg = ModelConfig {
            frame_size: (30, 32),
            ..ModelConfig::desk()
        };
        assert!(matches!(build_model::<f32>(&cfg), Err(VadError::Config(_))));
    }

    #[test]
    fn kv_round_trip_and_diff() {
        let cfg = tiny(true, false, true);
        let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let other = ModelConfig { horizon: 4, ..cfg.clone() };
        let d = cfg.diff(&other);
        assert_eq!(d.len(), 1);
        assert!(d[0].starts_with("model.n"));
    }

    #[test]
    fn sho_toggle_changes_decoder_kernel_shapes() {
        let with = build_model::<f32>(&tiny(false, true, false)).unwrap();
        let without = build_model::<f32>(&tiny(false, false, false)).unwrap();
        let a = with.params().by_name("fwd.dec1.cell.weight").unwrap().shape();
        let b = without.params().by_name("fwd.dec1.cell.weight").unwrap().shape();
        assert_eq!(a, [12, 9, 5, 5]);
        assert_eq!(b, [12, 6, 5, 5]);
    }

    #[test]
    fn equal_seeds_build_identical_parameters() {
        let a = build_model::<f32>(&tiny(true, true, true)).unwrap();
        let b = build_model::<f32>(&tiny(true, true, true)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_model::<f32>(&ModelConfig { seed: 6, ..tiny(true, true, true) }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn wrong_clip_length_is_contract_error() {
        let m = build_model::<f32>(&tiny(true, true, true)).unwrap();
        let clip = vec![Tensor::zeros([1, 1, 8, 8]); 2];
        assert!(matches!(predict(&m, &clip), Err(VadError::Contract(_))));
    }

    #[test]
    fn zero_clip_smoke_and_output_range() {
        let m = build_model::<f32>(&tiny(true, true, true)).unwrap();
        let clip = vec![Tensor::zeros([2, 1, 8, 8]); 3];
        let set = predict(&m, &clip).unwrap();
        assert_eq!(set.fused.len(), 3);
        assert_eq!(set.backward.as_ref().unwrap().len(), 3);
        for f in &set.fused {
            assert_eq!(f.shape(), [2, 1, 8, 8]);
            assert!(f.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let (_, trace) = forward_pass(&m, &clip, Direction::Forward).unwrap();
        assert_eq!(trace.hidden[0][0].shape(), [2, 2, 4, 4]);
        assert_eq!(trace.hidden[1][2].shape(), [2, 3, 2, 2]);
        assert_eq!(trace.masks[1][0].as_ref().unwrap().shape(), [2, 3, 2, 2]);
    }

    #[test]
    fn unidirectional_fused_equals_forward() {
        let m = build_model::<f32>(&tiny(false, true, true)).unwrap();
        let clip: Vec<_> = (0..3).map(|t| Tensor::full([1, 1, 8, 8], 0.1 * t as f32)).collect();
        let set = predict(&m, &clip).unwrap();
        assert!(set.backward.is_none());
        assert_eq!(set.fused, set.forward);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_model::<f32>(&tiny(true, true, true)).unwrap();
        Checkpoint::from_model(&m, 3).save(&path).unwrap();
        assert!(Checkpoint::sidecar_path(&path).exists());
        let back = Checkpoint::load_matching(&path, m.config()).unwrap();
        assert_eq!(back.epoch, 3);
        assert_eq!(back.to_model().unwrap().params(), m.params());
        let other = ModelConfig { horizon: 1, ..m.config().clone() };
        let err = Checkpoint::load_matching(&path, &other).unwrap_err().to_string();
        assert!(err.contains("model.n"), "{err}");
    }
}
