//! Oracle suites: gradient checks, reduction identities, independent SSIM and
//! AUC references, score normalization and model-level structure checks.
//!
//! Every check reports the observed deviation next to its tolerance so a
//! failure can be read without rerunning anything.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_weights_var, min_max_mask, AttentionParams, AttentionVars};
use crate::cells::{conv_lstm_step, sho_conv_lstm_step, step_var, CellParams, CellState, CellVars};
use crate::error::{Result, VadError};
use crate::gradcheck::{check_gradients_scaled, random_tensor};
use crate::graph::Graph;
use crate::losses::{l1_loss, mixed_loss_var, ssim_mean, GaussianWindow, LossConfig, LossContext};
use crate::model::{build_model, forward_pass, predict, Direction, Model, ModelConfig, Session};
use crate::scoring::{normalize_scores, roc_auc};
use crate::tensor::Tensor;
use crate::trainer::clip_loss_var;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 10;
pub const CELL_REDUCTION_TOL: f64 = 1e-12;
pub const L1_REDUCTION_TOL: f64 = 1e-12;
pub const SSIM_DIRECT_TOL: f64 = 1e-6;
pub const SSIM_DIRECT_PAIRS: usize = 20;
pub const SSIM_CONSTANT_TOL: f64 = 1e-9;
pub const AUC_TOL: f64 = 1e-9;
pub const AUC_INSTANCES: usize = 200;
pub const MODEL_REDUCTION_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    Grad,
    Reduction,
    Ssim,
    Auc,
    Normalization,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Grad, Suite::Reduction, Suite::Ssim, Suite::Auc, Suite::Normalization, Suite::Model];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Grad => "grad",
            Suite::Reduction => "reduction",
            Suite::Ssim => "ssim",
            Suite::Auc => "auc",
            Suite::Normalization => "normalization",
            Suite::Model => "model",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = VadError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            VadError::Config(format!(
                "unknown suite {s:?}; valid suites: {}",
                Self::ALL.map(|k| k.name()).join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Scales analytic gradients by 1.01 in the gradient suite; every
    /// gradient check must then fail.
    pub corrupt_gradient: bool,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: Suite,
    pub property: String,
    pub passed: bool,
    /// Worst deviation seen.
    pub observed: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}.{}: observed {:.3e}, tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.property,
            self.observed,
            self.tolerance
        )?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

fn check(suite: Suite, property: &str, observed: f64, tolerance: f64, detail: impl Into<String>) -> CheckResult {
    CheckResult {
        suite,
        property: property.to_string(),
        passed: observed <= tolerance,
        observed,
        tolerance,
        detail: detail.into(),
    }
}

/// Runs the named suites in order.
pub fn run_suites(suites: &[Suite], opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &s in suites {
        out.extend(run_suite(s, opts)?);
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (suite as u64 + 1).wrapping_mul(0x2545_F491_4F6C_DD1D));
    match suite {
        Suite::Grad => grad_suite(&mut rng, opts.corrupt_gradient),
        Suite::Reduction => reduction_suite(&mut rng),
        Suite::Ssim => ssim_suite(&mut rng),
        Suite::Auc => Ok(vec![auc_suite(&mut rng)?]),
        Suite::Normalization => Ok(normalization_suite(&mut rng)),
        Suite::Model => model_suite(opts.seed),
    }
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[crate::graph::Var]) -> Result<crate::graph::Var>>;

fn grad_suite(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<Vec<CheckResult>> {
    let scale = if corrupt { 1.01 } else { 1.0 };
    let ssim_window = Arc::new(GaussianWindow::<f64>::gaussian(11, 1.5)?);
    let loss_ctx = LossContext::<f64>::new(&LossConfig::default())?;
    let constants = LossConfig::default().constants::<f64>();

    type Instance = (Vec<Tensor<f64>>, Builder);
    let cases: Vec<(&str, Box<dyn Fn(&mut ChaCha8Rng) -> Instance>)> = vec![
        (
            "convlstm_step",
            Box::new(|rng| {
                let p = CellParams::<f64>::random(2, 3, 0, 3, rng);
                let inputs = vec![
                    random_tensor([2, 2, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                    p.weight,
                    p.bias,
                    random_tensor([2, 3, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                ];
                let build: Builder = Box::new(|g, v| {
                    let out = step_var(g, v[0], v[1], v[2], None, CellVars { weight: v[3], bias: v[4] })?;
                    cell_readout(g, out.h, out.c, v[5], v[6])
                });
                (inputs, build)
            }),
        ),
        (
            "sho_convlstm_step",
            Box::new(|rng| {
                let p = CellParams::<f64>::random(2, 3, 3, 3, rng);
                let inputs = vec![
                    random_tensor([2, 2, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                    p.weight,
                    p.bias,
                    random_tensor([2, 3, 5, 5], rng),
                    random_tensor([2, 3, 5, 5], rng),
                ];
                let build: Builder = Box::new(|g, v| {
                    let out = step_var(g, v[0], v[1], v[2], Some(v[3]), CellVars { weight: v[4], bias: v[5] })?;
                    cell_readout(g, out.h, out.c, v[6], v[7])
                });
                (inputs, build)
            }),
        ),
        (
            "attention_weights",
            Box::new(|rng| {
                let p = AttentionParams::<f64>::random(2, 2, rng);
                let inputs = vec![
                    random_tensor([2, 2, 4, 4], rng),
                    random_tensor([2, 2, 4, 4], rng),
                    p.w1,
                    p.b1,
                    p.w2,
                    random_tensor([2, 2, 4, 4], rng),
                ];
                let build: Builder = Box::new(|g, v| {
                    let z = attention_weights_var(g, v[0], v[1], AttentionVars { w1: v[2], b1: v[3], w2: v[4] })?;
                    let m = g.mul(z, v[5])?;
                    Ok(g.mean(m))
                });
                (inputs, build)
            }),
        ),
        (
            "attention_mask",
            Box::new(|rng| {
                let inputs = vec![random_tensor([2, 2, 4, 4], rng), random_tensor([2, 2, 4, 4], rng)];
                let build: Builder = Box::new(|g, v| {
                    let a = g.min_max_mask(v[0]);
                    let m = g.mul(a, v[1])?;
                    Ok(g.mean(m))
                });
                (inputs, build)
            }),
        ),
        (
            "ssim_loss",
            Box::new({
                let win = Arc::clone(&ssim_window);
                move |rng| {
                    let inputs = vec![random_tensor([1, 1, 12, 12], rng), random_tensor([1, 1, 12, 12], rng)];
                    let win = Arc::clone(&win);
                    let build: Builder = Box::new(move |g, v| {
                        let s = g.ssim(v[0], v[1], Arc::clone(&win), constants)?;
                        let one = g.constant(Tensor::scalar(1.0));
                        g.sub(one, s)
                    });
                    (inputs, build)
                }
            }),
        ),
        (
            "l1_loss",
            Box::new(|rng| {
                let inputs = vec![random_tensor([2, 1, 6, 6], rng), random_tensor([2, 1, 6, 6], rng)];
                let build: Builder = Box::new(|g, v| {
                    let d = g.sub(v[0], v[1])?;
                    let a = g.abs(d);
                    Ok(g.mean(a))
                });
                (inputs, build)
            }),
        ),
        (
            "mixed_loss",
            Box::new({
                let ctx = loss_ctx.clone();
                move |rng| {
                    let inputs = vec![random_tensor([1, 1, 12, 12], rng), random_tensor([1, 1, 12, 12], rng)];
                    let ctx = ctx.clone();
                    let build: Builder = Box::new(move |g, v| mixed_loss_var(g, v[0], v[1], &ctx));
                    (inputs, build)
                }
            }),
        ),
    ];

    let mut results = Vec::new();
    for (name, make) in cases {
        let mut worst = 0.0f64;
        let mut entries = 0;
        for _ in 0..GRAD_INSTANCES {
            let (inputs, build) = make(rng);
            let report = check_gradients_scaled(&inputs, GRAD_EPS, scale, |g, v| build(g, v))?;
            worst = worst.max(report.max_rel_error);
            entries += report.checked_entries;
        }
        results.push(check(
            Suite::Grad,
            name,
            worst,
            GRAD_TOL,
            format!("{GRAD_INSTANCES} instances, {entries} entries, worst relative error"),
        ));
    }
    Ok(results)
}

fn cell_readout(
    g: &mut Graph<f64>,
    h: crate::graph::Var,
    c: crate::graph::Var,
    rh: crate::graph::Var,
    rc: crate::graph::Var,
) -> Result<crate::graph::Var> {
    let a = g.mul(h, rh)?;
    let b = g.mul(c, rc)?;
    let s = g.add(a, b)?;
    Ok(g.mean(s))
}

fn reduction_suite(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut cell_diff = 0.0f64;
    for _ in 0..10 {
        let mut p = CellParams::<f64>::random(2, 3, 4, 5, rng);
        p.zero_encoder_slices();
        let x = random_tensor([2, 2, 6, 6], rng);
        let prev = CellState {
            h: random_tensor([2, 3, 6, 6], rng),
            c: random_tensor([2, 3, 6, 6], rng),
        };
        let e = random_tensor([2, 4, 6, 6], rng);
        let sho = sho_conv_lstm_step(&x, &prev, &e, &p)?;
        let plain = conv_lstm_step(&x, &prev, &p.without_encoder())?;
        cell_diff = cell_diff.max(sho.h.max_abs_diff(&plain.h)).max(sho.c.max_abs_diff(&plain.c));
    }

    let mut l1_diff = 0.0f64;
    let identity = Arc::new(GaussianWindow::<f64>::identity());
    for _ in 0..10 {
        let p = random_tensor([2, 1, 12, 12], rng);
        let q = random_tensor([2, 1, 12, 12], rng);
        let mut g = Graph::new();
        let (a, b) = (g.constant(p.clone()), g.constant(q.clone()));
        let d = g.sub(a, b)?;
        let e = g.abs(d);
        let f = g.blur(e, Arc::clone(&identity));
        let m = g.mean(f);
        l1_diff = l1_diff.max((g.value(m).to_scalar() - l1_loss(&p, &q)?).abs());
    }

    // Dyadic weights and integer shifts keep z + c exact, so the masks must
    // agree bit for bit.
    let mut shift_mismatch = 0usize;
    for _ in 0..20 {
        let z = Tensor::from_fn([2, 3, 4, 4], |_| rng.gen_range(-128i32..=128) as f64 / 64.0);
        let c = rng.gen_range(-5i32..=5) as f64;
        let a = min_max_mask(&z);
        let b = min_max_mask(&z.map(|v| v + c));
        shift_mismatch += a.0.data().iter().zip(b.0.data()).filter(|(x, y)| x != y).count();
    }

    Ok(vec![
        check(
            Suite::Reduction,
            "sho_zeroed_slices_equals_convlstm",
            cell_diff,
            CELL_REDUCTION_TOL,
            "max abs diff over 10 instances",
        ),
        check(
            Suite::Reduction,
            "identity_filter_l1_equals_plain_l1",
            l1_diff,
            L1_REDUCTION_TOL,
            "max abs diff over 10 instances",
        ),
        check(
            Suite::Reduction,
            "mask_shift_invariance",
            shift_mismatch as f64,
            0.0,
            "mismatching mask entries over 20 instances",
        ),
    ])
}

/// Windowed SSIM evaluated straight from the definition: a separately built
/// 2-D Gaussian and two-pass moments at every valid window placement.
pub fn ssim_direct(p: &Tensor<f64>, q: &Tensor<f64>, size: usize, sigma: f64, c1: f64, c2: f64) -> f64 {
    let r = (size / 2) as f64;
    let mut w = vec![0.0; size * size];
    for dy in 0..size {
        for dx in 0..size {
            let d2 = (dy as f64 - r).powi(2) + (dx as f64 - r).powi(2);
            w[dy * size + dx] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);

    let [n, ch, h, wd] = p.shape();
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in 0..n {
        for c in 0..ch {
            for y in 0..=h - size {
                for x in 0..=wd - size {
                    let at = |t: &Tensor<f64>, dy: usize, dx: usize| t.at(b, c, y + dy, x + dx);
                    let (mut mp, mut mq) = (0.0, 0.0);
                    for dy in 0..size {
                        for dx in 0..size {
                            mp += w[dy * size + dx] * at(p, dy, dx);
                            mq += w[dy * size + dx] * at(q, dy, dx);
                        }
                    }
                    let (mut vp, mut vq, mut cov) = (0.0, 0.0, 0.0);
                    for dy in 0..size {
                        for dx in 0..size {
                            let (a, bq) = (at(p, dy, dx) - mp, at(q, dy, dx) - mq);
                            let k = w[dy * size + dx];
                            vp += k * a * a;
                            vq += k * bq * bq;
                            cov += k * a * bq;
                        }
                    }
                    sum += (2.0 * mp * mq + c1) * (2.0 * cov + c2) / ((mp * mp + mq * mq + c1) * (vp + vq + c2));
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn ssim_suite(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let cfg = LossConfig::default();
    let win = GaussianWindow::<f64>::gaussian(cfg.ssim_window, cfg.ssim_sigma)?;
    let k = cfg.constants::<f64>();
    let mut direct = 0.0f64;
    for _ in 0..SSIM_DIRECT_PAIRS {
        let p = random_tensor([1, 1, 16, 16], rng);
        // correlated pairs exercise the covariance term
        let noise = random_tensor([1, 1, 16, 16], rng);
        let q = p.zip_map(&noise, |a, b| (0.7 * a + 0.3 * b).clamp(-1.0, 1.0));
        let got = ssim_mean(&p, &q, &win, k)?;
        let want = ssim_direct(&p, &q, cfg.ssim_window, cfg.ssim_sigma, cfg.c1, cfg.c2);
        direct = direct.max((got - want).abs());
    }
    let mut constant = 0.0f64;
    for _ in 0..20 {
        let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let got = ssim_mean(&Tensor::full([1, 1, 16, 16], a), &Tensor::full([1, 1, 16, 16], b), &win, k)?;
        let want = (2.0 * a * b + cfg.c1) / (a * a + b * b + cfg.c1);
        constant = constant.max((got - want).abs());
    }
    Ok(vec![
        check(
            Suite::Ssim,
            "windowed_matches_direct",
            direct,
            SSIM_DIRECT_TOL,
            format!("{SSIM_DIRECT_PAIRS} random 16x16 pairs"),
        ),
        check(
            Suite::Ssim,
            "constant_closed_form",
            constant,
            SSIM_CONSTANT_TOL,
            "20 constant pairs",
        ),
    ])
}

/// Pairwise count: abnormal above normal scores 1, ties 0.5.
pub fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut hits = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                hits += 1.0;
            } else if si == sj {
                hits += 0.5;
            }
        }
    }
    hits / pairs
}

fn auc_suite(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < AUC_INSTANCES {
        let n = rng.gen_range(2..=50);
        // few distinct levels so ties are common
        let levels = rng.gen_range(2..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
        if !(labels.contains(&0) && labels.contains(&1)) {
            continue;
        }
        let auc = roc_auc(&scores, &labels)?.auc;
        worst = worst.max((auc - brute_force_auc(&scores, &labels)).abs());
        done += 1;
    }
    Ok(check(
        Suite::Auc,
        "matches_pairwise_oracle",
        worst,
        AUC_TOL,
        format!("{AUC_INSTANCES} instances with ties"),
    ))
}

fn normalization_suite(rng: &mut ChaCha8Rng) -> Vec<CheckResult> {
    let mut extreme_misses = 0usize;
    let mut out_of_range = 0usize;
    for _ in 0..50 {
        let n = rng.gen_range(2..40);
        let mae: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = normalize_scores(&mae);
        let hi = mae.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = mae.iter().copied().fold(f64::INFINITY, f64::min);
        for (m, v) in mae.iter().zip(&s) {
            if (*m == hi && *v != 1.0) || (*m == lo && *v != 0.0) {
                extreme_misses += 1;
            }
            if !(0.0..=1.0).contains(v) {
                out_of_range += 1;
            }
        }
    }
    let mut nonzero = 0usize;
    for _ in 0..20 {
        let v = rng.gen_range(0.0..1.0);
        nonzero += normalize_scores(&vec![v; 17]).iter().filter(|&&s| s != 0.0).count();
    }
    vec![
        check(
            Suite::Normalization,
            "extremes_hit_zero_and_one",
            (extreme_misses + out_of_range) as f64,
            0.0,
            "frames missing exact extremes or outside [0, 1] over 50 series",
        ),
        check(
            Suite::Normalization,
            "constant_mae_scores_zero",
            nonzero as f64,
            0.0,
            "nonzero scores over 20 constant series",
        ),
    ]
}

/// Small configuration used by the model-level oracles.
pub fn oracle_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        clip_len: 3,
        horizon: 2,
        frame_size: (8, 8),
        in_channels: 1,
        stage_channels: vec![2, 3],
        seed,
        ..ModelConfig::desk()
    }
}

/// Copies every parameter of `src` into `dst` by name, dropping the
/// encoder-state slices of decoder cells when `dst` has none.
pub fn transfer_params(src: &Model<f64>, dst: &mut Model<f64>) -> Result<()> {
    let names = dst.params().names().to_vec();
    for name in names {
        let s = src
            .params()
            .by_name(&name)
            .ok_or_else(|| VadError::Contract(format!("source model has no parameter {name}")))?
            .clone();
        let d = dst.params_mut().by_name_mut(&name).expect("name from dst");
        *d = if s.shape() == d.shape() {
            s
        } else {
            s.slice_channels(0, d.shape()[1])
        };
    }
    Ok(())
}

/// Zeroes the decoder kernel slices that read the encoder hidden state.
pub fn zero_encoder_slices(model: &mut Model<f64>) {
    let chans = model.config().stage_channels.clone();
    for (s, &c) in chans.iter().enumerate() {
        for dir in ["fwd", "bwd"] {
            if let Some(w) = model.params_mut().by_name_mut(&format!("{dir}.dec{s}.cell.weight")) {
                let [o, stack, k, _] = w.shape();
                if stack == 3 * c {
                    for oc in 0..o {
                        let base = (oc * stack + 2 * c) * k * k;
                        w.data_mut()[base..base + c * k * k].fill(0.0);
                    }
                }
            }
        }
    }
}

fn random_clip(rng: &mut ChaCha8Rng, cfg: &ModelConfig, batch: usize) -> Vec<Tensor<f64>> {
    (0..cfg.clip_len)
        .map(|_| random_tensor([batch, cfg.in_channels, cfg.frame_size.0, cfg.frame_size.1], rng))
        .collect()
}

fn max_list_diff(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn model_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465_6c);
    let mut results = Vec::new();

    // higher-order model with zeroed encoder slices equals the plain model
    let base = ModelConfig {
        enable_bi: false,
        enable_att: false,
        ..oracle_model_config(seed)
    };
    let mut sho = build_model::<f64>(&ModelConfig { enable_sho: true, ..base.clone() })?;
    zero_encoder_slices(&mut sho);
    let mut plain = build_model::<f64>(&ModelConfig { enable_sho: false, ..base.clone() })?;
    transfer_params(&sho, &mut plain)?;
    let clip = random_clip(&mut rng, &base, 2);
    let a = predict(&sho, &clip)?;
    let b = predict(&plain, &clip)?;
    results.push(check(
        Suite::Model,
        "reduces_to_plain_convlstm_ae",
        max_list_diff(&a.fused, &b.fused),
        MODEL_REDUCTION_TOL,
        "SHO with zeroed encoder slices vs SHO disabled",
    ));

    // palindromic clip with shared parameters: backward mirrors forward
    let full = build_model::<f64>(&oracle_model_config(seed))?.with_shared_directions();
    let x0 = random_tensor([1, 1, 8, 8], &mut rng);
    let x1 = random_tensor([1, 1, 8, 8], &mut rng);
    let pal = vec![x0.clone(), x1, x0];
    let (fwd, _) = forward_pass(&full, &pal, Direction::Forward)?;
    let (bwd, _) = forward_pass(&full, &pal, Direction::Backward)?;
    let mirrored: Vec<Tensor<f64>> = bwd.iter().rev().cloned().collect();
    results.push(check(
        Suite::Model,
        "palindrome_mirror_alignment",
        max_list_diff(&fwd, &mirrored),
        0.0,
        "forward[k] vs backward[T-1-k] on a 3-frame palindrome",
    ));

    // causality: perturbing the last input leaves earlier forward predictions unchanged
    let model = build_model::<f64>(&oracle_model_config(seed))?;
    let clip = random_clip(&mut rng, model.config(), 1);
    let mut moved = clip.clone();
    let last = moved.len() - 1;
    moved[last] = moved[last].map(|v| -v);
    let (p0, _) = forward_pass(&model, &clip, Direction::Forward)?;
    let (p1, _) = forward_pass(&model, &moved, Direction::Forward)?;
    results.push(check(
        Suite::Model,
        "forward_pass_is_causal",
        max_list_diff(&p0[..last], &p1[..last]),
        0.0,
        "earlier predictions after perturbing the last input",
    ));
    let changed = p0[last].max_abs_diff(&p1[last]);
    results.push(CheckResult {
        suite: Suite::Model,
        property: "last_prediction_sees_last_input".into(),
        passed: changed > 0.0,
        observed: changed,
        tolerance: 0.0,
        detail: "must be strictly positive".into(),
    });

    // gradient reaches the first encoder kernel through attention, SHO and fusion
    let (analytic, numeric) = early_kernel_gradient(&model, &mut rng)?;
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-300);
    results.push(CheckResult {
        suite: Suite::Model,
        property: "early_encoder_kernel_gradient".into(),
        passed: analytic != 0.0 && rel <= GRAD_TOL,
        observed: rel,
        tolerance: GRAD_TOL,
        detail: format!("analytic {analytic:.6e}, finite difference {numeric:.6e}"),
    });

    // every toggle removes parameters
    let count = |c: ModelConfig| build_model::<f32>(&c).map(|m| m.param_count());
    let d = count(ModelConfig::desk())?;
    let variants = [
        count(ModelConfig { enable_bi: false, ..ModelConfig::desk() })?,
        count(ModelConfig { enable_sho: false, ..ModelConfig::desk() })?,
        count(ModelConfig { enable_att: false, ..ModelConfig::desk() })?,
    ];
    let violations = variants.iter().filter(|&&v| v > d).count();
    results.push(check(
        Suite::Model,
        "toggles_shrink_parameter_count",
        violations as f64,
        0.0,
        format!("full {d}, without bi/sho/att {variants:?}"),
    ));
    Ok(results)
}

/// Analytic and central-difference derivative of the training loss with
/// respect to one entry of the first encoder convolution kernel.
fn early_kernel_gradient(model: &Model<f64>, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let cfg = model.config().clone();
    let frames: Vec<Tensor<f64>> = (0..cfg.clip_len + cfg.horizon)
        .map(|_| random_tensor([2, 1, 8, 8], rng))
        .collect();
    let loss_cfg = LossConfig {
        ssim_window: 7,
        ..LossConfig::default()
    };
    let ctx = LossContext::<f64>::new(&loss_cfg)?;
    let name = "fwd.enc0.conv.weight";
    let index = model
        .params()
        .names()
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| VadError::Contract(format!("no parameter {name}")))?;
    let entry = 4;
    let loss_of = |m: &Model<f64>, grad: bool| -> Result<(f64, Option<f64>)> {
        let mut sess = Session::new(m, true, grad);
        let vars: Vec<_> = frames.iter().map(|f| sess.graph.constant(f.clone())).collect();
        let (t, n) = (cfg.clip_len, cfg.horizon);
        let loss = clip_loss_var(&mut sess, &vars[..t], &vars[n..n + t], &ctx)?;
        let value = sess.graph.value(loss).to_scalar();
        let g = grad.then(|| {
            let grads = sess.graph.backward(loss);
            grads.get(sess.param_vars()[index]).map_or(0.0, |t| t.data()[entry])
        });
        Ok((value, g))
    };
    let (_, analytic) = loss_of(model, true)?;
    let eps = GRAD_EPS;
    let mut plus = model.clone();
    plus.params_mut().tensors_mut()[index].data_mut()[entry] += eps;
    let mut minus = model.clone();
    minus.params_mut().tensors_mut()[index].data_mut()[entry] -= eps;
    let numeric = (loss_of(&plus, false)?.0 - loss_of(&minus, false)?.0) / (2.0 * eps);
    Ok((analytic.unwrap_or(0.0), numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        let err = "nope".parse::<Suite>().unwrap_err().to_string();
        assert!(err.contains("ssim"), "{err}");
    }

    #[test]
    fn direct_ssim_of_identical_frames_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_tensor([1, 1, 12, 12], &mut rng);
        assert!((ssim_direct(&p, &p, 11, 1.5, 1e-4, 9e-4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn brute_force_auc_examples() {
        assert_eq!(brute_force_auc(&[0.9, 0.1], &[1, 0]), 1.0);
        assert_eq!(brute_force_auc(&[0.5, 0.5], &[1, 0]), 0.5);
    }
}
