//! Training objective: pixel ℓ1, windowed SSIM, and their mixture with a
//! Gaussian-filtered ℓ1 branch.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{parse_value, KvConfig};
use crate::error::{Result, VadError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// Normalized square filter window.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWindow<F> {
    size: usize,
    weights: Vec<F>,
}

impl<F: Real> GaussianWindow<F> {
    /// Separable Gaussian of odd `size` and standard deviation `sigma`, summing to 1.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(VadError::Config(format!("window size must be odd, got {size}")));
        }
        if sigma <= 0.0 {
            return Err(VadError::Config(format!("window sigma must be positive, got {sigma}")));
        }
        let r = (size / 2) as f64;
        let g1: Vec<f64> = (0..size)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = g1.iter().sum();
        let weights = g1
            .iter()
            .flat_map(|a| g1.iter().map(move |b| F::lit(a * b / (total * total))))
            .collect();
        Ok(Self { size, weights })
    }

    /// The 1x1 kernel `[1]`; filtering with it is the identity.
    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![F::one()],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[F] {
        &self.weights
    }

    pub fn weight(&self, dy: usize, dx: usize) -> F {
        self.weights[dy * self.size + dx]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConstants<F> {
    pub c1: F,
    pub c2: F,
}

/// Filter applied to the absolute-error map in the ℓ1 branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum L1Filter {
    /// The SSIM Gaussian window (training default).
    Gaussian,
    /// No filtering; the branch reduces to the plain pixel mean.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    /// Pixel value range; 2.0 for data in `[-1, 1]`.
    pub dynamic_range: f64,
    pub l1_filter: L1Filter,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::with_dynamic_range(2.0)
    }
}

impl LossConfig {
    /// Standard SSIM stabilizers `(0.01 L)^2` and `(0.03 L)^2` for range `L`.
    pub fn with_dynamic_range(range: f64) -> Self {
        Self {
            lambda: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
            dynamic_range: range,
            l1_filter: L1Filter::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(VadError::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(VadError::Config("loss.c1 and loss.c2 must be positive".into()));
        }
        if self.ssim_window % 2 == 0 {
            return Err(VadError::Config(format!("loss.ssim_window must be odd, got {}", self.ssim_window)));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(VadError::Config("loss.ssim_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("loss.lambda", self.lambda.to_string());
        kv.set("loss.ssim_window", self.ssim_window.to_string());
        kv.set("loss.ssim_sigma", self.ssim_sigma.to_string());
        kv.set("loss.c1", self.c1.to_string());
        kv.set("loss.c2", self.c2.to_string());
        kv.set("loss.dynamic_range", self.dynamic_range.to_string());
        let filter = match self.l1_filter {
            L1Filter::Gaussian => "gaussian",
            L1Filter::Identity => "identity",
        };
        kv.set("loss.l1_filter", filter);
        kv
    }

    /// Applies `loss.*` entries. Setting `loss.dynamic_range` alone also
    /// rederives the stabilizers unless they are given explicitly.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<()> {
        if let Some(v) = kv.get("loss.dynamic_range") {
            let r: f64 = parse_value("loss.dynamic_range", v)?;
            let base = Self::with_dynamic_range(r);
            self.dynamic_range = r;
            self.c1 = base.c1;
            self.c2 = base.c2;
        }
        for (key, v) in kv.section("loss") {
            let full = format!("loss.{key}");
            let k = full.as_str();
            match key {
                "lambda" => self.lambda = parse_value(k, v)?,
                "ssim_window" => self.ssim_window = parse_value(k, v)?,
                "ssim_sigma" => self.ssim_sigma = parse_value(k, v)?,
                "c1" => self.c1 = parse_value(k, v)?,
                "c2" => self.c2 = parse_value(k, v)?,
                "dynamic_range" => {}
                "l1_filter" => {
                    self.l1_filter = match v {
                        "gaussian" => L1Filter::Gaussian,
                        "identity" => L1Filter::Identity,
                        _ => {
                            return Err(VadError::Config(format!(
                                "invalid value {v:?} for `{full}`; expected gaussian or identity"
                            )))
                        }
                    }
                }
                _ => return Err(VadError::Config(format!("unknown key `{full}`"))),
            }
        }
        Ok(())
    }

    pub fn constants<F: Real>(&self) -> SsimConstants<F> {
        SsimConstants {
            c1: F::lit(self.c1),
            c2: F::lit(self.c2),
        }
    }
}

/// Windows and constants prepared once for repeated loss evaluation.
#[derive(Clone, Debug)]
pub struct LossContext<F> {
    pub lambda: F,
    pub ssim_window: Arc<GaussianWindow<F>>,
    pub l1_window: Arc<GaussianWindow<F>>,
    pub constants: SsimConstants<F>,
}

impl<F: Real> LossContext<F> {
    pub fn new(cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let ssim_window = Arc::new(GaussianWindow::gaussian(cfg.ssim_window, cfg.ssim_sigma)?);
        let l1_window = match cfg.l1_filter {
            L1Filter::Gaussian => Arc::clone(&ssim_window),
            L1Filter::Identity => Arc::new(GaussianWindow::identity()),
        };
        Ok(Self {
            lambda: F::lit(cfg.lambda),
            ssim_window,
            l1_window,
            constants: cfg.constants(),
        })
    }
}

/// Local moments of a frame pair under one window placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats<F> {
    pub mu_p: F,
    pub mu_phat: F,
    pub var_p: F,
    pub var_phat: F,
    pub cov: F,
}

impl<F: Real> WindowStats<F> {
    pub fn ssim(&self, k: SsimConstants<F>) -> F {
        let two = F::lit(2.0);
        (two * self.mu_p * self.mu_phat + k.c1) * (two * self.cov + k.c2)
            / ((self.mu_p * self.mu_p + self.mu_phat * self.mu_phat + k.c1) * (self.var_p + self.var_phat + k.c2))
    }
}

/// Raw weighted moments at each valid window placement of one map.
struct Moments<F> {
    out_h: usize,
    out_w: usize,
    mu_p: Vec<F>,
    mu_q: Vec<F>,
    m_pp: Vec<F>,
    m_qq: Vec<F>,
    m_pq: Vec<F>,
}

fn valid_dims(h: usize, w: usize, window: usize) -> Result<(usize, usize)> {
    if h < window || w < window {
        return Err(VadError::Config(format!(
            "frame {h}x{w} is smaller than the {window}x{window} SSIM window"
        )));
    }
    Ok((h - window + 1, w - window + 1))
}

fn moments<F: Real>(p: &[F], q: &[F], h: usize, w: usize, win: &GaussianWindow<F>) -> Result<Moments<F>> {
    let k = win.size();
    let (out_h, out_w) = valid_dims(h, w, k)?;
    let n = out_h * out_w;
    let mut m = Moments {
        out_h,
        out_w,
        mu_p: vec![F::zero(); n],
        mu_q: vec![F::zero(); n],
        m_pp: vec![F::zero(); n],
        m_qq: vec![F::zero(); n],
        m_pq: vec![F::zero(); n],
    };
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (mut a, mut b, mut c, mut d, mut e) = (F::zero(), F::zero(), F::zero(), F::zero(), F::zero());
            for dy in 0..k {
                let row = (oy + dy) * w + ox;
                let wrow = &win.weights()[dy * k..(dy + 1) * k];
                for dx in 0..k {
                    let g = wrow[dx];
                    let pv = p[row + dx];
                    let qv = q[row + dx];
                    a += g * pv;
                    b += g * qv;
                    c += g * pv * pv;
                    d += g * qv * qv;
                    e += g * pv * qv;
                }
            }
            let i = oy * out_w + ox;
            m.mu_p[i] = a;
            m.mu_q[i] = b;
            m.m_pp[i] = c;
            m.m_qq[i] = d;
            m.m_pq[i] = e;
        }
    }
    Ok(m)
}

/// Window statistics of every valid placement over a single-channel map.
pub fn window_stats<F: Real>(
    p: &[F],
    phat: &[F],
    h: usize,
    w: usize,
    win: &GaussianWindow<F>,
) -> Result<Vec<WindowStats<F>>> {
    let m = moments(p, phat, h, w, win)?;
    Ok((0..m.mu_p.len())
        .map(|i| WindowStats {
            mu_p: m.mu_p[i],
            mu_phat: m.mu_q[i],
            var_p: m.m_pp[i] - m.mu_p[i] * m.mu_p[i],
            var_phat: m.m_qq[i] - m.mu_q[i] * m.mu_q[i],
            cov: m.m_pq[i] - m.mu_p[i] * m.mu_q[i],
        })
        .collect())
}

fn check_pair<F: Real>(p: &Tensor<F>, q: &Tensor<F>) -> Result<()> {
    if p.shape() != q.shape() {
        return Err(VadError::Shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    Ok(())
}

/// Mean SSIM over every `(item, channel)` map and every valid window placement.
pub fn ssim_mean<F: Real>(p: &Tensor<F>, q: &Tensor<F>, win: &GaussianWindow<F>, k: SsimConstants<F>) -> Result<F> {
    check_pair(p, q)?;
    let (h, w) = p.spatial();
    let plane = h * w;
    let mut total = F::zero();
    let mut count = 0usize;
    for (pm, qm) in p.data().chunks(plane).zip(q.data().chunks(plane)) {
        for s in window_stats(pm, qm, h, w, win)? {
            total += s.ssim(k);
            count += 1;
        }
    }
    Ok(total / F::from_usize(count).unwrap())
}

/// Gradient of [`ssim_mean`] with respect to its second argument.
pub fn ssim_mean_grad<F: Real>(p: &Tensor<F>, q: &Tensor<F>, win: &GaussianWindow<F>, k: SsimConstants<F>) -> Tensor<F> {
    let (h, w) = p.spatial();
    let plane = h * w;
    let ks = win.size();
    let two = F::lit(2.0);
    let maps = p.len() / plane;
    let (oh, ow) = valid_dims(h, w, ks).expect("validated in forward");
    let scale = F::one() / F::from_usize(maps * oh * ow).unwrap();
    let mut grad = Tensor::zeros(q.shape());
    for ((pm, qm), gm) in p
        .data()
        .chunks(plane)
        .zip(q.data().chunks(plane))
        .zip(grad.data_mut().chunks_mut(plane))
    {
        let m = moments(pm, qm, h, w, win).expect("validated in forward");
        let n = m.out_h * m.out_w;
        let mut c_mu = vec![F::zero(); n];
        let mut c_qq = vec![F::zero(); n];
        let mut c_pq = vec![F::zero(); n];
        for i in 0..n {
            let (mp, mq) = (m.mu_p[i], m.mu_q[i]);
            let a1 = two * mp * mq + k.c1;
            let a2 = two * (m.m_pq[i] - mp * mq) + k.c2;
            let b1 = mp * mp + mq * mq + k.c1;
            let b2 = (m.m_pp[i] - mp * mp) + (m.m_qq[i] - mq * mq) + k.c2;
            let s = a1 * a2 / (b1 * b2);
            c_mu[i] = scale * (two * mp * (a2 - a1) / (b1 * b2) - two * mq * s * (F::one() / b1 - F::one() / b2));
            c_qq[i] = -scale * s / b2;
            c_pq[i] = scale * two * a1 / (b1 * b2);
        }
        // scatter through the window (adjoint of the valid filtering)
        for oy in 0..m.out_h {
            for ox in 0..m.out_w {
                let i = oy * m.out_w + ox;
                for dy in 0..ks {
                    let row = (oy + dy) * w + ox;
                    for dx in 0..ks {
                        let g = win.weight(dy, dx);
                        let j = row + dx;
                        gm[j] += g * (c_mu[i] + two * qm[j] * c_qq[i] + pm[j] * c_pq[i]);
                    }
                }
            }
        }
    }
    grad
}

fn clamp_index(v: isize, len: usize) -> usize {
    v.clamp(0, len as isize - 1) as usize
}

/// Same-size filtering of every map, replicating edge pixels outside the frame.
///
/// A constant map is a fixed point because the window sums to one.
pub fn blur_replicate<F: Real>(x: &Tensor<F>, win: &GaussianWindow<F>) -> Tensor<F> {
    let (h, w) = x.spatial();
    let plane = h * w;
    let k = win.size();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = F::zero();
                for dy in 0..k {
                    let sy = clamp_index(y as isize + dy as isize - r, h);
                    for dx in 0..k {
                        let sx = clamp_index(xx as isize + dx as isize - r, w);
                        acc += win.weight(dy, dx) * src[sy * w + sx];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`blur_replicate`].
pub fn blur_replicate_adjoint<F: Real>(g: &Tensor<F>, win: &GaussianWindow<F>) -> Tensor<F> {
    let (h, w) = g.spatial();
    let plane = h * w;
    let k = win.size();
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(g.shape());
    for (src, dst) in g.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        for y in 0..h {
            for xx in 0..w {
                let gv = src[y * w + xx];
                for dy in 0..k {
                    let sy = clamp_index(y as isize + dy as isize - r, h);
                    for dx in 0..k {
                        let sx = clamp_index(xx as isize + dx as isize - r, w);
                        dst[sy * w + sx] += win.weight(dy, dx) * gv;
                    }
                }
            }
        }
    }
    out
}

/// Mean absolute difference over all pixels.
pub fn l1_loss<F: Real>(p: &Tensor<F>, phat: &Tensor<F>) -> Result<F> {
    check_pair(p, phat)?;
    let total: F = p.data().iter().zip(phat.data()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(total / F::from_usize(p.len()).unwrap())
}

/// `1 - SSIM_mean`.
pub fn ssim_loss<F: Real>(p: &Tensor<F>, phat: &Tensor<F>, cfg: &LossConfig) -> Result<F> {
    cfg.validate()?;
    let win = GaussianWindow::gaussian(cfg.ssim_window, cfg.ssim_sigma)?;
    Ok(F::one() - ssim_mean(p, phat, &win, cfg.constants())?)
}

pub fn mixed_loss<F: Real>(p: &Tensor<F>, phat: &Tensor<F>, cfg: &LossConfig) -> Result<F> {
    let ctx = LossContext::new(cfg)?;
    let mut g = Graph::new();
    let a = g.constant(p.clone());
    let b = g.constant(phat.clone());
    let l = mixed_loss_var(&mut g, a, b, &ctx)?;
    Ok(g.value(l).to_scalar())
}

/// Differentiable `ssim_loss + lambda * mean(W ⊗ |P - P_hat|)`.
pub fn mixed_loss_var<F: Real>(g: &mut Graph<F>, target: Var, pred: Var, ctx: &LossContext<F>) -> Result<Var> {
    let ssim = g.ssim(target, pred, Arc::clone(&ctx.ssim_window), ctx.constants)?;
    let one = g.constant(Tensor::scalar(F::one()));
    let ssim_term = g.sub(one, ssim)?;
    let diff = g.sub(target, pred)?;
    let err = g.abs(diff);
    let filtered = g.blur(err, Arc::clone(&ctx.l1_window));
    let l1 = g.mean(filtered);
    let l1 = g.scale(l1, ctx.lambda);
    g.add(ssim_term, l1)
}

/// Uniform mean of [`mixed_loss_var`] over aligned target/prediction lists.
pub fn sequence_loss_var<F: Real>(
    g: &mut Graph<F>,
    targets: &[Var],
    preds: &[Var],
    ctx: &LossContext<F>,
) -> Result<Var> {
    if targets.len() != preds.len() || targets.is_empty() {
        return Err(VadError::Shape(format!(
            "{} targets for {} predictions",
            targets.len(),
            preds.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&t, &p) in targets.iter().zip(preds) {
        let l = mixed_loss_var(g, t, p, ctx)?;
        total = Some(match total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.unwrap(), F::one() / F::from_usize(targets.len()).unwrap()))
}
