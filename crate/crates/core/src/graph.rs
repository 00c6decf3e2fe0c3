//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every forward operation appends a node holding its value and the
//! information its backward rule needs. [`Graph::backward`] walks the nodes
//! in reverse creation order, which is a valid reverse topological order.

use std::sync::Arc;

use crate::conv;
use crate::error::{Result, VadError};
use crate::losses::{self, GaussianWindow, SsimConstants};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<F> {
    /// Statistics of the current batch (training).
    Batch { eps: F },
    /// Fixed running statistics (inference).
    Fixed { mean: Vec<F>, var: Vec<F>, eps: F },
}

/// Batch statistics observed by a training-mode normalization node.
#[derive(Clone, Debug)]
pub struct ObservedStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    /// Elements reduced per channel.
    pub count: usize,
}

enum Op<F> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Abs(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    MinMaxMask {
        z: Var,
        // per (item, channel) map: (argmin, argmax), or None when constant
        extremes: Vec<Option<(usize, usize)>>,
    },
    Blur {
        x: Var,
        window: Arc<GaussianWindow<F>>,
    },
    Ssim {
        p: Var,
        q: Var,
        window: Arc<GaussianWindow<F>>,
        constants: SsimConstants<F>,
    },
    Mean(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<F: Real>(what: &str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(VadError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, ng))
    }

    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let out = conv::deconv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            out_pad,
        )?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            out,
            Op::Deconv {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            },
            ng,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(F, F) -> F, op: Op<F>) -> Result<Var> {
        same_shape(what, self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.value(a).map(|v| v * factor);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, factor), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let out = self.value(a).map(|v| if v > F::zero() { v } else { v * slope });
        let ng = self.needs(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), ng))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_channels(start, len);
        let ng = self.needs(x);
        self.push(out, Op::Slice { x, start }, ng)
    }

    /// Per-channel normalization followed by the affine `gamma * x_hat + beta`.
    ///
    /// Returns the observed batch statistics when `stats` is [`NormStats::Batch`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &NormStats<F>,
    ) -> Result<(Var, Option<ObservedStats<F>>)> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, c, 1, 1] {
                return Err(VadError::Shape(format!(
                    "normalization parameter {:?} does not match {c} channels",
                    self.value(p).shape()
                )));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for b in 0..n {
                        s += xv.item(b)[ch * plane..(ch + 1) * plane].iter().copied().sum();
                    }
                    let m = s / F::from_usize(count).unwrap();
                    let mut v = F::zero();
                    for b in 0..n {
                        for &e in &xv.item(b)[ch * plane..(ch + 1) * plane] {
                            v += (e - m) * (e - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = v / F::from_usize(count).unwrap();
                }
                (mean, var, *eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(VadError::Shape(format!(
                        "running statistics of length {} for {c} channels",
                        mean.len()
                    )));
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(xv.shape());
        for b in 0..n {
            let src = xv.item(b);
            let dst = out.item_mut(b);
            for ch in 0..c {
                let (m, s, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    dst[i] = (src[i] - m) * s * g + be;
                }
            }
        }
        let observed = batch_stats.then(|| ObservedStats {
            mean: mean.clone(),
            var,
            count,
        });
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            },
            ng,
        );
        Ok((v, observed))
    }

    /// Min-max normalization of `exp(z)` over each `(item, channel)` map.
    ///
    /// Constant maps normalize to all zeros.
    pub fn min_max_mask(&mut self, z: Var) -> Var {
        let zv = self.value(z);
        let (h, w) = zv.spatial();
        let plane = h * w;
        let mut out = Tensor::zeros(zv.shape());
        let mut extremes = Vec::with_capacity(zv.batch() * zv.channels());
        for (map, dst) in zv.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            let shift = map.iter().copied().fold(F::neg_infinity(), F::max);
            let e: Vec<F> = map.iter().map(|&v| (v - shift).exp()).collect();
            let (mut lo, mut hi) = (0, 0);
            for (i, &v) in e.iter().enumerate() {
                if v < e[lo] {
                    lo = i;
                }
                if v > e[hi] {
                    hi = i;
                }
            }
            let range = e[hi] - e[lo];
            if range > F::zero() {
                for (d, &v) in dst.iter_mut().zip(&e) {
                    *d = (v - e[lo]) / range;
                }
                extremes.push(Some((lo, hi)));
            } else {
                extremes.push(None);
            }
        }
        let ng = self.needs(z);
        self.push(out, Op::MinMaxMask { z, extremes }, ng)
    }

    /// Same-size filtering of every map with edge-replicating borders.
    pub fn blur(&mut self, x: Var, window: Arc<GaussianWindow<F>>) -> Var {
        let out = losses::blur_replicate(self.value(x), &window);
        let ng = self.needs(x);
        self.push(out, Op::Blur { x, window }, ng)
    }

    /// Mean windowed structural similarity between `p` and `q` (a scalar).
    pub fn ssim(&mut self, p: Var, q: Var, window: Arc<GaussianWindow<F>>, constants: SsimConstants<F>) -> Result<Var> {
        let s = losses::ssim_mean(self.value(p), self.value(q), &window, constants)?;
        let ng = self.needs(p) || self.needs(q);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Ssim {
                p,
                q,
                window,
                constants,
            },
            ng,
        ))
    }

    /// Mean of all elements (a scalar).
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(out, Op::Mean(x), ng)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<F>, gy: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(x), self.value(w), gy, stride, pad, self.needs(x));
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                self.accumulate(grads, w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Deconv {
                x,
                w,
                b,
                stride,
                pad,
                out_pad,
            } => {
                let (dx, dw, db) = conv::deconv2d_backward(
                    self.value(x),
                    self.value(w),
                    gy,
                    stride,
                    pad,
                    out_pad,
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                self.accumulate(grads, w, dw);
                if let Some(b) = b {
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, gy.zip_map(self.value(b), |g, v| g * v));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, gy.zip_map(self.value(a), |g, v| g * v));
                }
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, gy.map(|g| g * f)),
            &Op::Sigmoid(a) => {
                let d = gy.zip_map(&node.value, |g, s| g * s * (F::one() - s));
                self.accumulate(grads, a, d);
            }
            &Op::Tanh(a) => {
                let d = gy.zip_map(&node.value, |g, t| g * (F::one() - t * t));
                self.accumulate(grads, a, d);
            }
            &Op::LeakyRelu(a, slope) => {
                let d = gy.zip_map(self.value(a), |g, x| if x > F::zero() { g } else { g * slope });
                self.accumulate(grads, a, d);
            }
            &Op::Abs(a) => {
                let d = gy.zip_map(self.value(a), |g, x| {
                    if x > F::zero() {
                        g
                    } else if x < F::zero() {
                        -g
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(grads, a, d);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).channels();
                    if self.needs(p) {
                        self.accumulate(grads, p, gy.slice_channels(start, len));
                    }
                    start += len;
                }
            }
            &Op::Slice { x, start } => {
                if self.needs(x) {
                    let xs = self.value(x).shape();
                    let [n, len, h, w] = gy.shape();
                    let plane = h * w;
                    let mut d = Tensor::zeros(xs);
                    for b in 0..n {
                        let dst = &mut d.item_mut(b)[start * plane..(start + len) * plane];
                        dst.copy_from_slice(gy.item(b));
                    }
                    self.accumulate(grads, x, d);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(gy, *x, *gamma, *beta, mean, inv_std, *batch_stats, grads),
            Op::MinMaxMask { z, extremes } => {
                let zv = self.value(*z);
                let plane = zv.spatial().0 * zv.spatial().1;
                let mut d = Tensor::zeros(zv.shape());
                for (m, ext) in extremes.iter().enumerate() {
                    let Some((lo, hi)) = *ext else { continue };
                    let map = &zv.data()[m * plane..(m + 1) * plane];
                    let g = &gy.data()[m * plane..(m + 1) * plane];
                    let shift = map[hi];
                    let e: Vec<F> = map.iter().map(|&v| (v - shift).exp()).collect();
                    let (emin, emax) = (e[lo], e[hi]);
                    let range = emax - emin;
                    let dst = &mut d.data_mut()[m * plane..(m + 1) * plane];
                    let mut to_min = F::zero();
                    let mut to_max = F::zero();
                    for i in 0..plane {
                        dst[i] = g[i] * e[i] / range;
                        to_min += g[i] * (e[i] - emax);
                        to_max -= g[i] * (e[i] - emin);
                    }
                    let r2 = range * range;
                    dst[lo] += emin * to_min / r2;
                    dst[hi] += emax * to_max / r2;
                }
                self.accumulate(grads, *z, d);
            }
            Op::Blur { x, window } => {
                self.accumulate(grads, *x, losses::blur_replicate_adjoint(gy, window));
            }
            Op::Ssim {
                p,
                q,
                window,
                constants,
            } => {
                let g = gy.to_scalar();
                if self.needs(*q) {
                    let d = losses::ssim_mean_grad(self.value(*p), self.value(*q), window, *constants);
                    self.accumulate(grads, *q, d.map(|v| v * g));
                }
                if self.needs(*p) {
                    // the index is symmetric in its arguments
                    let d = losses::ssim_mean_grad(self.value(*q), self.value(*p), window, *constants);
                    self.accumulate(grads, *p, d.map(|v| v * g));
                }
            }
            &Op::Mean(x) => {
                let xs = self.value(x);
                let g = gy.to_scalar() / F::from_usize(xs.len()).unwrap();
                self.accumulate(grads, x, Tensor::full(xs.shape(), g));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        gy: &Tensor<F>,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[F],
        inv_std: &[F],
        batch_stats: bool,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let count = F::from_usize(n * plane).unwrap();
        let gv = self.value(gamma).data();
        let mut d_gamma = Tensor::zeros([1, c, 1, 1]);
        let mut d_beta = Tensor::zeros([1, c, 1, 1]);
        let mut dx = self.needs(x).then(|| Tensor::zeros(xv.shape()));
        for ch in 0..c {
            let (m, s) = (mean[ch], inv_std[ch]);
            let mut sum_g = F::zero();
            let mut sum_gx = F::zero();
            for b in 0..n {
                let xs = &xv.item(b)[ch * plane..(ch + 1) * plane];
                let gs = &gy.item(b)[ch * plane..(ch + 1) * plane];
                for (&xi, &gi) in xs.iter().zip(gs) {
                    sum_g += gi;
                    sum_gx += gi * (xi - m) * s;
                }
            }
            d_gamma.data_mut()[ch] = sum_gx;
            d_beta.data_mut()[ch] = sum_g;
            if let Some(dx) = dx.as_mut() {
                let k = gv[ch] * s;
                for b in 0..n {
                    let xs = &xv.item(b)[ch * plane..(ch + 1) * plane];
                    let gs = &gy.item(b)[ch * plane..(ch + 1) * plane];
                    let ds = &mut dx.item_mut(b)[ch * plane..(ch + 1) * plane];
                    for i in 0..plane {
                        ds[i] = if batch_stats {
                            let xhat = (xs[i] - m) * s;
                            k * (gs[i] - sum_g / count - xhat * sum_gx / count)
                        } else {
                            k * gs[i]
                        };
                    }
                }
            }
        }
        if let Some(dx) = dx {
            self.accumulate(grads, x, dx);
        }
        self.accumulate(grads, gamma, d_gamma);
        self.accumulate(grads, beta, d_beta);
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 4]) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random_tensor([2, 3, 3, 3], &mut rng), random_tensor([2, 3, 3, 3], &mut rng)];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let m = g.mul(v[0], v[1])?;
            let s = g.sigmoid(m);
            let t = g.tanh(v[1]);
            let a = g.sub(s, t)?;
            let l = g.leaky_relu(a, 0.2);
            let ab = g.abs(v[0]);
            let sum = g.add(l, ab)?;
            let sc = g.scale(sum, 0.7);
            Ok(g.mean(sc))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn conv_deconv_concat_slice_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            random_tensor([2, 2, 4, 4], &mut rng),
            random_tensor([3, 2, 3, 3], &mut rng),
            random_tensor([1, 3, 1, 1], &mut rng),
            random_tensor([5, 2, 3, 3], &mut rng),
            random_tensor([1, 2, 1, 1], &mut rng),
        ];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?; // 2x3x2x2
            let cat = g.concat_channels(&[c, c])?; // 6 channels
            let sl = g.slice_channels(cat, 1, 5);
            let d = g.deconv2d(sl, v[3], Some(v[4]), 2, 1, 1)?; // 2x2x4x4
            let t = g.tanh(d);
            let m = g.mul(t, v[0])?;
            Ok(g.mean(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn batch_norm_passes_gradient_check_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            random_tensor([3, 2, 3, 3], &mut rng),
            random_tensor([1, 2, 1, 1], &mut rng),
            random_tensor([1, 2, 1, 1], &mut rng),
            random_tensor([3, 2, 3, 3], &mut rng),
        ];
        for stats in [
            NormStats::Batch { eps: 1e-5 },
            NormStats::Fixed {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
                eps: 1e-5,
            },
        ] {
            let report = check_gradients(&inputs, 1e-5, |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], &stats)?;
                let m = g.mul(y, v[3])?;
                let t = g.tanh(m);
                Ok(g.mean(t))
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{report:?}");
        }
    }

    #[test]
    fn unused_inputs_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.variable(Tensor::scalar(2.0));
        let b = g.variable(Tensor::scalar(3.0));
        let l = g.scale(a, 4.0);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().to_scalar(), 4.0);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn shape_mismatch_in_binary_op_is_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(matches!(g.add(a, b), Err(VadError::Shape(_))));
    }
}
