//! Attention masks computed from consecutive encoder feature maps.
//!
//! Weights `Z_t = W2 ⊗ tanh(W1 ⊗ [X_t, X_{t-1}] + b)` are turned into a mask
//! by min-max normalizing `exp(Z_t)` over each feature map, and the mask is
//! applied by elementwise product. Nothing here reads a recurrent state, so
//! the masks of all timesteps can be computed before any recurrent step.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const ATTENTION_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams<F> {
    /// `[C_mid, 2 * C_in, 3, 3]`
    pub w1: Tensor<F>,
    /// `[1, C_mid, 1, 1]`
    pub b1: Tensor<F>,
    /// `[C_in, C_mid, 3, 3]`
    pub w2: Tensor<F>,
}

impl<F: Real> AttentionParams<F> {
    pub fn zeros(channels: usize, mid: usize) -> Self {
        let k = ATTENTION_KERNEL;
        Self {
            w1: Tensor::zeros([mid, 2 * channels, k, k]),
            b1: Tensor::zeros([1, mid, 1, 1]),
            w2: Tensor::zeros([channels, mid, k, k]),
        }
    }

    pub fn random(channels: usize, mid: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(channels, mid);
        let k2 = ATTENTION_KERNEL * ATTENTION_KERNEL;
        let s1 = 1.0 / ((2 * channels * k2) as f64).sqrt();
        let s2 = 1.0 / ((mid * k2) as f64).sqrt();
        for v in p.w1.data_mut().iter_mut().chain(p.b1.data_mut()) {
            *v = F::lit(rng.gen_range(-s1..=s1));
        }
        for v in p.w2.data_mut() {
            *v = F::lit(rng.gen_range(-s2..=s2));
        }
        p
    }

    pub fn channels(&self) -> usize {
        self.w2.shape()[0]
    }
}

/// Graph handles for [`AttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
}

/// Attention weights `Z_t` on the graph.
pub fn attention_weights_var<F: Real>(g: &mut Graph<F>, x_t: Var, x_prev: Var, p: AttentionVars) -> Result<Var> {
    let (a, b) = (g.value(x_t).shape(), g.value(x_prev).shape());
    if a != b {
        return Err(VadError::Shape(format!(
            "attention inputs differ: {a:?} vs {b:?}"
        )));
    }
    let pad = ATTENTION_KERNEL / 2;
    let stacked = g.concat_channels(&[x_t, x_prev])?;
    let hidden = g.conv2d(stacked, p.w1, Some(p.b1), 1, pad)?;
    let hidden = g.tanh(hidden);
    g.conv2d(hidden, p.w2, None, 1, pad)
}

/// Attention weights for one pair of consecutive feature maps.
pub fn attention_weights<F: Real>(x_t: &Tensor<F>, x_prev: &Tensor<F>, params: &AttentionParams<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let a = g.constant(x_t.clone());
    let b = g.constant(x_prev.clone());
    let vars = AttentionVars {
        w1: g.constant(params.w1.clone()),
        b1: g.constant(params.b1.clone()),
        w2: g.constant(params.w2.clone()),
    };
    let z = attention_weights_var(&mut g, a, b, vars)?;
    Ok(g.value(z).clone())
}

/// Mask with every element in `[0, 1]`; see [`min_max_mask`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask<F>(pub Tensor<F>);

impl<F: Real> AttentionMask<F> {
    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }
}

/// Per-feature-map `(exp(Z) - min exp(Z)) / (max exp(Z) - min exp(Z))`;
/// constant maps give all zeros.
pub fn min_max_mask<F: Real>(z: &Tensor<F>) -> AttentionMask<F> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let m = g.min_max_mask(zv);
    AttentionMask(g.value(m).clone())
}

/// Hadamard product `x ∘ A`.
pub fn apply_mask<F: Real>(x: &Tensor<F>, mask: &AttentionMask<F>) -> Result<Tensor<F>> {
    if x.shape() != mask.0.shape() {
        return Err(VadError::Shape(format!(
            "mask {:?} does not match feature map {:?}",
            mask.0.shape(),
            x.shape()
        )));
    }
    Ok(x.zip_map(&mask.0, |a, b| a * b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn min_max_mask_example() {
        let z = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]).unwrap();
        let a = min_max_mask(&z);
        let expected = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in a.0.data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_map_gives_zero_mask() {
        let z = Tensor::<f64>::full([2, 3, 4, 4], 0.7);
        assert!(min_max_mask(&z).0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_per_feature_map() {
        // two channels with very different scales each reach exactly 0 and 1
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut z = random_tensor([2, 2, 3, 3], &mut rng);
        for v in &mut z.data_mut()[9..18] {
            *v *= 10.0;
        }
        let a = min_max_mask(&z);
        for map in a.0.data().chunks(9) {
            assert_eq!(map.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(map.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn zero_outer_kernel_gives_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut p = AttentionParams::<f64>::random(3, 3, &mut rng);
        p.w2 = Tensor::zeros(p.w2.shape());
        let z = attention_weights(&random_tensor([1, 3, 5, 5], &mut rng), &random_tensor([1, 3, 5, 5], &mut rng), &p).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_tensor([1, 2, 3, 3], &mut rng);
        let ones = AttentionMask(Tensor::full(x.shape(), 1.0));
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = AttentionMask(Tensor::zeros(x.shape()));
        assert!(apply_mask(&x, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = AttentionMask(Tensor::zeros([1, 2, 3, 4]));
        assert!(matches!(apply_mask(&x, &bad), Err(VadError::Shape(_))));
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let p = AttentionParams::<f64>::random(2, 3, &mut rng);
        let inputs = vec![
            random_tensor([2, 2, 4, 4], &mut rng),
            random_tensor([2, 2, 4, 4], &mut rng),
            p.w1,
            p.b1,
            p.w2,
            random_tensor([2, 2, 4, 4], &mut rng),
        ];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let z = attention_weights_var(g, v[0], v[1], AttentionVars { w1: v[2], b1: v[3], w2: v[4] })?;
            let a = g.min_max_mask(z);
            let m = g.mul(a, v[5])?;
            Ok(g.mean(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
