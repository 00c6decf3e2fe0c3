//! Adam with one moment pair per parameter tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig, params: &[Tensor<F>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Checks that the moment buffers fit `params`.
    pub fn matches(&self, params: &[Tensor<F>]) -> bool {
        self.m.len() == params.len() && self.m.iter().zip(params).all(|(m, p)| m.shape() == p.shape())
    }

    /// One bias-corrected update. `grads[i] == None` leaves tensor `i` and its
    /// moments untouched.
    pub fn update(&mut self, params: &mut [Tensor<F>], grads: &[Option<Tensor<F>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(VadError::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let bc1 = F::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = F::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = F::lit(c.lr);
        let eps = F::lit(c.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params[i].shape() {
                return Err(VadError::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &gi), mi), vi) in params[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (F::one() - b1) * gi;
                *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = F::lit(max_norm / total);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // bias correction makes the first step exactly lr * sign(g) up to eps
        let mut p = vec![Tensor::from_vec([1, 1, 1, 2], vec![1.0f64, -1.0]).unwrap()];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![3.0, -0.5]).unwrap();
        opt.update(&mut p, &[Some(g)]).unwrap();
        assert!((p[0].data()[0] - (1.0 - 5e-4)).abs() < 1e-10);
        assert!((p[0].data()[1] - (-1.0 + 5e-4)).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_leaves_tensor_alone() {
        let mut p = vec![Tensor::full([1, 1, 1, 1], 2.0f64), Tensor::full([1, 1, 1, 1], 3.0)];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.update(&mut p, &[None, Some(Tensor::full([1, 1, 1, 1], 1.0))]).unwrap();
        assert_eq!(p[0].data()[0], 2.0);
        assert!(p[1].data()[0] < 3.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::full([1, 1, 1, 1], 4.0f64)];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * (x - 1.0));
            opt.update(&mut p, &[Some(g)]).unwrap();
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut g = vec![Some(Tensor::from_vec([1, 1, 1, 2], vec![3.0f64, 4.0]).unwrap()), None];
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
