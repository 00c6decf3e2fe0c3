//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward computation, so it is
//! independent of every backward rule it checks.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Largest elementwise absolute difference over all checked entries.
    pub max_abs_error: f64,
    pub checked_entries: usize,
}

/// Uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Checks every entry of every input.
pub fn check_gradients<B>(inputs: &[Tensor<f64>], eps: f64, build: B) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_gradients_at(inputs, &all, eps, build)
}

/// Checks only the listed entries of each input; `entries[i]` indexes `inputs[i]`.
pub fn check_gradients_at<B>(
    inputs: &[Tensor<f64>],
    entries: &[Vec<usize>],
    eps: f64,
    build: B,
) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with_scale(inputs, entries, eps, 1.0, build)
}

/// Like [`check_gradients`], but multiplies the analytic gradient by `scale`
/// first. A scale other than 1 must make the check fail; this is the
/// negative control for the checker itself.
pub fn check_gradients_scaled<B>(inputs: &[Tensor<f64>], eps: f64, scale: f64, build: B) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    check_with_scale(inputs, &all, eps, scale, build)
}

fn check_with_scale<B>(
    inputs: &[Tensor<f64>],
    entries: &[Vec<usize>],
    eps: f64,
    scale: f64,
    build: B,
) -> Result<GradReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).to_scalar())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_error = 0.0f64;
    let mut checked_entries = 0;
    let mut work = inputs.to_vec();
    for (i, idxs) in entries.iter().enumerate() {
        let analytic_full = grads.get_or_zeros(vars[i], inputs[i].shape());
        let mut analytic = Vec::with_capacity(idxs.len());
        let mut numeric = Vec::with_capacity(idxs.len());
        for &j in idxs {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * eps);
            let ana = analytic_full.data()[j] * scale;
            max_abs_error = max_abs_error.max((num - ana).abs());
            analytic.push(ana);
            numeric.push(num);
        }
        checked_entries += idxs.len();
        rel_errors.push(rel_error(&analytic, &numeric));
    }
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        rel_errors,
        max_rel_error,
        max_abs_error,
        checked_entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_mean_gradient_agrees() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -0.25]).unwrap();
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn rel_error_is_scale_free() {
        assert!((rel_error(&[2.0, 0.0], &[1.0, 0.0]) - 0.5).abs() < 1e-15);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
    }
}
