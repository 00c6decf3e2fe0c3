//! Convolutional LSTM cells.
//!
//! Both cells convolve one stacked input `[x, H_prev]` (plain) or
//! `[x, H_prev, H_enc]` (higher-order) with a single kernel producing all
//! four gate pre-activations at once. The kernel's output channels are laid
//! out in [`Gate`] order, each block `hidden` channels wide.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VadError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Output,
    Candidate,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

    fn block(self) -> usize {
        self as usize
    }
}

/// Kernels and biases of one recurrent cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams<F> {
    /// `[4 * hidden, input + hidden + encoder, k, k]`
    pub weight: Tensor<F>,
    /// `[1, 4 * hidden, 1, 1]`
    pub bias: Tensor<F>,
    pub input_channels: usize,
    pub hidden_channels: usize,
    /// Channels of the encoder hidden state; 0 for a plain ConvLSTM.
    pub encoder_channels: usize,
}

impl<F: Real> CellParams<F> {
    pub fn zeros(input: usize, hidden: usize, encoder: usize, kernel: usize) -> Self {
        Self {
            weight: Tensor::zeros([4 * hidden, input + hidden + encoder, kernel, kernel]),
            bias: Tensor::zeros([1, 4 * hidden, 1, 1]),
            input_channels: input,
            hidden_channels: hidden,
            encoder_channels: encoder,
        }
    }

    /// Uniform in `[-s, s]` with `s = 1 / sqrt(fan_in)`, for kernels and biases alike.
    pub fn random(input: usize, hidden: usize, encoder: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input, hidden, encoder, kernel);
        let fan_in = (input + hidden + encoder) * kernel * kernel;
        let s = 1.0 / (fan_in as f64).sqrt();
        for v in p.weight.data_mut().iter_mut().chain(p.bias.data_mut()) {
            *v = F::lit(rng.gen_range(-s..=s));
        }
        p
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn stack_channels(&self) -> usize {
        self.input_channels + self.hidden_channels + self.encoder_channels
    }

    /// The `[hidden, stack, k, k]` kernel of one gate.
    pub fn gate_kernel(&self, gate: Gate) -> Tensor<F> {
        let per = self.weight.len() / 4;
        let [_, c, k, _] = self.weight.shape();
        let start = gate.block() * per;
        Tensor::from_vec(
            [self.hidden_channels, c, k, k],
            self.weight.data()[start..start + per].to_vec(),
        )
        .expect("block size is exact")
    }

    pub fn gate_bias(&self, gate: Gate) -> &[F] {
        let h = self.hidden_channels;
        &self.bias.data()[gate.block() * h..(gate.block() + 1) * h]
    }

    /// Sets every kernel entry that reads the stack channels `range`.
    fn fill_stack_slice(&mut self, range: std::ops::Range<usize>, value: F) {
        let [o, c, k, _] = self.weight.shape();
        let kk = k * k;
        for oc in 0..o {
            for ic in range.clone() {
                let base = (oc * c + ic) * kk;
                self.weight.data_mut()[base..base + kk].fill(value);
            }
        }
    }

    /// Zeroes the kernel slices acting on the encoder hidden state.
    pub fn zero_encoder_slices(&mut self) {
        let start = self.input_channels + self.hidden_channels;
        self.fill_stack_slice(start..self.stack_channels(), F::zero());
    }

    /// The plain-cell parameters formed by dropping the encoder slices.
    pub fn without_encoder(&self) -> Self {
        let [o, c, k, _] = self.weight.shape();
        let keep = self.input_channels + self.hidden_channels;
        let kk = k * k;
        let mut data = Vec::with_capacity(o * keep * kk);
        for oc in 0..o {
            data.extend_from_slice(&self.weight.data()[oc * c * kk..(oc * c + keep) * kk]);
        }
        Self {
            weight: Tensor::from_vec([o, keep, k, k], data).unwrap(),
            bias: self.bias.clone(),
            input_channels: self.input_channels,
            hidden_channels: self.hidden_channels,
            encoder_channels: 0,
        }
    }
}

/// Hidden and cell maps of one layer at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<F> {
    pub h: Tensor<F>,
    pub c: Tensor<F>,
}

/// All-zero state of shape `batch x channels x h x w`.
pub fn init_state<F: Real>(batch: usize, channels: usize, h: usize, w: usize) -> Result<CellState<F>> {
    if batch == 0 || channels == 0 || h == 0 || w == 0 {
        return Err(VadError::Range(format!(
            "state dimensions must be positive, got ({batch}, {channels}, {h}, {w})"
        )));
    }
    let z = Tensor::zeros([batch, channels, h, w]);
    Ok(CellState { h: z.clone(), c: z })
}

/// Graph handles for a cell's parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub weight: Var,
    pub bias: Var,
}

/// Graph handles produced by one recurrent step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
    pub candidate: Var,
    pub tanh_c: Var,
}

/// One recurrent step on the graph. `h_enc` selects the higher-order cell.
pub fn step_var<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    prev_h: Var,
    prev_c: Var,
    h_enc: Option<Var>,
    params: CellVars,
) -> Result<StepVars> {
    let xs = g.value(x).shape();
    let hs = g.value(prev_h).shape();
    if xs[0] != hs[0] || xs[2..] != hs[2..] || g.value(prev_c).shape() != hs {
        return Err(VadError::Shape(format!(
            "cell input {xs:?} incompatible with state {hs:?} / {:?}",
            g.value(prev_c).shape()
        )));
    }
    if let Some(e) = h_enc {
        let es = g.value(e).shape();
        if es[0] != xs[0] || es[2..] != xs[2..] {
            return Err(VadError::Shape(format!(
                "encoder state {es:?} incompatible with cell input {xs:?}"
            )));
        }
    }
    let ws = g.value(params.weight).shape();
    let hidden = hs[1];
    let expected_stack = xs[1] + hidden + h_enc.map_or(0, |e| g.value(e).channels());
    if ws[0] != 4 * hidden || ws[1] != expected_stack || ws[2] % 2 == 0 {
        return Err(VadError::Shape(format!(
            "cell kernel {ws:?} expects a stack of {} channels and {} hidden, got stack {expected_stack}, hidden {hidden}",
            ws[1],
            ws[0] / 4
        )));
    }
    let mut parts = vec![x, prev_h];
    parts.extend(h_enc);
    let stack = g.concat_channels(&parts)?;
    let pre = g.conv2d(stack, params.weight, Some(params.bias), 1, ws[2] / 2)?;
    let block = |g: &mut Graph<F>, gate: Gate| g.slice_channels(pre, gate.block() * hidden, hidden);
    let i = block(g, Gate::Input);
    let i = g.sigmoid(i);
    let f = block(g, Gate::Forget);
    let f = g.sigmoid(f);
    let o = block(g, Gate::Output);
    let o = g.sigmoid(o);
    let cand = block(g, Gate::Candidate);
    let cand = g.tanh(cand);
    let keep = g.mul(f, prev_c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tanh_c = g.tanh(c);
    let h = g.mul(o, tanh_c)?;
    Ok(StepVars {
        h,
        c,
        input_gate: i,
        forget_gate: f,
        output_gate: o,
        candidate: cand,
        tanh_c,
    })
}

fn run_step<F: Real>(
    x: &Tensor<F>,
    prev: &CellState<F>,
    h_enc: Option<&Tensor<F>>,
    params: &CellParams<F>,
) -> Result<CellState<F>> {
    if x.channels() != params.input_channels || prev.h.channels() != params.hidden_channels {
        return Err(VadError::Shape(format!(
            "cell declared for {} input / {} hidden channels got input {:?} and state {:?}",
            params.input_channels,
            params.hidden_channels,
            x.shape(),
            prev.h.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let hv = g.constant(prev.h.clone());
    let cv = g.constant(prev.c.clone());
    let ev = h_enc.map(|e| g.constant(e.clone()));
    let vars = CellVars {
        weight: g.constant(params.weight.clone()),
        bias: g.constant(params.bias.clone()),
    };
    let out = step_var(&mut g, xv, hv, cv, ev, vars)?;
    Ok(CellState {
        h: g.value(out.h).clone(),
        c: g.value(out.c).clone(),
    })
}

/// Standard ConvLSTM step over `[x, H_prev]`.
pub fn conv_lstm_step<F: Real>(x: &Tensor<F>, prev: &CellState<F>, params: &CellParams<F>) -> Result<CellState<F>> {
    if params.encoder_channels != 0 {
        return Err(VadError::Shape(
            "plain ConvLSTM step given higher-order parameters".into(),
        ));
    }
    run_step(x, prev, None, params)
}

/// Higher-order step whose gates also read the same-timestep encoder hidden state.
pub fn sho_conv_lstm_step<F: Real>(
    x: &Tensor<F>,
    prev: &CellState<F>,
    h_enc: &Tensor<F>,
    params: &CellParams<F>,
) -> Result<CellState<F>> {
    if h_enc.channels() != params.encoder_channels {
        return Err(VadError::Shape(format!(
            "encoder state {:?} has {} channels, parameters declare {}",
            h_enc.shape(),
            h_enc.channels(),
            params.encoder_channels
        )));
    }
    run_step(x, prev, Some(h_enc), params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    /// Scalar LSTM step: weights ordered (x, h, [e]) per gate.
    fn scalar_lstm(x: f64, h: f64, c: f64, e: Option<f64>, w: &[[f64; 3]; 4], b: &[f64; 4]) -> (f64, f64) {
        let pre = |k: usize| w[k][0] * x + w[k][1] * h + e.map_or(0.0, |e| w[k][2] * e) + b[k];
        let i = sig(pre(0));
        let f = sig(pre(1));
        let o = sig(pre(2));
        let cand = pre(3).tanh();
        let c_new = f * c + i * cand;
        (o * c_new.tanh(), c_new)
    }

    #[test]
    fn zero_parameters_keep_zero_state() {
        let p = CellParams::<f64>::zeros(2, 3, 0, 5);
        let s = init_state::<f64>(1, 3, 4, 4).unwrap();
        let x = Tensor::zeros([1, 2, 4, 4]);
        let out = conv_lstm_step(&x, &s, &p).unwrap();
        assert!(out.h.data().iter().all(|&v| v == 0.0));
        assert!(out.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_state_shapes_and_errors() {
        let s = init_state::<f32>(1, 8, 4, 4).unwrap();
        assert_eq!(s.h.shape(), [1, 8, 4, 4]);
        assert_eq!(s.h, s.c);
        assert!(matches!(init_state::<f32>(1, 0, 4, 4), Err(VadError::Range(_))));
    }

    #[test]
    fn one_by_one_cell_matches_scalar_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for with_enc in [false, true] {
            let enc = usize::from(with_enc);
            let p = CellParams::<f64>::random(1, 1, enc, 1, &mut rng);
            let mut w = [[0.0; 3]; 4];
            let mut b = [0.0; 4];
            for (k, gate) in Gate::ALL.iter().enumerate() {
                let kern = p.gate_kernel(*gate);
                for j in 0..kern.len() {
                    w[k][j] = kern.data()[j];
                }
                b[k] = p.gate_bias(*gate)[0];
            }
            let x = Tensor::scalar(0.3);
            let prev = CellState {
                h: Tensor::scalar(-0.4),
                c: Tensor::scalar(0.8),
            };
            let e = Tensor::scalar(0.6);
            let out = if with_enc {
                sho_conv_lstm_step(&x, &prev, &e, &p).unwrap()
            } else {
                conv_lstm_step(&x, &prev, &p).unwrap()
            };
            let (h, c) = scalar_lstm(0.3, -0.4, 0.8, with_enc.then_some(0.6), &w, &b);
            assert!((out.h.to_scalar() - h).abs() < 1e-12);
            assert!((out.c.to_scalar() - c).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_encoder_slices_reduce_to_plain_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = CellParams::<f64>::random(2, 3, 3, 5, &mut rng);
        p.zero_encoder_slices();
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let prev = CellState {
            h: random_tensor([2, 3, 4, 4], &mut rng),
            c: random_tensor([2, 3, 4, 4], &mut rng),
        };
        let e = random_tensor([2, 3, 4, 4], &mut rng);
        let sho = sho_conv_lstm_step(&x, &prev, &e, &p).unwrap();
        let plain = conv_lstm_step(&x, &prev, &p.without_encoder()).unwrap();
        assert!(sho.h.max_abs_diff(&plain.h) <= 1e-12);
        assert!(sho.c.max_abs_diff(&plain.c) <= 1e-12);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let p = CellParams::<f64>::zeros(2, 3, 0, 3);
        let s = init_state::<f64>(1, 3, 4, 4).unwrap();
        let x = Tensor::zeros([1, 2, 5, 4]);
        let err = conv_lstm_step(&x, &s, &p).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 5, 4]") && err.contains("[1, 3, 4, 4]"), "{err}");

        let sp = CellParams::<f64>::zeros(2, 3, 3, 3);
        let bad_enc = Tensor::zeros([1, 3, 2, 2]);
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(matches!(
            sho_conv_lstm_step(&x, &s, &bad_enc, &sp),
            Err(VadError::Shape(_))
        ));
    }

    #[test]
    fn sho_step_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = CellParams::<f64>::random(2, 2, 2, 3, &mut rng);
        let inputs = vec![
            random_tensor([2, 2, 4, 4], &mut rng),
            random_tensor([2, 2, 4, 4], &mut rng),
            random_tensor([2, 2, 4, 4], &mut rng),
            random_tensor([2, 2, 4, 4], &mut rng),
            p.weight,
            p.bias,
        ];
        let report = check_gradients(&inputs, 1e-5, |g, v| {
            let out = step_var(
                g,
                v[0],
                v[1],
                v[2],
                Some(v[3]),
                CellVars {
                    weight: v[4],
                    bias: v[5],
                },
            )?;
            let s = g.mean(out.h);
            Ok(g.scale(s, 32.0 * 2.0))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
