//! Zero-padded 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Convolution weights are `[C_out, C_in, k, k]`; transposed-convolution
//! weights are `[C_in, C_out, k, k]`. Each batch item is processed with its
//! own GEMM, so results never depend on how items are grouped into batches.

use crate::error::{Result, VadError};
use crate::tensor::{Real, Tensor};

/// Geometry of a convolution reading a `channels x in_h x in_w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if in_h + 2 * pad < kernel || in_w + 2 * pad < kernel || stride == 0 {
            return Err(VadError::Shape(format!(
                "kernel {kernel} with padding {pad} does not fit a {in_h}x{in_w} map"
            )));
        }
        Ok(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (in_h + 2 * pad - kernel) / stride + 1,
            out_w: (in_w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// For each kernel offset, the range of output positions that read inside the map.
    fn valid_range(&self, offset: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // input coordinate = o * stride + offset - pad must lie in [0, in_len)
        let lo = if offset >= self.pad {
            0
        } else {
            (self.pad - offset).div_ceil(self.stride)
        };
        let hi = if in_len + self.pad > offset {
            ((in_len + self.pad - offset - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Unfolds one `channels x in_h x in_w` map into a `[C*k*k, out_h*out_w]` matrix.
pub fn im2col<F: Real>(input: &[F], g: &ConvGeom, cols: &mut [F]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let src = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(F::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let src_row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into a map.
pub fn col2im<F: Real>(cols: &[F], g: &ConvGeom, output: &mut [F]) {
    let k = g.kernel;
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        let dst = &mut output[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.in_h, g.out_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.in_w, g.out_w);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst_row = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                    }
                }
            }
        }
    }
}

fn check_weight<F: Real>(weight: &Tensor<F>, c_in: usize, transposed: bool) -> Result<usize> {
    let [a, b, kh, kw] = weight.shape();
    let (w_in, w_out) = if transposed { (a, b) } else { (b, a) };
    if kh != kw || w_in != c_in {
        return Err(VadError::Shape(format!(
            "weight {:?} incompatible with {c_in} input channels",
            weight.shape()
        )));
    }
    Ok(w_out)
}

fn check_bias<F: Real>(bias: Option<&Tensor<F>>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [1, c_out, 1, 1] {
            return Err(VadError::Shape(format!(
                "bias {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

pub fn conv2d<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let [n, c_in, h, w] = input.shape();
    let c_out = check_weight(weight, c_in, false)?;
    check_bias(bias, c_out)?;
    let g = ConvGeom::new(c_in, h, w, weight.shape()[2], stride, pad)?;
    let plane = g.col_cols();
    let mut out = Tensor::zeros([n, c_out, g.out_h, g.out_w]);
    let mut cols = vec![F::zero(); g.col_rows() * plane];
    for b in 0..n {
        im2col(input.item(b), &g, &mut cols);
        let dst = out.item_mut(b);
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { F::one() } else { F::zero() };
        F::gemm(
            c_out,
            g.col_rows(),
            plane,
            F::one(),
            weight.data(),
            (g.col_rows() as isize, 1),
            &cols,
            (plane as isize, 1),
            beta,
            dst,
            (plane as isize, 1),
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d`]: `(d_input, d_weight, d_bias)`; `d_input` is only
/// computed when requested.
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [n, c_in, h, w] = input.shape();
    let c_out = weight.shape()[0];
    let g = ConvGeom::new(c_in, h, w, weight.shape()[2], stride, pad).expect("validated in forward");
    let plane = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![F::zero(); rows * plane];
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros([1, c_out, 1, 1]);
    let mut d_input = need_input_grad.then(|| Tensor::zeros(input.shape()));
    for b in 0..n {
        let gy = grad_out.item(b);
        for (co, chunk) in gy.chunks(plane).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().copied().sum();
        }
        im2col(input.item(b), &g, &mut cols);
        // dW += gy * cols^T
        F::gemm(
            c_out,
            plane,
            rows,
            F::one(),
            gy,
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            F::one(),
            d_weight.data_mut(),
            (rows as isize, 1),
        );
        if let Some(dx) = d_input.as_mut() {
            // dcols = W^T * gy
            F::gemm(
                rows,
                c_out,
                plane,
                F::one(),
                weight.data(),
                (1, rows as isize),
                gy,
                (plane as isize, 1),
                F::zero(),
                &mut cols,
                (plane as isize, 1),
            );
            col2im(&cols, &g, dx.item_mut(b));
        }
    }
    (d_input, d_weight, d_bias)
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_size(in_len: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize) -> Result<usize> {
    ((in_len - 1) * stride + kernel + out_pad)
        .checked_sub(2 * pad)
        .filter(|&s| s > 0)
        .ok_or_else(|| VadError::Shape("transposed convolution output would be empty".into()))
}

fn deconv_geom(c_out: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Result<ConvGeom> {
    let oh = deconv_out_size(h, k, stride, pad, out_pad)?;
    let ow = deconv_out_size(w, k, stride, pad, out_pad)?;
    // the transposed convolution is the adjoint of this forward convolution
    let g = ConvGeom::new(c_out, oh, ow, k, stride, pad)?;
    if g.out_h != h || g.out_w != w {
        return Err(VadError::Shape(format!(
            "output padding {out_pad} is inconsistent with stride {stride}"
        )));
    }
    Ok(g)
}

pub fn deconv2d<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<F>> {
    let [n, c_in, h, w] = input.shape();
    let c_out = check_weight(weight, c_in, true)?;
    check_bias(bias, c_out)?;
    let k = weight.shape()[2];
    let g = deconv_geom(c_out, h, w, k, stride, pad, out_pad)?;
    let plane = h * w;
    let rows = g.col_rows();
    let mut out = Tensor::zeros([n, c_out, g.in_h, g.in_w]);
    let mut cols = vec![F::zero(); rows * plane];
    for b in 0..n {
        // cols = W^T * x with W viewed as [C_in, C_out*k*k]
        F::gemm(
            rows,
            c_in,
            plane,
            F::one(),
            weight.data(),
            (1, rows as isize),
            input.item(b),
            (plane as isize, 1),
            F::zero(),
            &mut cols,
            (plane as isize, 1),
        );
        let dst = out.item_mut(b);
        col2im(&cols, &g, dst);
        if let Some(bias) = bias {
            let out_plane = g.in_h * g.in_w;
            for (co, chunk) in dst.chunks_mut(out_plane).enumerate() {
                let bv = bias.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub fn deconv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_input_grad: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [n, c_in, h, w] = input.shape();
    let c_out = weight.shape()[1];
    let k = weight.shape()[2];
    let g = deconv_geom(c_out, h, w, k, stride, pad, out_pad).expect("validated in forward");
    let plane = h * w;
    let rows = g.col_rows();
    let out_plane = g.in_h * g.in_w;
    let mut cols = vec![F::zero(); rows * plane];
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros([1, c_out, 1, 1]);
    let mut d_input = need_input_grad.then(|| Tensor::zeros(input.shape()));
    for b in 0..n {
        let gy = grad_out.item(b);
        for (co, chunk) in gy.chunks(out_plane).enumerate() {
            d_bias.data_mut()[co] += chunk.iter().copied().sum();
        }
        im2col(gy, &g, &mut cols);
        // dW += x * cols^T  -> [C_in, C_out*k*k]
        F::gemm(
            c_in,
            plane,
            rows,
            F::one(),
            input.item(b),
            (plane as isize, 1),
            &cols,
            (1, plane as isize),
            F::one(),
            d_weight.data_mut(),
            (rows as isize, 1),
        );
        if let Some(dx) = d_input.as_mut() {
            F::gemm(
                c_in,
                rows,
                plane,
                F::one(),
                weight.data(),
                (rows as isize, 1),
                &cols,
                (plane as isize, 1),
                F::zero(),
                dx.item_mut(b),
                (plane as isize, 1),
            );
        }
    }
    (d_input, d_weight, d_bias)
}
