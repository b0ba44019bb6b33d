//! Forward and adjoint kernels for every layer type.
//!
//! All loops have a fixed nesting order so repeated calls are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square-kernel 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel_size, stride, padding }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("convolution needs at least one input and output channel"));
        }
        if self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel_size and stride must be >= 1"));
        }
        Ok(())
    }

    /// Output extent along one spatial axis, or an error when it collapses.
    pub fn out_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return Err(Error::shape(format!(
                "spatial extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel_size
            )));
        }
        Ok((padded - self.kernel_size) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    fn check(&self, input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, usize)> {
        self.validate()?;
        if input.ndim() != 3 || input.shape()[0] != self.in_channels {
            return Err(Error::shape(format!("conv input must be {}xHxW, got {:?}", self.in_channels, input.shape())));
        }
        weights.expect_shape(&self.weight_shape(), "conv weights")?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        Ok((h, w, self.out_extent(h)?, self.out_extent(w)?))
    }
}

/// Zero-padded cross-correlation: `O x C x K x K` weights over `C x H x W` input.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (h, w, oh, ow) = spec.check(input, weights)?;
    bias.expect_shape(&[spec.out_channels], "conv bias")?;
    let (c_in, k) = (spec.in_channels, spec.kernel_size);
    let (x, wt, b) = (input.data(), weights.data(), bias.data());
    let mut out = vec![0.0; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c * h + iy as usize) * w;
                        let wrow = ((o * c_in + c) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[wrow + kx] * x[xrow + ix as usize];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![spec.out_channels, oh, ow], out)
}

/// Gradients of a convolution with respect to input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn conv2d_adjoint(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    with_params: bool,
) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let (h, w, oh, ow) = spec.check(input, weights)?;
    grad_out.expect_shape(&[spec.out_channels, oh, ow], "conv grad_out")?;
    let (c_in, k) = (spec.in_channels, spec.kernel_size);
    let (x, wt, g) = (input.data(), weights.data(), grad_out.data());
    let mut gx = vec![0.0; input.len()];
    let mut gw = vec![0.0; if with_params { weights.len() } else { 0 }];
    let mut gb = vec![0.0; if with_params { spec.out_channels } else { 0 }];
    for o in 0..spec.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(o * oh + oy) * ow + ox];
                if with_params {
                    gb[o] += go;
                }
                for c in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c * h + iy as usize) * w;
                        let wrow = ((o * c_in + c) * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[xrow + ix as usize] += wt[wrow + kx] * go;
                            if with_params {
                                gw[wrow + kx] += x[xrow + ix as usize] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = Tensor::new(input.shape().to_vec(), gx)?;
    let params = if with_params {
        Some((Tensor::new(weights.shape().to_vec(), gw)?, Tensor::new(vec![spec.out_channels], gb)?))
    } else {
        None
    };
    Ok((gx, params))
}

pub fn conv2d_backward(input: &Tensor, weights: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<ConvGrads> {
    let (gx, params) = conv2d_adjoint(input, weights, spec, grad_out, true)?;
    let (gw, gb) = params.expect("parameter gradients requested");
    Ok(ConvGrads { input: gx, weights: gw, bias: gb })
}

/// Input adjoint only; skips the weight and bias accumulations.
pub fn conv2d_backward_input(input: &Tensor, weights: &Tensor, spec: &ConvSpec, grad_out: &Tensor) -> Result<Tensor> {
    conv2d_adjoint(input, weights, spec, grad_out, false).map(|(gx, _)| gx)
}

fn dense_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize)> {
    if weights.ndim() != 2 || input.ndim() != 1 || weights.shape()[1] != input.len() {
        return Err(Error::shape(format!(
            "dense weights {:?} do not accept input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    Ok((weights.shape()[0], weights.shape()[1]))
}

/// `weights · input + bias` for `M x N` weights.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights)?;
    bias.expect_shape(&[m], "dense bias")?;
    let (x, w, b) = (input.data(), weights.data(), bias.data());
    let out = (0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            row.iter().zip(x).fold(b[i], |acc, (wv, xv)| acc + wv * xv)
        })
        .collect();
    Tensor::new(vec![m], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (m, n) = dense_dims(input, weights)?;
    grad_out.expect_shape(&[m], "dense grad_out")?;
    let gx = dense_backward_input(input, weights, grad_out)?;
    let (x, g) = (input.data(), grad_out.data());
    let mut gw = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            gw[i * n + j] = g[i] * x[j];
        }
    }
    Ok(DenseGrads { input: gx, weights: Tensor::new(vec![m, n], gw)?, bias: grad_out.clone() })
}

pub fn dense_backward_input(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights)?;
    grad_out.expect_shape(&[m], "dense grad_out")?;
    let (w, g) = (weights.data(), grad_out.data());
    let mut gx = vec![0.0; n];
    for i in 0..m {
        let row = &w[i * n..(i + 1) * n];
        for (acc, wv) in gx.iter_mut().zip(row) {
            *acc += wv * g[i];
        }
    }
    Tensor::new(vec![n], gx)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Plain chain-rule ReLU adjoint, gated on the recorded post-activation.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |a, g| if a > 0.0 { g } else { 0.0 })
}

fn pool_dims(input_shape: &[usize]) -> Result<(usize, usize)> {
    if input_shape.len() != 3 {
        return Err(Error::shape(format!("pooling expects CxHxW, got {input_shape:?}")));
    }
    Ok((input_shape[0], input_shape[1] * input_shape[2]))
}

/// Per-channel spatial mean.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    let (c, hw) = pool_dims(input.shape())?;
    let out = input.data().chunks_exact(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    debug_assert_eq!(c, input.len() / hw);
    Tensor::new(vec![c], out)
}

/// Spreads each channel gradient uniformly over its `H * W` cells.
pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (c, hw) = pool_dims(input_shape)?;
    grad_out.expect_shape(&[c], "pool grad_out")?;
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect();
    Tensor::new(input_shape.to_vec(), data)
}

/// Max-shifted softmax followed by negative log likelihood of `label`.
///
/// Returns the loss and `softmax - one_hot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if logits.ndim() != 1 {
        return Err(Error::shape(format!("logits must be a vector, got {:?}", logits.shape())));
    }
    if label >= logits.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let log_total = total.ln();
    let loss = -(logits.data()[label] - max - log_total);
    let grad = exps.iter().enumerate().map(|(i, &e)| e / total - if i == label { 1.0 } else { 0.0 }).collect();
    Ok((loss, Tensor::new(vec![logits.len()], grad)?))
}
