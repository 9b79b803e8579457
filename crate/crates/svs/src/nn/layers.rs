//! Layer constructors over the parameter store.

use crate::error::Result;
use crate::nn::{Init, ParamStore};
use candle_core::Tensor;
use candle_nn::{Conv1dConfig, Conv2dConfig, Module};

pub fn linear(ps: &ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<candle_nn::Linear> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_dim, in_dim], "weight", Init::KaimingIn)?;
    let b = scope.get(&[out_dim], "bias", Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// Linear with zero-initialized weight and bias; the layer starts as the
/// constant-zero map (used by flow couplings and variance heads).
pub fn linear_zero(
    ps: &ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<candle_nn::Linear> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_dim, in_dim], "weight", Init::Zeros)?;
    let b = scope.get(&[out_dim], "bias", Init::Zeros)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// 'same'-padding Conv1d over `[B, C, T]`.
pub fn conv1d(
    ps: &ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    dilation: usize,
) -> Result<candle_nn::Conv1d> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_ch, in_ch, kernel], "weight", Init::KaimingIn)?;
    let b = scope.get(&[out_ch], "bias", Init::Zeros)?;
    let cfg = Conv1dConfig {
        padding: (kernel - 1) * dilation / 2,
        stride: 1,
        dilation,
        groups: 1,
        cudnn_fwd_algo: None,
    };
    Ok(candle_nn::Conv1d::new(w, Some(b), cfg))
}

pub fn conv1d_zero(
    ps: &ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
) -> Result<candle_nn::Conv1d> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_ch, in_ch, kernel], "weight", Init::Zeros)?;
    let b = scope.get(&[out_ch], "bias", Init::Zeros)?;
    let cfg = Conv1dConfig {
        padding: (kernel - 1) / 2,
        stride: 1,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    };
    Ok(candle_nn::Conv1d::new(w, Some(b), cfg))
}

pub fn conv1d_strided(
    ps: &ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
) -> Result<candle_nn::Conv1d> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_ch, in_ch, kernel], "weight", Init::KaimingIn)?;
    let b = scope.get(&[out_ch], "bias", Init::Zeros)?;
    let cfg = Conv1dConfig {
        padding: (kernel - 1) / 2,
        stride,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    };
    Ok(candle_nn::Conv1d::new(w, Some(b), cfg))
}

/// Conv2d with per-axis 'same' padding, for the period discriminators.
pub fn conv2d(
    ps: &ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel_h: usize,
    stride_h: usize,
) -> Result<Conv2dSame> {
    let scope = ps.pp(name);
    let w = scope.get(&[out_ch, in_ch, kernel_h, 1], "weight", Init::KaimingIn)?;
    let b = scope.get(&[out_ch], "bias", Init::Zeros)?;
    let cfg = Conv2dConfig {
        padding: 0,
        stride: 1,
        dilation: 1,
        groups: 1,
        cudnn_fwd_algo: None,
    };
    Ok(Conv2dSame {
        inner: candle_nn::Conv2d::new(w, Some(b), cfg),
        pad_h: (kernel_h - 1) / 2,
        stride_h,
    })
}

/// Conv2d wrapper applying (k-1)/2 zero padding and stride on the first
/// spatial axis only.
#[derive(Debug)]
pub struct Conv2dSame {
    inner: candle_nn::Conv2d,
    pad_h: usize,
    stride_h: usize,
}

impl Conv2dSame {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.pad_with_zeros(2, self.pad_h, self.pad_h)?;
        // stride on height implemented by striding the output of a stride-1
        // conv would waste work; candle's Conv2d stride applies to both axes,
        // so stride the input rows instead when requested.
        let out = if self.stride_h == 1 {
            self.inner.forward(&x)?
        } else {
            let cfg = Conv2dConfig {
                padding: 0,
                stride: self.stride_h,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            };
            let w = self.inner.weight().clone();
            let b = self.inner.bias().cloned();
            // width is 1-kernel, so a uniform stride never skips columns
            // as long as the width dimension stays 1 after periodization.
            candle_nn::Conv2d::new(w, b, cfg).forward(&x)?
        };
        Ok(out)
    }
}

pub fn embedding(ps: &ParamStore, name: &str, vocab: usize, dim: usize) -> Result<candle_nn::Embedding> {
    let scope = ps.pp(name);
    let w = scope.get(&[vocab, dim], "weight", Init::Normal(0.02))?;
    Ok(candle_nn::Embedding::new(w, dim))
}

/// Layer norm over the last dimension, composed from primitives so the
/// scale/bias receive gradients.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

pub fn layer_norm(ps: &ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    let scope = ps.pp(name);
    Ok(LayerNorm {
        weight: scope.get(&[dim], "weight", Init::Ones)?,
        bias: scope.get(&[dim], "bias", Init::Zeros)?,
        eps: 1e-5,
    })
}

impl LayerNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let denom = (var + self.eps)?.sqrt()?;
        let normed = centered.broadcast_div(&denom)?;
        Ok(normed
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{Device, Var};

    #[test]
    fn layer_norm_normalizes_and_propagates_grads() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(3, dev.clone());
        let ln = layer_norm(&ps, "ln", 4).unwrap();
        let x = Var::from_tensor(
            &Tensor::from_vec(vec![1.0f32, 2.0, 3.0, 4.0], (1, 4), &dev).unwrap(),
        )
        .unwrap();
        let y = ln.forward(x.as_tensor()).unwrap();
        let row = y.to_vec2::<f32>().unwrap()[0].clone();
        let mean: f32 = row.iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);

        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(&x).is_some());
        let (_, w) = ps
            .named_vars()
            .into_iter()
            .find(|(n, _)| n == "ln.weight")
            .unwrap();
        assert!(grads.get(&w).is_some(), "layer norm scale got no gradient");
    }

    #[test]
    fn conv1d_same_preserves_length() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(3, dev.clone());
        let conv = conv1d(&ps, "c", 4, 8, 5, 1).unwrap();
        let x = Tensor::zeros((2, 4, 17), candle_core::DType::F32, &dev).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[2, 8, 17]);
        let dilated = conv1d(&ps, "cd", 4, 8, 3, 3).unwrap();
        assert_eq!(dilated.forward(&x).unwrap().dims(), &[2, 8, 17]);
    }
}
