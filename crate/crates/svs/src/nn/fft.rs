//! Feed-forward Transformer blocks: multi-head self-attention plus a
//! 1-D convolutional feed-forward, residual connections, post layer norm.

use crate::error::{Result, SvsError};
use crate::nn::layers::{conv1d, layer_norm, linear, LayerNorm};
use crate::nn::ParamStore;
use candle_core::{Device, Tensor, D};
use candle_nn::Module;

#[derive(Debug, Clone, Copy)]
pub struct FftConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ffn_kernel: usize,
    pub blocks: usize,
    pub position_encoding: bool,
}

pub struct FftBlock {
    q: candle_nn::Linear,
    k: candle_nn::Linear,
    v: candle_nn::Linear,
    o: candle_nn::Linear,
    norm1: LayerNorm,
    norm2: LayerNorm,
    ff1: candle_nn::Conv1d,
    ff2: candle_nn::Conv1d,
    heads: usize,
    head_dim: usize,
}

impl FftBlock {
    fn new(ps: &ParamStore, cfg: &FftConfig) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 {
            return Err(SvsError::Config("dim must divide by heads".into()));
        }
        Ok(Self {
            q: linear(ps, "q", cfg.dim, cfg.dim)?,
            k: linear(ps, "k", cfg.dim, cfg.dim)?,
            v: linear(ps, "v", cfg.dim, cfg.dim)?,
            o: linear(ps, "o", cfg.dim, cfg.dim)?,
            norm1: layer_norm(ps, "norm1", cfg.dim)?,
            norm2: layer_norm(ps, "norm2", cfg.dim)?,
            ff1: conv1d(ps, "ff1", cfg.dim, cfg.ffn_hidden, cfg.ffn_kernel, 1)?,
            ff2: conv1d(ps, "ff2", cfg.ffn_hidden, cfg.dim, 1, 1)?,
            heads: cfg.heads,
            head_dim: cfg.dim / cfg.heads,
        })
    }

    /// `x: [B, T, C]`, `mask: [B, T]` (1 = keep). Padded frames neither
    /// attend nor leak through the conv feed-forward.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y
                .reshape((b, t, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .reshape((b * self.heads, t, self.head_dim))?
                .contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;

        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(1, 2)?)? * scale)?; // [B*h, T, T]
        if let Some(mask) = mask {
            // keys at padded positions get -1e9 before softmax
            let bias = ((mask.ones_like()? - mask)? * (-1e9))?
                .reshape((b, 1, 1, t))?
                .broadcast_as((b, self.heads, t, t))?
                .reshape((b * self.heads, t, t))?;
            scores = (scores + bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn
            .matmul(&v)?
            .reshape((b, self.heads, t, self.head_dim))?
            .transpose(1, 2)?
            .reshape((b, t, c))?;
        let x = self.norm1.forward(&(x + self.o.forward(&ctx)?)?)?;
        let x = match mask {
            Some(m) => x.broadcast_mul(&m.reshape((b, t, 1))?)?,
            None => x,
        };

        let h = x.transpose(1, 2)?; // [B, C, T]
        let h = self.ff1.forward(&h)?.relu()?;
        let h = match mask {
            Some(m) => h.broadcast_mul(&m.reshape((b, 1, t))?)?,
            None => h,
        };
        let h = self.ff2.forward(&h)?.transpose(1, 2)?;
        let x = self.norm2.forward(&(&x + h)?)?;
        match mask {
            Some(m) => Ok(x.broadcast_mul(&m.reshape((b, t, 1))?)?),
            None => Ok(x),
        }
    }
}

/// A stack of FFT blocks with optional sinusoidal position encoding at the
/// input.
pub struct FftStack {
    blocks: Vec<FftBlock>,
    position_encoding: bool,
    dim: usize,
}

impl FftStack {
    pub fn new(ps: &ParamStore, cfg: &FftConfig) -> Result<Self> {
        let blocks = (0..cfg.blocks)
            .map(|i| FftBlock::new(&ps.pp(&format!("block{i}")), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            position_encoding: cfg.position_encoding,
            dim: cfg.dim,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        let mut h = if self.position_encoding {
            x.broadcast_add(&sinusoidal_encoding(t, self.dim, x.device())?)?
        } else {
            x.clone()
        };
        if let Some(m) = mask {
            h = h.broadcast_mul(&m.unsqueeze(2)?)?;
        }
        for block in &self.blocks {
            h = block.forward(&h, mask)?;
        }
        Ok(h)
    }
}

pub fn sinusoidal_encoding(t: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0.0f32; t * dim];
    for pos in 0..t {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin() as f32;
            data[pos * dim + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Ok(Tensor::from_vec(data, (1, t, dim), device)?)
}
