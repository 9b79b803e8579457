//! Speaker encoder: a channel-reduced TDNN with squeeze-excitation blocks
//! and attentive statistics pooling, producing 192-dimensional frame-level
//! and pooled speaker embeddings from log-mel input.

use crate::config::ModelConfig;
use crate::error::{Result, SvsError};
use crate::nn::layers::{conv1d, linear};
use crate::nn::ParamStore;
use candle_core::{Tensor, D};
use candle_nn::Module;

/// Minimum mel frames the encoder accepts (receptive field plus pooling
/// headroom).
pub const MIN_FRAMES: usize = 16;

pub const SPEAKER_DIM: usize = 192;

/// Utterance-level (`vec`) and optional frame-level speaker embeddings.
#[derive(Debug, Clone)]
pub struct SpeakerEmbedding {
    /// `[B, 192]` pooled embedding.
    pub vec: Tensor,
    /// `[B, T, 192]` frame embeddings (pre-training conditioning).
    pub frame_vecs: Option<Tensor>,
}

struct SeBlock {
    conv: candle_nn::Conv1d,
    squeeze: candle_nn::Linear,
    excite: candle_nn::Linear,
}

impl SeBlock {
    fn new(ps: &ParamStore, ch: usize, dilation: usize) -> Result<Self> {
        Ok(Self {
            conv: conv1d(ps, "conv", ch, ch, 3, dilation)?,
            squeeze: linear(ps, "squeeze", ch, (ch / 4).max(4))?,
            excite: linear(ps, "excite", (ch / 4).max(4), ch)?,
        })
    }

    /// `h: [B, ch, T]`, `mask_ct: [B, 1, T]`.
    fn forward(&self, h: &Tensor, mask_ct: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(&h.broadcast_mul(mask_ct)?)?.relu()?;
        // masked mean over time -> [B, ch]
        let denom = mask_ct.sum(D::Minus1)?; // [B, 1]
        let pooled = y
            .broadcast_mul(mask_ct)?
            .sum(D::Minus1)?
            .broadcast_div(&denom)?;
        let s = candle_nn::ops::sigmoid(&self.excite.forward(&self.squeeze.forward(&pooled)?.relu()?)?)?;
        let scaled = y.broadcast_mul(&s.unsqueeze(2)?)?;
        Ok((h + scaled)?)
    }
}

pub struct SpeakerEncoder {
    conv_in: candle_nn::Conv1d,
    blocks: Vec<SeBlock>,
    mfa: candle_nn::Conv1d,
    attn_hidden: candle_nn::Conv1d,
    attn_out: candle_nn::Conv1d,
    proj: candle_nn::Linear,
}

impl SpeakerEncoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, mel_bands: usize) -> Result<Self> {
        let ch = cfg.speaker_channels;
        let conv_in = conv1d(ps, "conv_in", mel_bands, ch, 5, 1)?;
        let blocks = vec![
            SeBlock::new(&ps.pp("se0"), ch, 2)?,
            SeBlock::new(&ps.pp("se1"), ch, 3)?,
        ];
        let mfa = conv1d(ps, "mfa", 2 * ch, SPEAKER_DIM, 1, 1)?;
        let attn_hidden = conv1d(ps, "attn_hidden", SPEAKER_DIM, ch / 2, 1, 1)?;
        let attn_out = conv1d(ps, "attn_out", ch / 2, SPEAKER_DIM, 1, 1)?;
        let proj = linear(ps, "proj", 2 * SPEAKER_DIM, SPEAKER_DIM)?;
        Ok(Self {
            conv_in,
            blocks,
            mfa,
            attn_hidden,
            attn_out,
            proj,
        })
    }

    /// `mel: [B, T, mel_bands]`, `mask: [B, T]`. Deterministic.
    pub fn forward(&self, mel: &Tensor, mask: &Tensor) -> Result<SpeakerEmbedding> {
        let (b, t, _m) = mel.dims3()?;
        if t < MIN_FRAMES {
            return Err(SvsError::AudioTooShort(format!(
                "speaker encoder needs >= {MIN_FRAMES} frames, got {t}"
            )));
        }
        if mask.dims() != [b, t] {
            return Err(SvsError::shape("mel/mask mismatch".into()));
        }
        let mask_ct = mask.reshape((b, 1, t))?;
        let x = mel.transpose(1, 2)?.contiguous()?; // [B, M, T]
        let h0 = self.conv_in.forward(&x.broadcast_mul(&mask_ct)?)?.relu()?;
        let h1 = self.blocks[0].forward(&h0, &mask_ct)?;
        let h2 = self.blocks[1].forward(&h1, &mask_ct)?;
        let cat = Tensor::cat(&[&h1, &h2], 1)?;
        let frames = self.mfa.forward(&cat.broadcast_mul(&mask_ct)?)?.relu()?; // [B, 192, T]

        // Attentive statistics pooling with masked softmax over time.
        let scores = self
            .attn_out
            .forward(&self.attn_hidden.forward(&frames)?.tanh()?)?; // [B, 192, T]
        let bias = ((mask_ct.ones_like()? - &mask_ct)? * (-1e9))?;
        let weights = candle_nn::ops::softmax(&scores.broadcast_add(&bias)?, D::Minus1)?;
        let mean = (&frames * &weights)?.sum(D::Minus1)?; // [B, 192]
        let sq_mean = (frames.sqr()? * &weights)?.sum(D::Minus1)?;
        let var = (sq_mean - mean.sqr()?)?.clamp(1e-9, f64::INFINITY)?;
        let std = var.sqrt()?;
        let pooled = self.proj.forward(&Tensor::cat(&[&mean, &std], 1)?)?;

        let frame_vecs = frames
            .broadcast_mul(&mask_ct)?
            .transpose(1, 2)?
            .contiguous()?;
        Ok(SpeakerEmbedding {
            vec: pooled,
            frame_vecs: Some(frame_vecs),
        })
    }
}

/// Arithmetic mean of pooled utterance embeddings over a corpus; the fixed
/// speaker condition for fine-tuning. Accumulates in f64 so the result does
/// not depend on corpus order.
pub fn average_speaker_embedding<I>(encoder: &SpeakerEncoder, mels: I) -> Result<Tensor>
where
    I: IntoIterator<Item = (Tensor, Tensor)>,
{
    let mut acc: Option<Vec<f64>> = None;
    let mut count = 0usize;
    let mut device = None;
    for (mel, mask) in mels {
        device = Some(mel.device().clone());
        let emb = encoder.forward(&mel, &mask)?;
        let rows = emb.vec.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
        for row in rows {
            match &mut acc {
                None => acc = Some(row),
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            count += 1;
        }
    }
    let acc = acc.ok_or_else(|| SvsError::other("empty corpus for speaker averaging"))?;
    let mean: Vec<f32> = acc.iter().map(|a| (*a / count as f64) as f32).collect();
    let dim = mean.len();
    Ok(Tensor::from_vec(mean, (1, dim), &device.unwrap())?)
}

/// Cosine similarity between two pooled embeddings `[1, C]`.
pub fn cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = a.flatten_all()?.to_dtype(candle_core::DType::F64)?;
    let b = b.flatten_all()?.to_dtype(candle_core::DType::F64)?;
    let dot = (&a * &b)?.sum_all()?.to_scalar::<f64>()?;
    let na = a.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
    let nb = b.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(SvsError::Undefined("zero-norm speaker embedding".into()));
    }
    Ok(dot / (na * nb))
}
