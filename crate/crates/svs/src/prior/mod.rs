//! Conditional prior: score/phoneme encoding, speaker conditioning,
//! differentiable duration regulation, frame-level pitch/energy prediction,
//! and the frame-level prior distribution.

pub mod duration;
pub mod speaker;
pub mod variance;

pub use duration::{DurationRatios, DurationRegulator, ProjectionMatrix};
pub use speaker::{average_speaker_embedding, SpeakerEmbedding, SpeakerEncoder};
pub use variance::{FrameVariance, VarianceAdaptor};

use crate::config::ModelConfig;
use crate::error::{Result, SvsError};
use crate::nn::fft::{FftConfig, FftStack};
use crate::nn::layers::{conv1d, layer_norm, linear, LayerNorm};
use crate::nn::ParamStore;
use candle_core::Tensor;
use candle_nn::Module;

/// Frame-level Gaussian prior over the latent space.
#[derive(Debug, Clone)]
pub struct PriorDistribution {
    /// `[B, T, C]`
    pub mean: Tensor,
    /// `[B, T, C]`
    pub log_var: Tensor,
}

/// Speaker condition as consumed by the encoders: frame-level during
/// pre-training, a single pooled (or corpus-averaged) vector during
/// fine-tuning.
#[derive(Debug, Clone)]
pub enum SpeakerCondition {
    /// `[B, T, C]`
    Frames(Tensor),
    /// `[B, C]`
    Pooled(Tensor),
}

impl SpeakerCondition {
    /// Broadcasts to `[B, T, C]` for a given frame count.
    pub fn as_frames(&self, t: usize) -> Result<Tensor> {
        match self {
            SpeakerCondition::Frames(f) => {
                if f.dim(1)? != t {
                    return Err(SvsError::shape(format!(
                        "speaker frames {:?} vs length {t}",
                        f.dims()
                    )));
                }
                Ok(f.clone())
            }
            SpeakerCondition::Pooled(v) => {
                let (b, c) = v.dims2()?;
                Ok(v.reshape((b, 1, c))?
                    .broadcast_as((b, t, c))?
                    .contiguous()?)
            }
        }
    }
}

/// The note encoder: embedding sum plus an FFT-block stack, usable at the
/// phoneme level (fine-tuning, scores) or the frame level (pre-training,
/// soft phoneme embeddings and quantized estimated pitch).
pub struct ScoreEncoder {
    phoneme_table: Tensor,
    pitch_embed: candle_nn::Embedding,
    stack: FftStack,
    dim: usize,
}

/// MIDI ids 0..=127; 0 is the rest token.
pub const PITCH_VOCAB: usize = 128;

impl ScoreEncoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let phoneme_table = ps.pp("phoneme_table").get(
            &[cfg.n_classes(), cfg.hidden_dim],
            "weight",
            crate::nn::Init::Normal(0.02),
        )?;
        let pitch_embed = crate::nn::layers::embedding(ps, "pitch_embed", PITCH_VOCAB, cfg.hidden_dim)?;
        let stack = FftStack::new(
            &ps.pp("fft"),
            &FftConfig {
                dim: cfg.hidden_dim,
                heads: cfg.attention_heads,
                ffn_hidden: cfg.ffn_hidden,
                ffn_kernel: cfg.ffn_kernel,
                blocks: cfg.note_encoder_blocks,
                position_encoding: cfg.position_encoding,
            },
        )?;
        Ok(Self {
            phoneme_table,
            pitch_embed,
            stack,
            dim: cfg.hidden_dim,
        })
    }

    /// The phoneme look-up table shared with `probs_to_embeddings`,
    /// `[V+1, C]`.
    pub fn phoneme_table(&self) -> &Tensor {
        &self.phoneme_table
    }

    /// Phoneme-level hidden lookup: ids are 1-based lexicon ids (`[B, P]`,
    /// u32).
    pub fn embed_phoneme_ids(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::Embedding::new(self.phoneme_table.clone(), self.dim).forward(ids)?)
    }

    pub fn embed_pitch_ids(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.pitch_embed.forward(ids)?)
    }

    /// Fine-tuning mode: phoneme-level score embeddings. `extra` carries the
    /// duration embedding when the duration regulator is active.
    pub fn forward_phoneme_level(
        &self,
        phoneme_ids: &Tensor,
        pitch_ids: &Tensor,
        extra: Option<&Tensor>,
        speaker: &SpeakerCondition,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let (b, p) = phoneme_ids.dims2()?;
        if pitch_ids.dims() != [b, p] {
            return Err(SvsError::shape("phoneme/pitch id shape mismatch".into()));
        }
        let mut x = (self.embed_phoneme_ids(phoneme_ids)? + self.embed_pitch_ids(pitch_ids)?)?;
        if let Some(e) = extra {
            x = (x + e)?;
        }
        let x = (x + speaker.as_frames(p)?)?;
        self.stack.forward(&x, Some(mask))
    }

    /// Pre-training mode: frame-level soft phoneme embeddings plus quantized
    /// estimated-pitch embeddings.
    pub fn forward_frame_level(
        &self,
        phoneme_emb: &Tensor,
        pitch_ids: &Tensor,
        speaker: &SpeakerCondition,
        mask: &Tensor,
    ) -> Result<Tensor> {
        let (b, t, c) = phoneme_emb.dims3()?;
        if c != self.dim {
            return Err(SvsError::shape(format!("embedding width {c} != {}", self.dim)));
        }
        if pitch_ids.dims() != [b, t] {
            return Err(SvsError::shape("pitch id shape mismatch".into()));
        }
        let x = (phoneme_emb + self.embed_pitch_ids(pitch_ids)?)?;
        let x = (x + speaker.as_frames(t)?)?;
        self.stack.forward(&x, Some(mask))
    }
}

/// Small conv stack emitting the frame-level prior mean and log-variance.
pub struct FramePrior {
    convs: Vec<(candle_nn::Conv1d, LayerNorm)>,
    out: candle_nn::Linear,
    dim: usize,
}

impl FramePrior {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..cfg.frame_prior_layers {
            convs.push((
                conv1d(&ps.pp(&format!("conv{i}")), "conv", cfg.hidden_dim, cfg.hidden_dim, 3, 1)?,
                layer_norm(&ps.pp(&format!("conv{i}")), "norm", cfg.hidden_dim)?,
            ));
        }
        let out = linear(ps, "out", cfg.hidden_dim, 2 * cfg.hidden_dim)?;
        Ok(Self {
            convs,
            out,
            dim: cfg.hidden_dim,
        })
    }

    pub fn forward(&self, frame_hidden: &Tensor, mask: &Tensor) -> Result<PriorDistribution> {
        let (b, t, _c) = frame_hidden.dims3()?;
        let mask3 = mask.reshape((b, t, 1))?;
        let mut h = frame_hidden.broadcast_mul(&mask3)?;
        for (conv, norm) in &self.convs {
            let y = conv
                .forward(&h.transpose(1, 2)?.contiguous()?)?
                .transpose(1, 2)?
                .relu()?;
            h = norm.forward(&y)?.broadcast_mul(&mask3)?;
        }
        let stats = self.out.forward(&h)?;
        Ok(PriorDistribution {
            mean: stats.narrow(2, 0, self.dim)?.broadcast_mul(&mask3)?,
            log_var: stats
                .narrow(2, self.dim, self.dim)?
                .broadcast_mul(&mask3)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::{frame_mask, normal_tensor, rng_for, ParamStore};
    use candle_core::{DType, Device, Tensor};

    fn cfg() -> ModelConfig {
        ModelConfig {
            note_encoder_blocks: 2,
            ffn_hidden: 64,
            frame_prior_layers: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn phoneme_level_shape_contract() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(8, dev.clone());
        let enc = ScoreEncoder::new(&ps.pp("enc"), &cfg()).unwrap();
        let ids = Tensor::from_vec(vec![1u32, 2, 3, 4, 5, 6, 7], (1, 7), &dev).unwrap();
        let pitch = Tensor::from_vec(vec![60u32; 7], (1, 7), &dev).unwrap();
        let spk = SpeakerCondition::Pooled(Tensor::zeros((1, 192), DType::F32, &dev).unwrap());
        let mask = frame_mask(&[7], 7, &dev).unwrap();
        let h = enc
            .forward_phoneme_level(&ids, &pitch, None, &spk, &mask)
            .unwrap();
        assert_eq!(h.dims(), &[1, 7, 192]);
        // embedding tables are 192 wide
        assert_eq!(enc.phoneme_table().dims(), &[62, 192]);
    }

    #[test]
    fn speaker_condition_changes_output() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(8, dev.clone());
        let enc = ScoreEncoder::new(&ps.pp("enc"), &cfg()).unwrap();
        let ids = Tensor::from_vec(vec![1u32, 2, 3], (1, 3), &dev).unwrap();
        let pitch = Tensor::from_vec(vec![0u32, 64, 72], (1, 3), &dev).unwrap();
        let mask = frame_mask(&[3], 3, &dev).unwrap();
        let zero = SpeakerCondition::Pooled(Tensor::zeros((1, 192), DType::F32, &dev).unwrap());
        let nonzero = SpeakerCondition::Pooled(
            normal_tensor(&mut rng_for(3, "spk"), &[1, 192], 1.0, &dev).unwrap(),
        );
        let a = enc
            .forward_phoneme_level(&ids, &pitch, None, &zero, &mask)
            .unwrap();
        let b = enc
            .forward_phoneme_level(&ids, &pitch, None, &nonzero, &mask)
            .unwrap();
        let diff = (a - b)
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
            .sqrt();
        assert!(diff > 0.0, "speaker condition not injected");
    }

    #[test]
    fn frame_prior_shapes_and_masking() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(8, dev.clone());
        let fp = FramePrior::new(&ps.pp("fp"), &cfg()).unwrap();
        let h = normal_tensor(&mut rng_for(4, "h"), &[1, 9, 192], 1.0, &dev).unwrap();
        let mask = frame_mask(&[9], 9, &dev).unwrap();
        let prior = fp.forward(&h, &mask).unwrap();
        assert_eq!(prior.mean.dims(), &[1, 9, 192]);
        assert_eq!(prior.log_var.dims(), &[1, 9, 192]);

        // finite for wide random input range
        let wide = normal_tensor(&mut rng_for(4, "wide"), &[1, 9, 192], 10.0, &dev).unwrap();
        let p2 = fp.forward(&wide, &mask).unwrap();
        let finite = p2
            .mean
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(finite.is_finite());
    }

    #[test]
    fn padded_frames_do_not_change_prior_on_valid_frames() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(8, dev.clone());
        let fp = FramePrior::new(&ps.pp("fp"), &cfg()).unwrap();
        let h = normal_tensor(&mut rng_for(5, "h"), &[1, 8, 192], 1.0, &dev).unwrap();
        let mask = frame_mask(&[5], 8, &dev).unwrap();
        let a = fp.forward(&h, &mask).unwrap();
        // perturb the padded region only
        let noise = normal_tensor(&mut rng_for(6, "n"), &[1, 3, 192], 5.0, &dev).unwrap();
        let padded = Tensor::cat(
            &[h.narrow(1, 0, 5).unwrap(), (h.narrow(1, 5, 3).unwrap() + noise).unwrap()],
            1,
        )
        .unwrap();
        let b = fp.forward(&padded, &mask).unwrap();
        let diff = (a.mean.narrow(1, 0, 5).unwrap() - b.mean.narrow(1, 0, 5).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        // conv kernel 3 sees one padded neighbor at the boundary; the mask
        // zeroes padded inputs so valid frames are untouched
        assert_eq!(diff, 0.0);
    }
}
