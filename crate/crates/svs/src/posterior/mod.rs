//! Posterior side of the VAE: spectrogram encoder and, during pre-training,
//! the CTC-trained frame-level phoneme predictor.

pub mod ctc;

pub use ctc::{ctc_loss, greedy_decode};

use crate::config::ModelConfig;
use crate::error::{Result, SvsError};
use crate::nn::fft::{FftConfig, FftStack};
use crate::nn::layers::{conv1d, linear};
use crate::nn::ParamStore;
use candle_core::{Tensor, D};
use candle_nn::Module;

/// Frame-level Gaussian posterior. Masked frames are zeroed in all three
/// streams.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    /// `[B, T, C]`
    pub mean: Tensor,
    /// `[B, T, C]`
    pub log_var: Tensor,
    /// Reparameterized sample `mean + exp(0.5 log_var) * eps`, `[B, T, C]`.
    pub z: Tensor,
}

/// Row-stochastic frame-level phoneme probabilities plus their logs.
#[derive(Debug, Clone)]
pub struct PhonemeProbs {
    /// `[B, T, V+1]`, rows sum to 1.
    pub probs: Tensor,
    /// `log_softmax` of the same logits.
    pub log_probs: Tensor,
}

impl PhonemeProbs {
    /// Writes one item's probability matrix as whitespace-separated rows.
    pub fn write_text(&self, item: usize, path: &std::path::Path) -> Result<()> {
        let rows = self.probs.narrow(0, item, 1)?.squeeze(0)?.to_vec2::<f32>()?;
        let mut out = String::new();
        for row in rows {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:.6}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Dilated gated conv stack producing the frame-level posterior.
pub struct PosteriorEncoder {
    conv_in: candle_nn::Conv1d,
    gated: Vec<(candle_nn::Conv1d, candle_nn::Conv1d)>,
    conv_out: candle_nn::Conv1d,
    latent_dim: usize,
}

impl PosteriorEncoder {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig, n_linear_bins: usize) -> Result<Self> {
        let ch = cfg.posterior_channels;
        let conv_in = conv1d(ps, "conv_in", n_linear_bins, ch, cfg.posterior_kernel, 1)?;
        let mut gated = Vec::new();
        for i in 0..cfg.posterior_layers {
            let dilation = 3usize.pow(i as u32);
            let scope = format!("wn{i}");
            gated.push((
                conv1d(
                    &ps.pp(&scope),
                    "filter",
                    ch,
                    ch,
                    cfg.posterior_kernel,
                    dilation,
                )?,
                conv1d(&ps.pp(&scope), "gate", ch, ch, cfg.posterior_kernel, dilation)?,
            ));
        }
        let conv_out = conv1d(ps, "conv_out", ch, 2 * cfg.hidden_dim, 1, 1)?;
        Ok(Self {
            conv_in,
            gated,
            conv_out,
            latent_dim: cfg.hidden_dim,
        })
    }

    /// `linear_spec: [B, T, F]`, `mask: [B, T]`, `eps: [B, T, C]` standard
    /// normal (zeros give the posterior mean).
    pub fn encode(&self, linear_spec: &Tensor, mask: &Tensor, eps: &Tensor) -> Result<LatentPosterior> {
        let (b, t, _f) = linear_spec.dims3()?;
        let (mb, mt) = mask.dims2()?;
        if mb != b || mt != t {
            return Err(SvsError::shape(format!(
                "mask {:?} does not match spec {:?}",
                mask.dims(),
                linear_spec.dims()
            )));
        }
        if eps.dims() != [b, t, self.latent_dim] {
            return Err(SvsError::shape(format!(
                "eps {:?}, expected [{b}, {t}, {}]",
                eps.dims(),
                self.latent_dim
            )));
        }
        let mask_ct = mask.reshape((b, 1, t))?;
        let mut h = linear_spec.transpose(1, 2)?; // [B, F, T]
        h = h.broadcast_mul(&mask_ct)?;
        h = self.conv_in.forward(&h)?;
        for (filter, gate) in &self.gated {
            let hm = h.broadcast_mul(&mask_ct)?;
            let act = (filter.forward(&hm)?.tanh()?
                * candle_nn::ops::sigmoid(&gate.forward(&hm)?)?)?;
            h = (h + act)?;
        }
        let stats = self
            .conv_out
            .forward(&h.broadcast_mul(&mask_ct)?)?
            .transpose(1, 2)?; // [B, T, 2C]
        let mask3 = mask.reshape((b, t, 1))?;
        let mean = stats
            .narrow(2, 0, self.latent_dim)?
            .broadcast_mul(&mask3)?;
        let log_var = stats
            .narrow(2, self.latent_dim, self.latent_dim)?
            .broadcast_mul(&mask3)?;
        let std = (&log_var * 0.5)?.exp()?;
        let z = ((mean.clone() + (std * eps)?)?).broadcast_mul(&mask3)?;
        Ok(LatentPosterior { mean, log_var, z })
    }
}

/// Two FFT blocks and a projection onto the phoneme classes.
pub struct PhonemePredictor {
    stack: FftStack,
    proj: candle_nn::Linear,
    n_classes: usize,
}

impl PhonemePredictor {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let stack = FftStack::new(
            &ps.pp("fft"),
            &FftConfig {
                dim: cfg.hidden_dim,
                heads: cfg.attention_heads,
                ffn_hidden: cfg.ffn_hidden,
                ffn_kernel: cfg.ffn_kernel,
                blocks: cfg.phoneme_predictor_blocks,
                position_encoding: cfg.position_encoding,
            },
        )?;
        let proj = linear(ps, "proj", cfg.hidden_dim, cfg.n_classes())?;
        Ok(Self {
            stack,
            proj,
            n_classes: cfg.n_classes(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `z: [B, T, C]` from the posterior; returns row-stochastic
    /// probabilities over V+1 classes.
    pub fn forward(&self, z: &Tensor, mask: Option<&Tensor>) -> Result<PhonemeProbs> {
        let h = self.stack.forward(z, mask)?;
        let logits = self.proj.forward(&h)?;
        Ok(PhonemeProbs {
            probs: candle_nn::ops::softmax(&logits, D::Minus1)?,
            log_probs: candle_nn::ops::log_softmax(&logits, D::Minus1)?,
        })
    }
}

/// `p · table`: frame-level phoneme embeddings as convex combinations of
/// the look-up table rows. `probs: [B, T, V+1]`, `table: [V+1, C]`.
pub fn probs_to_embeddings(probs: &Tensor, table: &Tensor) -> Result<Tensor> {
    let (_b, _t, classes) = probs.dims3()?;
    let (rows, _dim) = table.dims2()?;
    if rows != classes {
        return Err(SvsError::shape(format!(
            "table rows {rows} != class count {classes}"
        )));
    }
    Ok(probs.broadcast_matmul(table)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::nn::{frame_mask, normal_tensor, rng_for, ParamStore};
    use candle_core::Device;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 192,
            posterior_channels: 32,
            posterior_layers: 2,
            phoneme_predictor_blocks: 2,
            ffn_hidden: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encode_shape_contract() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(2, dev.clone());
        let cfg = small_cfg();
        let enc = PosteriorEncoder::new(&ps.pp("post"), &cfg, 65).unwrap();
        let spec = normal_tensor(&mut rng_for(1, "spec"), &[1, 10, 65], 1.0, &dev).unwrap();
        let mask = frame_mask(&[10], 10, &dev).unwrap();
        let eps = normal_tensor(&mut rng_for(1, "eps"), &[1, 10, 192], 1.0, &dev).unwrap();
        let post = enc.encode(&spec, &mask, &eps).unwrap();
        assert_eq!(post.mean.dims(), &[1, 10, 192]);
        assert_eq!(post.log_var.dims(), &[1, 10, 192]);
        assert_eq!(post.z.dims(), &[1, 10, 192]);
    }

    #[test]
    fn masked_frames_are_zero() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(2, dev.clone());
        let cfg = small_cfg();
        let enc = PosteriorEncoder::new(&ps.pp("post"), &cfg, 65).unwrap();
        let spec = normal_tensor(&mut rng_for(1, "spec"), &[1, 10, 65], 1.0, &dev).unwrap();
        let mask = frame_mask(&[7], 10, &dev).unwrap();
        let eps = normal_tensor(&mut rng_for(1, "eps"), &[1, 10, 192], 1.0, &dev).unwrap();
        let post = enc.encode(&spec, &mask, &eps).unwrap();
        let tail = post.z.narrow(1, 7, 3).unwrap();
        let max_abs = tail
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(max_abs, 0.0);
    }

    #[test]
    fn zero_eps_returns_posterior_mean() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(2, dev.clone());
        let cfg = small_cfg();
        let enc = PosteriorEncoder::new(&ps.pp("post"), &cfg, 65).unwrap();
        let spec = normal_tensor(&mut rng_for(1, "spec"), &[1, 6, 65], 1.0, &dev).unwrap();
        let mask = frame_mask(&[6], 6, &dev).unwrap();
        let eps = Tensor::zeros((1, 6, 192), candle_core::DType::F32, &dev).unwrap();
        let post = enc.encode(&spec, &mask, &eps).unwrap();
        let diff = (post.z - post.mean)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn predictor_rows_are_stochastic_with_61_vocab() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(2, dev.clone());
        let cfg = ModelConfig {
            posterior_channels: 32,
            ffn_hidden: 64,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.phoneme_vocab, 61);
        let pred = PhonemePredictor::new(&ps.pp("phn"), &cfg).unwrap();
        let z = normal_tensor(&mut rng_for(3, "z"), &[1, 9, 192], 1.0, &dev).unwrap();
        let out = pred.forward(&z, None).unwrap();
        assert_eq!(out.probs.dims(), &[1, 9, 62]);
        let sums = out.probs.sum(D::Minus1).unwrap().flatten_all().unwrap();
        for s in sums.to_vec1::<f32>().unwrap() {
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }

    #[test]
    fn identical_frames_identical_rows_without_position_info() {
        let dev = Device::Cpu;
        let ps = ParamStore::new(2, dev.clone());
        let cfg = ModelConfig {
            position_encoding: false,
            ffn_kernel: 1,
            ffn_hidden: 64,
            ..ModelConfig::default()
        };
        let pred = PhonemePredictor::new(&ps.pp("phn"), &cfg).unwrap();
        let row = normal_tensor(&mut rng_for(5, "row"), &[1, 1, 192], 1.0, &dev).unwrap();
        let z = row.broadcast_as((1, 6, 192)).unwrap().contiguous().unwrap();
        let out = pred.forward(&z, None).unwrap();
        let rows = out.probs.to_vec3::<f32>().unwrap().remove(0);
        for t in 1..6 {
            for c in 0..62 {
                assert!((rows[t][c] - rows[0][c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn probs_to_embeddings_selects_and_mixes() {
        let dev = Device::Cpu;
        let table = Tensor::from_vec(
            vec![
                1.0f32, 2.0, //
                3.0, 4.0, //
                5.0, 6.0,
            ],
            (3, 2),
            &dev,
        )
        .unwrap();

        let onehot = Tensor::from_vec(vec![0.0f32, 0.0, 1.0], (1, 1, 3), &dev).unwrap();
        let picked = probs_to_embeddings(&onehot, &table).unwrap();
        assert_eq!(
            picked.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![5.0, 6.0]
        );

        let uniform = Tensor::from_vec(vec![1.0f32 / 3.0; 3], (1, 1, 3), &dev).unwrap();
        let mixed = probs_to_embeddings(&uniform, &table).unwrap();
        let vals = mixed.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-6 && (vals[1] - 4.0).abs() < 1e-6);

        // random simplex row against a hand-rolled dot product
        let w = [0.2f32, 0.5, 0.3];
        let row = Tensor::from_vec(w.to_vec(), (1, 1, 3), &dev).unwrap();
        let got = probs_to_embeddings(&row, &table).unwrap();
        let got = got.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let expect = [
            w[0] * 1.0 + w[1] * 3.0 + w[2] * 5.0,
            w[0] * 2.0 + w[1] * 4.0 + w[2] * 6.0,
        ];
        assert!((got[0] - expect[0]).abs() < 1e-6);
        assert!((got[1] - expect[1]).abs() < 1e-6);

        // convex hull bound per coordinate
        for (i, &g) in got.iter().enumerate() {
            let col: Vec<f32> = (0..3)
                .map(|r| table.to_vec2::<f32>().unwrap()[r][i])
                .collect();
            let lo = col.iter().cloned().fold(f32::MAX, f32::min);
            let hi = col.iter().cloned().fold(f32::MIN, f32::max);
            assert!(g >= lo - 1e-6 && g <= hi + 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let dev = Device::Cpu;
        let probs = Tensor::zeros((1, 2, 4), candle_core::DType::F32, &dev).unwrap();
        let table = Tensor::zeros((3, 2), candle_core::DType::F32, &dev).unwrap();
        assert!(probs_to_embeddings(&probs, &table).is_err());
    }
}
