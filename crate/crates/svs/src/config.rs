//! Structured configuration.
//!
//! One TOML file configures the whole toolkit, with a section per subsystem.
//! Defaults reproduce the published hyperparameters (AdamW betas 0.8/0.99,
//! eps 1e-9, lr 1e-4 with 0.999875 per-step decay, 61-phoneme vocabulary,
//! 192-dim embeddings, reverse-KL weight 0.5); step counts default to
//! desk-scale 2k/4k.

use crate::error::{Result, SvsError};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Audio analysis front-end settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeatureConfig {
    /// Target sample rate; input WAVs are resampled to this.
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_length: usize,
    pub win_length: usize,
    pub mel_bands: usize,
    pub mel_fmin: f32,
    pub mel_fmax: f32,
    /// f0 search range in Hz.
    pub f0_min: f32,
    pub f0_max: f32,
    /// Minimum normalized autocorrelation for a frame to count as voiced.
    pub voicing_threshold: f32,
    /// Minimum frame RMS for a frame to count as voiced.
    pub energy_floor: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            fft_size: 1024,
            hop_length: 256,
            win_length: 1024,
            mel_bands: 80,
            mel_fmin: 0.0,
            mel_fmax: 12_000.0,
            f0_min: 40.0,
            f0_max: 1500.0,
            voicing_threshold: 0.55,
            energy_floor: 1e-4,
        }
    }
}

impl FeatureConfig {
    pub fn n_linear_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 || self.fft_size == 0 {
            return Err(SvsError::Config("fft/hop must be positive".into()));
        }
        if self.win_length > self.fft_size {
            return Err(SvsError::Config(
                "win_length must not exceed fft_size".into(),
            ));
        }
        if self.f0_min <= 0.0 || self.f0_max <= self.f0_min {
            return Err(SvsError::Config("invalid f0 search range".into()));
        }
        Ok(())
    }
}

/// Network topology. Embedding and latent widths are fixed to 192 by the
/// model family; depths and inner channel counts are tunable so the smoke
/// corpus trains quickly on one CPU core.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Phoneme vocabulary size, excluding the CTC blank at index 0.
    pub phoneme_vocab: usize,
    /// Shared hidden / embedding width.
    pub hidden_dim: usize,
    /// Note encoder depth in FFT blocks.
    pub note_encoder_blocks: usize,
    /// Phoneme predictor depth in FFT blocks.
    pub phoneme_predictor_blocks: usize,
    pub attention_heads: usize,
    pub ffn_hidden: usize,
    pub ffn_kernel: usize,
    /// Sinusoidal position encodings at FFT-block stack inputs.
    pub position_encoding: bool,
    /// Posterior encoder dilated-conv stack.
    pub posterior_layers: usize,
    pub posterior_channels: usize,
    pub posterior_kernel: usize,
    /// Whether the phoneme predictor reads the posterior mean instead of the
    /// sampled z.
    pub predict_from_mean: bool,
    /// Speaker encoder inner width (the published model uses 512; desk scale
    /// defaults lower).
    pub speaker_channels: usize,
    /// Flow stack.
    pub flow_layers: usize,
    pub flow_hidden: usize,
    pub flow_kernel: usize,
    /// Duration predictor conv layers.
    pub duration_predictor_layers: usize,
    pub duration_predictor_kernel: usize,
    /// Differentiable upsampler boundary temperature, in frames.
    pub upsample_temperature: f64,
    /// Variance (pitch/energy) predictor conv layers.
    pub variance_predictor_layers: usize,
    /// Frame prior network conv layers.
    pub frame_prior_layers: usize,
    /// Decoder upsample factors; product must equal hop_length.
    pub decoder_upsample: Vec<usize>,
    pub decoder_channels: usize,
    pub decoder_resblock_kernel: usize,
    pub decoder_resblock_dilations: Vec<usize>,
    /// Discriminator sub-bands: number of scales and the periods.
    pub discriminator_scales: usize,
    pub discriminator_periods: Vec<usize>,
    pub discriminator_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            phoneme_vocab: 61,
            hidden_dim: 192,
            note_encoder_blocks: 6,
            phoneme_predictor_blocks: 2,
            attention_heads: 2,
            ffn_hidden: 384,
            ffn_kernel: 3,
            position_encoding: true,
            posterior_layers: 3,
            posterior_channels: 128,
            posterior_kernel: 5,
            predict_from_mean: false,
            speaker_channels: 128,
            flow_layers: 4,
            flow_hidden: 96,
            flow_kernel: 5,
            duration_predictor_layers: 3,
            duration_predictor_kernel: 3,
            upsample_temperature: 1.0,
            variance_predictor_layers: 2,
            frame_prior_layers: 2,
            decoder_upsample: vec![8, 8, 4],
            decoder_channels: 96,
            decoder_resblock_kernel: 3,
            decoder_resblock_dilations: vec![1, 3],
            discriminator_scales: 2,
            discriminator_periods: vec![2, 3],
            discriminator_channels: 24,
        }
    }
}

impl ModelConfig {
    pub fn n_classes(&self) -> usize {
        self.phoneme_vocab + 1
    }

    pub fn validate(&self, features: &FeatureConfig) -> Result<()> {
        let up: usize = self.decoder_upsample.iter().product();
        if up != features.hop_length {
            return Err(SvsError::Config(format!(
                "decoder upsample factors multiply to {up}, expected hop {}",
                features.hop_length
            )));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(SvsError::Config(
                "hidden_dim must be divisible by attention_heads".into(),
            ));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(SvsError::Config("hidden_dim must be even".into()));
        }
        if self.phoneme_vocab == 0 {
            return Err(SvsError::Config("phoneme_vocab must be positive".into()));
        }
        Ok(())
    }
}

/// Relative weights of the training objective terms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub mel: f64,
    pub feature_match: f64,
    pub adversarial: f64,
    pub kl: f64,
    /// Reverse-direction KL weight inside the bidirectional flow loss.
    pub reverse_kl: f64,
    pub ctc: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 45.0,
            feature_match: 2.0,
            adversarial: 1.0,
            kl: 1.0,
            reverse_kl: 0.5,
            ctc: 1.0,
            duration: 1.0,
            pitch: 1.0,
            energy: 1.0,
        }
    }
}

/// Optimization schedule and loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    /// Frames per decoder training slice.
    pub segment_frames: usize,
    pub seed: u64,
    /// Synthesize a held-out utterance and log metrics every N steps
    /// (0 disables).
    pub validate_every: usize,
    /// Checkpoint every N steps (0 = only at the end).
    pub checkpoint_every: usize,
    /// Prior sampling temperature at inference.
    pub sampling_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.999875,
            adam_beta1: 0.8,
            adam_beta2: 0.99,
            adam_eps: 1e-9,
            weight_decay: 0.0,
            batch_size: 8,
            pretrain_steps: 2000,
            finetune_steps: 4000,
            segment_frames: 32,
            seed: 1234,
            validate_every: 0,
            checkpoint_every: 0,
            sampling_temperature: 0.667,
        }
    }
}

/// Top-level toolkit configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| SvsError::Config(format!("{path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| SvsError::Config(format!("serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SvsError::Config(format!("config json: {e}")))
    }

    /// Validates invariants and returns warnings for risky-but-legal settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.features.validate()?;
        self.model.validate(&self.features)?;
        if !(0.0..=1.0).contains(&self.loss_weights.reverse_kl) {
            return Err(SvsError::Config(
                "reverse_kl weight must lie in [0, 1]".into(),
            ));
        }
        if self.train.lr_decay <= 0.0 || self.train.lr_decay > 1.0 {
            return Err(SvsError::Config("lr_decay must lie in (0, 1]".into()));
        }
        let mut warnings = Vec::new();
        if self.loss_weights.reverse_kl > 0.5 {
            warnings.push(format!(
                "reverse_kl weight {} exceeds 0.5; equal-weight bidirectional training \
                 is prone to gradient explosion",
                self.loss_weights.reverse_kl
            ));
        }
        Ok(warnings)
    }

    /// Shrunken topology used by the bundled synthetic corpus so the
    /// two-stage smoke run fits a single CPU core. Embedding/latent widths
    /// stay at 192; only depths and inner channels shrink.
    pub fn desk_smoke() -> Self {
        let mut cfg = Config::default();
        cfg.model.note_encoder_blocks = 2;
        cfg.model.ffn_hidden = 256;
        cfg.model.posterior_layers = 2;
        cfg.model.posterior_channels = 96;
        cfg.model.speaker_channels = 64;
        cfg.model.flow_hidden = 64;
        cfg.model.flow_kernel = 3;
        cfg.model.decoder_channels = 64;
        cfg.model.discriminator_channels = 16;
        cfg.train.batch_size = 1;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_paper_values() {
        let cfg = Config::default();
        assert_eq!(cfg.train.adam_beta1, 0.8);
        assert_eq!(cfg.train.adam_beta2, 0.99);
        assert_eq!(cfg.train.adam_eps, 1e-9);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.lr_decay, 0.999875);
        assert_eq!(cfg.loss_weights.reverse_kl, 0.5);
        assert_eq!(cfg.model.phoneme_vocab, 61);
        assert_eq!(cfg.model.hidden_dim, 192);
        assert_eq!(cfg.model.note_encoder_blocks, 6);
        assert_eq!(cfg.model.phoneme_predictor_blocks, 2);
        assert_eq!(cfg.model.duration_predictor_layers, 3);
        assert_eq!(cfg.features.sample_rate, 24_000);
    }

    #[test]
    fn reverse_kl_above_half_warns() {
        let mut cfg = Config::default();
        cfg.loss_weights.reverse_kl = 0.9;
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("0.9"));
    }

    #[test]
    fn reverse_kl_outside_unit_interval_rejected() {
        let mut cfg = Config::default();
        cfg.loss_weights.reverse_kl = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn upsample_product_must_match_hop() {
        let mut cfg = Config::default();
        cfg.model.decoder_upsample = vec![8, 8, 8];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::desk_smoke();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
