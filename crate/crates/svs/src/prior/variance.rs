//! Frame-level pitch and energy predictors.
//!
//! Each predictor is a small conv stack with a zero-initialized scalar head,
//! plus a width-192 value embedding that is added back into the hidden
//! stream. Pitch is predicted in log-Hz, energy as linear RMS.

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::layers::{conv1d, layer_norm, linear, linear_zero, LayerNorm};
use crate::nn::ParamStore;
use candle_core::Tensor;
use candle_nn::Module;

pub struct VariancePredictor {
    convs: Vec<(candle_nn::Conv1d, LayerNorm)>,
    out: candle_nn::Linear,
    value_embed: candle_nn::Linear,
}

impl VariancePredictor {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        for i in 0..cfg.variance_predictor_layers {
            let scope = ps.pp(&format!("conv{i}"));
            convs.push((
                conv1d(&scope, "conv", cfg.hidden_dim, cfg.hidden_dim, 3, 1)?,
                layer_norm(&scope, "norm", cfg.hidden_dim)?,
            ));
        }
        Ok(Self {
            convs,
            out: linear_zero(ps, "out", cfg.hidden_dim, 1)?,
            value_embed: linear(ps, "embed", 1, cfg.hidden_dim)?,
        })
    }

    /// `[B, T, C] -> [B, T]` per-frame scalar prediction.
    pub fn predict(&self, frame_hidden: &Tensor, mask: &Tensor) -> Result<Tensor> {
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
        Ok(self.out.forward(&h)?.squeeze(2)?.mul(mask)?)
    }

    /// Width-192 embedding of a per-frame scalar value.
    pub fn embed_value(&self, value: &Tensor) -> Result<Tensor> {
        let (b, t) = value.dims2()?;
        Ok(self.value_embed.forward(&value.reshape((b, t, 1))?)?)
    }
}

/// Predicted frame-level variance information.
pub struct FrameVariance {
    /// `[B, T]` log-Hz pitch prediction.
    pub f0_log: Tensor,
    /// `[B, T]` energy prediction.
    pub energy: Tensor,
    /// `[B, T, C]` embedding to add back into the hidden stream.
    pub embedding: Tensor,
}

/// Pitch and energy predictors operating on the frame-level hidden stream.
pub struct VarianceAdaptor {
    pub pitch: VariancePredictor,
    pub energy: VariancePredictor,
}

impl VarianceAdaptor {
    /// `pitch_ps` and `energy_ps` are separate scopes so the two predictors
    /// live in distinct parameter namespaces.
    pub fn new(pitch_ps: &ParamStore, energy_ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            pitch: VariancePredictor::new(pitch_ps, cfg)?,
            energy: VariancePredictor::new(energy_ps, cfg)?,
        })
    }

    /// Predicts pitch and energy and embeds the predicted values.
    pub fn predict_frame_variance(
        &self,
        frame_hidden: &Tensor,
        mask: &Tensor,
    ) -> Result<FrameVariance> {
        let f0_log = self.pitch.predict(frame_hidden, mask)?;
        let energy = self.energy.predict(frame_hidden, mask)?;
        let embedding =
            (self.pitch.embed_value(&f0_log)? + self.energy.embed_value(&energy)?)?;
        let (b, t) = mask.dims2()?;
        Ok(FrameVariance {
            f0_log,
            energy,
            embedding: embedding.broadcast_mul(&mask.reshape((b, t, 1))?)?,
        })
    }
}
