//! Differentiable duration regulator.
//!
//! A duration predictor emits one logit per phoneme; logits are normalized
//! within each note group so the phoneme durations of a note always sum to
//! the note's duration. The differentiable up-sampling layer turns the
//! predicted durations into a soft frame-by-phoneme projection matrix built
//! from sigmoid boundary scores over cumulative durations, so gradients from
//! frame-level losses reach the predicted durations — which a hard length
//! regulator cannot do.

use crate::config::ModelConfig;
use crate::error::{Result, SvsError};
use crate::nn::layers::{conv1d, layer_norm, linear, linear_zero, LayerNorm};
use crate::nn::ParamStore;
use candle_core::{DType, Tensor, D};
use candle_nn::Module;

/// Per-phoneme ratio of its note's duration, and the resulting durations.
#[derive(Debug, Clone)]
pub struct DurationRatios {
    /// `[B, P]` in (0, 1]; ratios within one note sum to 1.
    pub ratios: Tensor,
    /// `[B, P]` ratio times note duration, in frames.
    pub durations_frames: Tensor,
}

/// Soft frame-by-phoneme expansion matrix, rows normalized to 1.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    /// `[B, T, P]`, non-negative.
    pub w: Tensor,
}

pub struct DurationRegulator {
    dur_embed: candle_nn::Linear,
    convs: Vec<(candle_nn::Conv1d, LayerNorm)>,
    out: candle_nn::Linear,
    pub temperature: f64,
}

impl DurationRegulator {
    pub fn new(ps: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let dur_embed = linear(ps, "embed", 1, cfg.hidden_dim)?;
        let mut convs = Vec::new();
        for i in 0..cfg.duration_predictor_layers {
            let scope = ps.pp(&format!("pred{i}"));
            convs.push((
                conv1d(
                    &scope,
                    "conv",
                    cfg.hidden_dim,
                    cfg.hidden_dim,
                    cfg.duration_predictor_kernel,
                    1,
                )?,
                layer_norm(&scope, "norm", cfg.hidden_dim)?,
            ));
        }
        let out = linear_zero(ps, "out", cfg.hidden_dim, 1)?;
        Ok(Self {
            dur_embed,
            convs,
            out,
            temperature: cfg.upsample_temperature,
        })
    }

    /// Duration embedding for the note encoder input:
    /// `log(1 + d)` through a width-192 linear map. `durations: [B, P]`.
    pub fn embed_durations(&self, durations_frames: &Tensor) -> Result<Tensor> {
        let (b, p) = durations_frames.dims2()?;
        let logd = (durations_frames.clone() + 1.0)?.log()?.reshape((b, p, 1))?;
        Ok(self.dur_embed.forward(&logd)?)
    }

    fn logits(&self, hidden: &Tensor, pmask: &Tensor) -> Result<Tensor> {
        let (b, p, _c) = hidden.dims3()?;
        let mask3 = pmask.reshape((b, p, 1))?;
        let mut h = hidden.broadcast_mul(&mask3)?;
        for (conv, norm) in &self.convs {
            let y = conv
                .forward(&h.transpose(1, 2)?.contiguous()?)?
                .transpose(1, 2)?
                .relu()?;
            h = norm.forward(&y)?.broadcast_mul(&mask3)?;
        }
        Ok(self.out.forward(&h)?.squeeze(2)?) // [B, P]
    }

    /// Predicts ratio-normalized durations. `note_durations: [B, P]` carries
    /// the duration of the note each phoneme belongs to; `group_ids` assigns
    /// each phoneme to its note (host-side, from [`crate::score::MusicalScore`]).
    pub fn predict(
        &self,
        hidden: &Tensor,
        note_durations: &Tensor,
        group_ids: &[Vec<usize>],
        pmask: &Tensor,
    ) -> Result<DurationRatios> {
        let (b, p, _c) = hidden.dims3()?;
        if note_durations.dims() != [b, p] {
            return Err(SvsError::shape("note duration shape mismatch".into()));
        }
        // padded entries are replaced by 1 so only real notes are checked
        let pad_fill = (pmask.ones_like()? - pmask)?;
        let checked = ((note_durations.clone() * pmask.clone())? + pad_fill)?
            .min_all()?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if checked <= 0.0 {
            return Err(SvsError::other("non-positive note duration"));
        }

        let logits = self.logits(hidden, pmask)?;
        let ratios = grouped_softmax(&logits, group_ids, pmask)?;
        let durations = (ratios.clone() * note_durations.clone())?;
        Ok(DurationRatios {
            ratios,
            durations_frames: durations,
        })
    }
}

/// Softmax within note groups: `exp(l_i) / sum_{j in group(i)} exp(l_j)`.
/// Membership is encoded as a constant one-hot matrix so the normalization
/// stays differentiable.
pub fn grouped_softmax(
    logits: &Tensor,
    group_ids: &[Vec<usize>],
    pmask: &Tensor,
) -> Result<Tensor> {
    let (b, p) = logits.dims2()?;
    if group_ids.len() != b {
        return Err(SvsError::shape("group ids batch mismatch".into()));
    }
    let n_groups = group_ids
        .iter()
        .flat_map(|g| g.iter().copied())
        .max()
        .unwrap_or(0)
        + 1;
    let mut member = vec![0.0f32; b * p * n_groups];
    for (bi, ids) in group_ids.iter().enumerate() {
        if ids.len() > p {
            return Err(SvsError::shape("group ids longer than padded P".into()));
        }
        for (pi, &g) in ids.iter().enumerate() {
            member[(bi * p + pi) * n_groups + g] = 1.0;
        }
    }
    let member = Tensor::from_vec(member, (b, p, n_groups), logits.device())?
        .to_dtype(logits.dtype())?;
    let pmask = pmask.to_dtype(logits.dtype())?;

    // shift by the per-item max for stability; within-group ratios are
    // shift-invariant
    let shifted = logits.broadcast_sub(&logits.max_keepdim(D::Minus1)?)?;
    let e = (shifted.exp()? * pmask.clone())?; // [B, P]
    let sums = e.unsqueeze(1)?.matmul(&member)?; // [B, 1, G]
    let denom = member
        .matmul(&sums.transpose(1, 2)?)?
        .squeeze(2)?; // [B, P]
    let safe = (denom.clone() + ((pmask.ones_like()? - pmask)? * 1.0)?)?;
    Ok((e / safe)?)
}

/// Expands phoneme-level hidden vectors to the frame level through a soft
/// projection matrix built from cumulative durations. `durations: [B, P]`
/// positive reals (padded entries zero), `t_frames` the target length
/// (ground truth during training, rounded predicted sum at inference).
pub fn differentiable_upsample(
    hidden: &Tensor,
    durations: &Tensor,
    pmask: &Tensor,
    t_frames: usize,
    temperature: f64,
) -> Result<(Tensor, ProjectionMatrix)> {
    if t_frames == 0 {
        return Err(SvsError::other("target frame count must be positive"));
    }
    let (b, p, _c) = hidden.dims3()?;
    if durations.dims() != [b, p] {
        return Err(SvsError::shape(format!(
            "durations {:?} vs hidden {:?}",
            durations.dims(),
            hidden.dims()
        )));
    }
    let dtype = hidden.dtype();
    let device = hidden.device();
    let pmask = pmask.to_dtype(dtype)?;
    let masked_d = (durations.clone() * pmask.clone())?;
    let cum = masked_d.cumsum(D::Minus1)?; // [B, P] boundaries c_i
    let prev = (cum.clone() - masked_d)?; // c_{i-1}

    let centers: Vec<f64> = (0..t_frames).map(|t| t as f64 + 0.5).collect();
    let tau = Tensor::from_vec(centers, (1, t_frames, 1), device)?.to_dtype(dtype)?;

    let inv_temp = 1.0 / temperature;
    let left = ((tau.broadcast_sub(&prev.unsqueeze(1)?)?) * inv_temp)?;
    let right = ((cum.unsqueeze(1)?.broadcast_sub(&tau)?) * inv_temp)?;
    let scores = (candle_nn::ops::sigmoid(&left)? * candle_nn::ops::sigmoid(&right)?)?;
    let scores = scores.broadcast_mul(&pmask.unsqueeze(1)?)?; // [B, T, P]

    let denom = (scores.sum_keepdim(D::Minus1)? + 1e-12)?;
    let w = scores.broadcast_div(&denom)?;
    let frame_hidden = w.matmul(hidden)?;
    Ok((frame_hidden, ProjectionMatrix { w }))
}
