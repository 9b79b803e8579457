//! Padded batch assembly.
//!
//! Flat row-major buffers keep the hand-off to the tensor layer trivial.
//! Masks exactly delimit true lengths and padded regions stay zeroed.

use crate::dsp::FeatureBundle;
use crate::error::{Result, SvsError};
use crate::score::{MusicalScore, UtteranceContent};

/// A corpus item after feature extraction.
#[derive(Debug, Clone)]
pub struct PreparedUtterance {
    pub singer_id: String,
    pub content: UtteranceContent,
    pub features: FeatureBundle,
}

impl PreparedUtterance {
    pub fn num_frames(&self) -> usize {
        self.features.num_frames()
    }
}

/// Symbolic payload of a batch; a batch never mixes shapes.
#[derive(Debug, Clone)]
pub enum BatchContent {
    /// Pre-training: untimed phoneme sequences per item.
    Pretrain { phoneme_seqs: Vec<Vec<usize>> },
    /// Fine-tuning: full scores per item.
    Finetune { scores: Vec<MusicalScore> },
}

/// Padded per-frame features plus symbolic content for one training step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch_size: usize,
    pub max_frames: usize,
    pub frame_lens: Vec<usize>,
    pub singer_ids: Vec<String>,
    /// `[B * T * n_bins]`, zero padded.
    pub linear: Vec<f32>,
    pub n_linear_bins: usize,
    /// `[B * T * mel_bands]`, zero padded.
    pub mel: Vec<f32>,
    pub mel_bands: usize,
    /// `[B * T]`, zero padded.
    pub energy: Vec<f32>,
    /// `[B * T]` Hz, zero padded / zero where unvoiced.
    pub f0_hz: Vec<f32>,
    /// `[B * T]` 1.0 where voiced.
    pub f0_voiced: Vec<f32>,
    /// `[B * T]` 1.0 inside the true length.
    pub frame_mask: Vec<f32>,
    pub content: BatchContent,
}

impl Batch {
    pub fn frame_mask_row(&self, b: usize) -> &[f32] {
        &self.frame_mask[b * self.max_frames..(b + 1) * self.max_frames]
    }
}

/// Pads a non-empty, shape-homogeneous set of prepared utterances.
pub fn build_batch(items: &[PreparedUtterance]) -> Result<Batch> {
    if items.is_empty() {
        return Err(SvsError::other("cannot batch zero utterances"));
    }
    let score_shaped = matches!(items[0].content, UtteranceContent::Score(_));
    for it in items {
        let this = matches!(it.content, UtteranceContent::Score(_));
        if this != score_shaped {
            return Err(SvsError::other(
                "batch mixes pre-training-shaped and fine-tuning-shaped utterances",
            ));
        }
    }

    let batch_size = items.len();
    let frame_lens: Vec<usize> = items.iter().map(|i| i.num_frames()).collect();
    let max_frames = *frame_lens.iter().max().unwrap();
    let n_linear_bins = items[0].features.linear_spec[0].len();
    let mel_bands = items[0].features.mel_spec[0].len();
    for it in items {
        if it.features.linear_spec[0].len() != n_linear_bins
            || it.features.mel_spec[0].len() != mel_bands
        {
            return Err(SvsError::shape("feature widths differ across batch items"));
        }
    }

    let mut linear = vec![0.0f32; batch_size * max_frames * n_linear_bins];
    let mut mel = vec![0.0f32; batch_size * max_frames * mel_bands];
    let mut energy = vec![0.0f32; batch_size * max_frames];
    let mut f0_hz = vec![0.0f32; batch_size * max_frames];
    let mut f0_voiced = vec![0.0f32; batch_size * max_frames];
    let mut frame_mask = vec![0.0f32; batch_size * max_frames];

    for (b, it) in items.iter().enumerate() {
        let t_n = it.num_frames();
        for t in 0..t_n {
            let row = b * max_frames + t;
            linear[row * n_linear_bins..(row + 1) * n_linear_bins]
                .copy_from_slice(&it.features.linear_spec[t]);
            mel[row * mel_bands..(row + 1) * mel_bands].copy_from_slice(&it.features.mel_spec[t]);
            energy[row] = it.features.energy[t];
            f0_hz[row] = it.features.f0.hz[t];
            f0_voiced[row] = if it.features.f0.voiced[t] { 1.0 } else { 0.0 };
            frame_mask[row] = 1.0;
        }
    }

    let content = if score_shaped {
        BatchContent::Finetune {
            scores: items
                .iter()
                .map(|i| match &i.content {
                    UtteranceContent::Score(s) => s.clone(),
                    _ => unreachable!(),
                })
                .collect(),
        }
    } else {
        BatchContent::Pretrain {
            phoneme_seqs: items
                .iter()
                .map(|i| match &i.content {
                    UtteranceContent::Phonemes(p) => p.clone(),
                    _ => unreachable!(),
                })
                .collect(),
        }
    };

    Ok(Batch {
        batch_size,
        max_frames,
        frame_lens,
        singer_ids: items.iter().map(|i| i.singer_id.clone()).collect(),
        linear,
        n_linear_bins,
        mel,
        mel_bands,
        energy,
        f0_hz,
        f0_voiced,
        frame_mask,
        content,
    })
}
