//! Differentiable log-mel computation for the reconstruction loss.
//!
//! The STFT is a strided convolution against fixed windowed DFT basis
//! kernels, so gradients flow to the generated waveform. Framing, window,
//! filterbank and log compression reuse the analysis front end's exact
//! tables; the two mel paths agree numerically up to float rounding.

use crate::config::FeatureConfig;
use crate::dsp::stft::{hann_window, mel_filterbank, LOG_MEL_FLOOR};
use crate::error::Result;
use candle_core::{DType, Device, Tensor};
use candle_nn::{Conv1d, Conv1dConfig, Module};

pub struct MelTransform {
    dft: Conv1d,
    mel_weights: Tensor,
    n_bins: usize,
    fft_size: usize,
    hop: usize,
}

impl MelTransform {
    pub fn new(cfg: &FeatureConfig, device: &Device) -> Result<Self> {
        let n_bins = cfg.n_linear_bins();
        let fft = cfg.fft_size;
        let window = hann_window(cfg.win_length);
        let pad = (fft - cfg.win_length) / 2;

        // kernels: [2 * n_bins, 1, fft]; rows 0..n_bins real, rest imaginary
        let mut weights = vec![0.0f32; 2 * n_bins * fft];
        for k in 0..n_bins {
            for (j, &w) in window.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * k as f64 * (pad + j) as f64 / fft as f64;
                weights[k * fft + pad + j] = (w as f64 * angle.cos()) as f32;
                weights[(n_bins + k) * fft + pad + j] = (w as f64 * angle.sin()) as f32;
            }
        }
        let dft_weight = Tensor::from_vec(weights, (2 * n_bins, 1, fft), device)?;
        let dft = Conv1d::new(
            dft_weight,
            None,
            Conv1dConfig {
                stride: cfg.hop_length,
                padding: 0,
                dilation: 1,
                groups: 1,
                cudnn_fwd_algo: None,
            },
        );

        let bank = mel_filterbank(
            n_bins,
            fft,
            cfg.sample_rate,
            cfg.mel_bands,
            cfg.mel_fmin,
            cfg.mel_fmax,
        );
        let flat: Vec<f32> = bank.iter().flatten().copied().collect();
        let mel_weights = Tensor::from_vec(flat, (cfg.mel_bands, n_bins), device)?;

        Ok(Self {
            dft,
            mel_weights,
            n_bins,
            fft_size: fft,
            hop: cfg.hop_length,
        })
    }

    /// `wave: [B, L]` -> log-mel `[B, frames, mel_bands]` with
    /// `frames = floor(L / hop) + 1`, matching the analysis framing.
    pub fn mel(&self, wave: &Tensor) -> Result<Tensor> {
        let (b, l) = wave.dims2()?;
        let half = self.fft_size / 2;
        let padded = wave
            .reshape((b, 1, l))?
            .pad_with_zeros(2, half, half)?;
        let spec = self.dft.forward(&padded)?; // [B, 2*n_bins, frames]
        let re = spec.narrow(1, 0, self.n_bins)?;
        let im = spec.narrow(1, self.n_bins, self.n_bins)?;
        let mag = ((re.sqr()? + im.sqr()?)? + 1e-9)?.sqrt()?;
        let mel = self
            .mel_weights
            .broadcast_matmul(&mag)?
            .clamp(LOG_MEL_FLOOR as f64, f64::INFINITY)?
            .log()?;
        Ok(mel.transpose(1, 2)?.contiguous()?)
    }

    /// Mean absolute difference between the log-mels of two waveforms.
    pub fn l1(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let mr = self.mel(real)?;
        let mf = self.mel(fake)?;
        Ok((mf - mr)?.abs()?.mean_all()?)
    }
}
