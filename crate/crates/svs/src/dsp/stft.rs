//! Magnitude STFT and mel filterbank.
//!
//! Framing rule: frame `t` is centered on sample `t * hop`, zero-padded at
//! the clip edges, giving `T = floor(num_samples / hop) + 1` frames. The
//! same rule is shared by the f0 and energy extractors so every feature
//! stream lines up frame-for-frame.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub fn num_frames(num_samples: usize, hop: usize) -> usize {
    num_samples / hop + 1
}

/// Copies the window centered on `center` into `out`, zero-padding outside
/// the clip.
pub fn frame_into(samples: &[f32], center: isize, win: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), win);
    let start = center - (win / 2) as isize;
    for (j, slot) in out.iter_mut().enumerate() {
        let idx = start + j as isize;
        *slot = if idx >= 0 && (idx as usize) < samples.len() {
            samples[idx as usize]
        } else {
            0.0
        };
    }
}

pub fn hann_window(len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| {
            let x = std::f64::consts::PI * 2.0 * i as f64 / len as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

pub struct Stft {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    fft_size: usize,
    win_length: usize,
    hop: usize,
}

impl Stft {
    pub fn new(fft_size: usize, win_length: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Self {
            fft,
            window: hann_window(win_length),
            fft_size,
            win_length,
            hop,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Magnitude spectrogram, row-major `[T x n_bins]`.
    pub fn magnitude(&self, samples: &[f32]) -> Vec<Vec<f32>> {
        let t_frames = num_frames(samples.len(), self.hop);
        let mut frame = vec![0.0f32; self.win_length];
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.fft_size];
        let mut out = Vec::with_capacity(t_frames);
        let pad = (self.fft_size - self.win_length) / 2;
        for t in 0..t_frames {
            frame_into(samples, (t * self.hop) as isize, self.win_length, &mut frame);
            for c in buf.iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            for (j, (&s, &w)) in frame.iter().zip(self.window.iter()).enumerate() {
                buf[pad + j] = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            out.push(buf[..self.n_bins()].iter().map(|c| c.norm()).collect());
        }
        out
    }
}

fn hz_to_mel(hz: f32) -> f32 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f32) -> f32 {
    700.0 * (10f32.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, row-major `[mel_bands x n_bins]`, peak 1.
///
/// The vocoder's differentiable mel loss builds its transform tensor from
/// this exact table so the two mel paths agree numerically.
pub fn mel_filterbank(
    n_bins: usize,
    fft_size: usize,
    sample_rate: u32,
    mel_bands: usize,
    fmin: f32,
    fmax: f32,
) -> Vec<Vec<f32>> {
    let fmax = fmax.min(sample_rate as f32 / 2.0);
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let points: Vec<f32> = (0..mel_bands + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f32 / (mel_bands + 1) as f32))
        .collect();
    let bin_hz = sample_rate as f32 / fft_size as f32;
    let mut bank = vec![vec![0.0f32; n_bins]; mel_bands];
    for m in 0..mel_bands {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        for (k, w) in bank[m].iter_mut().enumerate() {
            let f = k as f32 * bin_hz;
            let rise = (f - lo) / (mid - lo).max(1e-6);
            let fall = (hi - f) / (hi - mid).max(1e-6);
            *w = rise.min(fall).max(0.0);
        }
    }
    bank
}

/// Natural-log compression with a fixed floor, shared by both mel paths.
pub const LOG_MEL_FLOOR: f32 = 1e-5;

pub fn log_compress(x: f32) -> f32 {
    x.max(LOG_MEL_FLOOR).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_formula() {
        assert_eq!(num_frames(24_000, 256), 94);
        assert_eq!(num_frames(256, 256), 2);
        assert_eq!(num_frames(255, 256), 1);
    }

    #[test]
    fn hann_endpoints_and_symmetry() {
        let w = hann_window(1024);
        assert!(w[0].abs() < 1e-7);
        for i in 1..512 {
            assert!((w[i] - w[1024 - i]).abs() < 1e-6);
        }
    }

    #[test]
    fn sine_peak_lands_on_expected_bin() {
        let sr = 24_000;
        let f = 750.0f32; // bin 32 exactly at fft 1024
        let samples: Vec<f32> = (0..24_000)
            .map(|i| (2.0 * std::f32::consts::PI * f * i as f32 / sr as f32).sin() * 0.5)
            .collect();
        let stft = Stft::new(1024, 1024, 256);
        let mag = stft.magnitude(&samples);
        let mid = &mag[mag.len() / 2];
        let peak = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, 32);
    }

    #[test]
    fn filterbank_rows_cover_band() {
        let bank = mel_filterbank(513, 1024, 24_000, 80, 0.0, 12_000.0);
        assert_eq!(bank.len(), 80);
        for row in &bank {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row.iter().any(|&w| w > 0.0), "empty mel band");
        }
    }
}
