//! Frame-level f0 estimation.
//!
//! Normalized autocorrelation over the analysis window with parabolic peak
//! interpolation; a frame is voiced when its RMS clears the energy floor and
//! the best normalized correlation clears the clarity threshold. The raw
//! autocorrelation is computed through an FFT, the normalization energies
//! through prefix sums.

use crate::config::FeatureConfig;
use crate::dsp::stft::{frame_into, num_frames};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

pub struct F0Estimator {
    win: usize,
    hop: usize,
    sample_rate: f32,
    lag_min: usize,
    lag_max: usize,
    voicing_threshold: f32,
    energy_floor: f32,
    fft_len: usize,
}

impl F0Estimator {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let sr = cfg.sample_rate as f32;
        let win = cfg.win_length;
        let lag_min = (sr / cfg.f0_max).floor().max(2.0) as usize;
        let lag_max = ((sr / cfg.f0_min).ceil() as usize).min(win - 2);
        let fft_len = (2 * win).next_power_of_two();
        Self {
            win,
            hop: cfg.hop_length,
            sample_rate: sr,
            lag_min,
            lag_max,
            voicing_threshold: cfg.voicing_threshold,
            energy_floor: cfg.energy_floor,
            fft_len,
        }
    }

    /// Returns (hz, voiced) per frame, frame count matching the STFT framing.
    pub fn estimate(&self, samples: &[f32]) -> (Vec<f32>, Vec<bool>) {
        let t_frames = num_frames(samples.len(), self.hop);
        let fft = FftPlanner::new().plan_fft_forward(self.fft_len);
        let ifft = FftPlanner::new().plan_fft_inverse(self.fft_len);

        let mut frame = vec![0.0f32; self.win];
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.fft_len];
        let mut hz = Vec::with_capacity(t_frames);
        let mut voiced = Vec::with_capacity(t_frames);

        for t in 0..t_frames {
            frame_into(samples, (t * self.hop) as isize, self.win, &mut frame);
            let (f, v) = self.frame_f0(&frame, &mut buf, fft.as_ref(), ifft.as_ref());
            hz.push(f);
            voiced.push(v);
        }
        (hz, voiced)
    }

    fn frame_f0(
        &self,
        frame: &[f32],
        buf: &mut [Complex<f32>],
        fft: &dyn rustfft::Fft<f32>,
        ifft: &dyn rustfft::Fft<f32>,
    ) -> (f32, bool) {
        let w = self.win;
        let energy: f32 = frame.iter().map(|x| x * x).sum();
        let rms = (energy / w as f32).sqrt();
        if rms < self.energy_floor {
            return (0.0, false);
        }

        // Raw autocorrelation r[tau] = sum_i x[i] * x[i+tau] via FFT.
        for c in buf.iter_mut() {
            *c = Complex::new(0.0, 0.0);
        }
        for (i, &x) in frame.iter().enumerate() {
            buf[i] = Complex::new(x, 0.0);
        }
        fft.process(buf);
        for c in buf.iter_mut() {
            *c = Complex::new(c.norm_sqr(), 0.0);
        }
        ifft.process(buf);
        let scale = 1.0 / self.fft_len as f32;
        let raw: Vec<f32> = (0..=self.lag_max.min(w - 1))
            .map(|tau| buf[tau].re * scale)
            .collect();

        // Prefix sums of x^2 for per-lag normalization energies.
        let mut sq_prefix = vec![0.0f64; w + 1];
        for (i, &x) in frame.iter().enumerate() {
            sq_prefix[i + 1] = sq_prefix[i] + (x as f64) * (x as f64);
        }
        let norm = |tau: usize| -> f32 {
            let head = sq_prefix[w - tau] - sq_prefix[0];
            let tail = sq_prefix[w] - sq_prefix[tau];
            ((head * tail).sqrt() as f32).max(1e-12)
        };

        let lag_hi = self.lag_max.min(w - 2);
        if self.lag_min >= lag_hi {
            return (0.0, false);
        }
        let r: Vec<f32> = (0..=lag_hi).map(|tau| raw[tau] / norm(tau)).collect();

        let r_max = r[self.lag_min..=lag_hi]
            .iter()
            .cloned()
            .fold(f32::MIN, f32::max);
        if r_max < self.voicing_threshold {
            return (0.0, false);
        }

        // Earliest local peak close to the global maximum; guards against
        // picking an octave-down multiple of the period.
        let accept = (0.85 * r_max).max(self.voicing_threshold);
        let mut best = None;
        for tau in self.lag_min.max(1)..lag_hi {
            if r[tau] >= accept && r[tau] >= r[tau - 1] && r[tau] >= r[tau + 1] {
                best = Some(tau);
                break;
            }
        }
        let tau = match best {
            Some(t) => t,
            None => {
                let (arg, _) = r[self.lag_min..=lag_hi]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                arg + self.lag_min
            }
        };

        // Parabolic interpolation around the integer peak.
        let tau_f = if tau > 0 && tau + 1 < r.len() {
            let (a, b, c) = (r[tau - 1], r[tau], r[tau + 1]);
            let denom = a - 2.0 * b + c;
            let delta = if denom.abs() > 1e-9 {
                (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            };
            tau as f32 + delta
        } else {
            tau as f32
        };

        let f0 = self.sample_rate / tau_f;
        let f_lo = self.sample_rate / self.lag_max as f32;
        let f_hi = self.sample_rate / self.lag_min as f32;
        (f0.clamp(f_lo, f_hi), true)
    }
}
