//! Audio front end: feature extraction and pitch quantization.
//!
//! Turns raw audio into the model's inputs (linear spectrogram, log-mel,
//! per-frame RMS energy, f0 contour) and converts between Hz and MIDI note
//! numbers. Everything here is a pure function of its inputs.

pub mod f0;
pub mod stft;
pub mod wav;

use crate::config::FeatureConfig;
use crate::error::{Result, SvsError};
use stft::{log_compress, mel_filterbank, num_frames, Stft};

/// Mono audio in `[-1, 1]` at a known sample rate (canonically 24 kHz).
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(SvsError::InvalidAudio("sample_rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(SvsError::InvalidAudio("empty sample buffer".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(SvsError::InvalidAudio("non-finite sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f32 {
        self.samples.len() as f32 / self.sample_rate as f32
    }
}

/// Frame-level fundamental frequency. `hz[t] > 0` iff `voiced[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    pub hz: Vec<f32>,
    pub voiced: Vec<bool>,
}

impl F0Contour {
    pub fn len(&self) -> usize {
        self.hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hz.is_empty()
    }

    pub fn voiced_fraction(&self) -> f32 {
        if self.voiced.is_empty() {
            return 0.0;
        }
        self.voiced.iter().filter(|&&v| v).count() as f32 / self.voiced.len() as f32
    }
}

/// Per-utterance acoustic features; all streams share the frame count.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Magnitude spectrogram, `[T x (fft/2 + 1)]`.
    pub linear_spec: Vec<Vec<f32>>,
    /// Log-mel spectrogram, `[T x mel_bands]`.
    pub mel_spec: Vec<Vec<f32>>,
    /// Per-frame RMS, `[T]`.
    pub energy: Vec<f32>,
    pub f0: F0Contour,
}

impl FeatureBundle {
    pub fn num_frames(&self) -> usize {
        self.energy.len()
    }
}

/// Full front-end pass. Deterministic; errors on non-finite audio or clips
/// shorter than one analysis window.
pub fn extract_features(audio: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureBundle> {
    cfg.validate()?;
    if audio.samples.iter().any(|s| !s.is_finite()) {
        return Err(SvsError::InvalidAudio("non-finite sample".into()));
    }
    if audio.samples.len() < cfg.win_length {
        return Err(SvsError::AudioTooShort(format!(
            "{} samples < window {}",
            audio.samples.len(),
            cfg.win_length
        )));
    }
    if audio.sample_rate != cfg.sample_rate {
        return Err(SvsError::InvalidAudio(format!(
            "clip rate {} != configured {}; resample on ingest",
            audio.sample_rate, cfg.sample_rate
        )));
    }

    let stft = Stft::new(cfg.fft_size, cfg.win_length, cfg.hop_length);
    let linear_spec = stft.magnitude(&audio.samples);

    let bank = mel_filterbank(
        cfg.n_linear_bins(),
        cfg.fft_size,
        cfg.sample_rate,
        cfg.mel_bands,
        cfg.mel_fmin,
        cfg.mel_fmax,
    );
    let mel_spec: Vec<Vec<f32>> = linear_spec
        .iter()
        .map(|row| {
            bank.iter()
                .map(|filt| {
                    log_compress(filt.iter().zip(row).map(|(w, m)| w * m).sum::<f32>())
                })
                .collect()
        })
        .collect();

    let energy = frame_energy(&audio.samples, cfg);
    let (hz, voiced) = f0::F0Estimator::new(cfg).estimate(&audio.samples);
    let f0 = F0Contour { hz, voiced };

    debug_assert_eq!(linear_spec.len(), energy.len());
    debug_assert_eq!(f0.len(), energy.len());
    Ok(FeatureBundle {
        linear_spec,
        mel_spec,
        energy,
        f0,
    })
}

/// Frame-level f0 on its own; framing matches `extract_features`.
pub fn estimate_f0(audio: &AudioClip, cfg: &FeatureConfig) -> Result<F0Contour> {
    cfg.validate()?;
    if audio.samples.iter().any(|s| !s.is_finite()) {
        return Err(SvsError::InvalidAudio("non-finite sample".into()));
    }
    if audio.samples.len() < cfg.win_length {
        return Err(SvsError::AudioTooShort(format!(
            "{} samples < window {}",
            audio.samples.len(),
            cfg.win_length
        )));
    }
    let (hz, voiced) = f0::F0Estimator::new(cfg).estimate(&audio.samples);
    Ok(F0Contour { hz, voiced })
}

fn frame_energy(samples: &[f32], cfg: &FeatureConfig) -> Vec<f32> {
    let t_frames = num_frames(samples.len(), cfg.hop_length);
    let mut frame = vec![0.0f32; cfg.win_length];
    (0..t_frames)
        .map(|t| {
            stft::frame_into(
                samples,
                (t * cfg.hop_length) as isize,
                cfg.win_length,
                &mut frame,
            );
            let sq: f32 = frame.iter().map(|x| x * x).sum();
            (sq / cfg.win_length as f32).sqrt()
        })
        .collect()
}

/// Quantizes an f0 value to a MIDI note number. Unvoiced (0 Hz) maps to the
/// reserved rest token 0; everything else rounds to the nearest semitone and
/// clamps to `[1, 127]`.
pub fn hz_to_midi(f0_hz: f64) -> Result<u8> {
    if !f0_hz.is_finite() || f0_hz < 0.0 {
        return Err(SvsError::InvalidAudio(format!(
            "f0 must be finite and non-negative, got {f0_hz}"
        )));
    }
    if f0_hz == 0.0 {
        return Ok(0);
    }
    let note = (69.0 + 12.0 * (f0_hz / 440.0).log2()).round();
    Ok(note.clamp(1.0, 127.0) as u8)
}

/// Center frequency of a MIDI note. Note 0 is the rest token and has no
/// frequency.
pub fn midi_to_hz(note: u8) -> Result<f64> {
    if note == 0 || note > 127 {
        return Err(SvsError::RestNote(note as i64));
    }
    Ok(440.0 * 2f64.powf((note as f64 - 69.0) / 12.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine_clip(freq: f32, secs: f32) -> AudioClip {
        let sr = 24_000u32;
        let samples: Vec<f32> = (0..(secs * sr as f32) as usize)
            .map(|i| 0.5 * (2.0 * std::f32::consts::PI * freq * i as f32 / sr as f32).sin())
            .collect();
        AudioClip::new(samples, sr).unwrap()
    }

    #[test]
    fn one_second_clip_gives_94_frames() {
        let clip = sine_clip(220.0, 1.0);
        assert_eq!(clip.samples.len(), 24_000);
        let fb = extract_features(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(fb.num_frames(), 94);
        assert_eq!(fb.linear_spec.len(), 94);
        assert_eq!(fb.mel_spec.len(), 94);
        assert_eq!(fb.energy.len(), 94);
        assert_eq!(fb.f0.len(), 94);
        assert_eq!(fb.linear_spec[0].len(), 513);
        assert_eq!(fb.mel_spec[0].len(), 80);
    }

    #[test]
    fn all_zero_clip_is_silent_and_unvoiced() {
        let clip = AudioClip::new(vec![0.0; 24_000], 24_000).unwrap();
        let fb = extract_features(&clip, &FeatureConfig::default()).unwrap();
        assert!(fb.energy.iter().all(|&e| e == 0.0));
        assert!(fb.f0.voiced.iter().all(|&v| !v));
    }

    #[test]
    fn sine_220_voiced_and_on_pitch() {
        let fb = extract_features(&sine_clip(220.0, 1.0), &FeatureConfig::default()).unwrap();
        assert!(fb.f0.voiced_fraction() > 0.9, "{}", fb.f0.voiced_fraction());
        let mut voiced: Vec<f32> = fb
            .f0
            .hz
            .iter()
            .zip(&fb.f0.voiced)
            .filter(|(_, &v)| v)
            .map(|(&h, _)| h)
            .collect();
        voiced.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = voiced[voiced.len() / 2];
        assert!((med - 220.0).abs() < 2.0, "median {med}");
    }

    #[test]
    fn too_short_and_invalid_audio_rejected() {
        let cfg = FeatureConfig::default();
        let short = AudioClip::new(vec![0.1; 512], 24_000).unwrap();
        assert!(matches!(
            extract_features(&short, &cfg),
            Err(SvsError::AudioTooShort(_))
        ));
        assert!(AudioClip::new(vec![f32::NAN; 2048], 24_000).is_err());
    }

    #[test]
    fn extraction_is_deterministic() {
        let clip = sine_clip(330.0, 0.5);
        let cfg = FeatureConfig::default();
        let a = extract_features(&clip, &cfg).unwrap();
        let b = extract_features(&clip, &cfg).unwrap();
        assert_eq!(a.linear_spec, b.linear_spec);
        assert_eq!(a.mel_spec, b.mel_spec);
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.f0, b.f0);
    }

    #[test]
    fn midi_reference_points() {
        assert_eq!(hz_to_midi(440.0).unwrap(), 69);
        assert_eq!(hz_to_midi(0.0).unwrap(), 0);
        // 69 + 12*log2(261.626/440) evaluates to 60.0 within rounding.
        assert_eq!(hz_to_midi(261.626).unwrap(), 60);
        assert!(hz_to_midi(-1.0).is_err());
        assert!(hz_to_midi(f64::NAN).is_err());
    }

    #[test]
    fn midi_to_hz_reference_points() {
        assert!((midi_to_hz(69).unwrap() - 440.0).abs() < 1e-9);
        // F3 and D5, the vocal-range analysis thresholds.
        assert!((midi_to_hz(53).unwrap() - 174.614).abs() < 1e-3);
        assert!((midi_to_hz(74).unwrap() - 587.330).abs() < 1e-3);
        assert!(matches!(midi_to_hz(0), Err(SvsError::RestNote(0))));
        assert!(midi_to_hz(128).is_err());
    }

    #[test]
    fn quantization_clamps_extremes() {
        assert_eq!(hz_to_midi(4.0).unwrap(), 1);
        assert_eq!(hz_to_midi(30_000.0).unwrap(), 127);
    }

    proptest! {
        #[test]
        fn round_trip_within_half_semitone(f in 60.0f64..1000.0) {
            let note = hz_to_midi(f).unwrap();
            let back = midi_to_hz(note).unwrap();
            let cents = 1200.0 * (back / f).log2();
            prop_assert!(cents.abs() <= 50.0 + 1e-9, "{f} Hz -> {note} -> {back} ({cents} cents)");
        }

        #[test]
        fn quantization_is_monotone(a in 1.0f64..4000.0, b in 1.0f64..4000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(hz_to_midi(lo).unwrap() <= hz_to_midi(hi).unwrap());
        }
    }
}
