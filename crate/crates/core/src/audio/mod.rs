//! Mono PCM audio to 64-bin log-mel spectrogram.

mod cache;
mod mel;
mod stft;
mod wav;

pub use cache::{read_feature_cache, write_feature_cache, FEATURE_MAGIC, FEATURE_VERSION};
pub use mel::{hz_to_mel, mel_filterbank, mel_to_hz, MelFilterbank};
pub use stft::{frame_count, hamming, stft, Spectrogram};
pub use wav::{read_wav, resample_linear, write_wav};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 32_000;
pub const WIN_LENGTH: usize = 1024;
pub const HOP_LENGTH: usize = 320;
pub const N_MELS: usize = 64;
pub const N_BINS: usize = WIN_LENGTH / 2 + 1;
pub const LOG_FLOOR: f64 = 1e-10;

/// A mono clip with samples nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub sample_rate: u32,
    pub samples: Vec<f32>,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, sample_rate: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        Ok(AudioClip { clip_id: clip_id.into(), sample_rate, samples })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns the clip at the canonical 32 kHz rate.
    pub fn to_canonical_rate(&self) -> AudioClip {
        if self.sample_rate == SAMPLE_RATE {
            return self.clone();
        }
        AudioClip {
            clip_id: self.clip_id.clone(),
            sample_rate: SAMPLE_RATE,
            samples: resample_linear(&self.samples, self.sample_rate, SAMPLE_RATE),
        }
    }
}

/// Time × mel log-energy matrix, row-major with `mel_bins` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelFeature {
    pub frames: usize,
    pub mel_bins: usize,
    pub values: Vec<f32>,
}

impl LogMelFeature {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.mel_bins..(t + 1) * self.mel_bins]
    }
}

/// Log-mel features of a clip at its own sample rate.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelFeature> {
    let spec = stft(&clip.samples, WIN_LENGTH, HOP_LENGTH)?;
    let bank = mel_filterbank(clip.sample_rate as f64, WIN_LENGTH, N_MELS, 0.0, clip.sample_rate as f64 / 2.0)?;
    Ok(bank.log_mel(&spec))
}

/// Resamples to 32 kHz when needed, then extracts log-mel features.
pub fn extract(clip: &AudioClip) -> Result<LogMelFeature> {
    log_mel(&clip.to_canonical_rate())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_signal_gives_floor() {
        let clip = AudioClip::new("z", SAMPLE_RATE, vec![0.0; 4000]).unwrap();
        let f = log_mel(&clip).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert_eq!(f.mel_bins, 64);
        assert!(f.values.iter().all(|&v| v == floor));
    }

    #[test]
    fn ten_seconds_gives_997_frames() {
        let clip = AudioClip::new("ten", SAMPLE_RATE, vec![0.0; 320_000]).unwrap();
        // 1 + floor((320000 - 1024) / 320)
        assert_eq!(log_mel(&clip).unwrap().frames, 997);
    }

    #[test]
    fn doubling_amplitude_never_lowers_a_bin() {
        let samples: Vec<f32> = (0..8000).map(|i| ((i as f32) * 0.05).sin() * 0.3 + ((i * 7919 % 101) as f32 / 101.0 - 0.5) * 0.1).collect();
        let a = log_mel(&AudioClip::new("a", SAMPLE_RATE, samples.clone()).unwrap()).unwrap();
        let b = log_mel(&AudioClip::new("b", SAMPLE_RATE, samples.iter().map(|s| s * 2.0).collect()).unwrap()).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| y >= x));
    }

    #[test]
    fn deterministic_and_independent_of_clip_id() {
        let samples: Vec<f32> = (0..5000).map(|i| ((i as f32) * 0.013).cos()).collect();
        let a = log_mel(&AudioClip::new("first", SAMPLE_RATE, samples.clone()).unwrap()).unwrap();
        let b = log_mel(&AudioClip::new("second", SAMPLE_RATE, samples).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn short_clip_is_rejected() {
        let clip = AudioClip::new("s", SAMPLE_RATE, vec![0.0; 1023]).unwrap();
        assert!(matches!(log_mel(&clip), Err(Error::InputTooShort { needed: 1024, got: 1023 })));
    }
}
