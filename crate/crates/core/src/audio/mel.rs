use crate::error::{Error, Result};

use super::stft::Spectrogram;
use super::{LogMelFeature, LOG_FLOOR};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters, `n_mels × (n_fft / 2 + 1)`, row-major.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
}

/// Builds triangular filters with edges equally spaced on the mel scale
/// between `fmin` and `fmax`, unnormalized (peak 1).
pub fn mel_filterbank(sr: f64, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<MelFilterbank> {
    if !(sr > 0.0) || n_fft < 2 || n_mels == 0 {
        return Err(Error::Config(format!("invalid filterbank request sr={sr} n_fft={n_fft} n_mels={n_mels}")));
    }
    if fmax > sr / 2.0 || fmin < 0.0 || fmin >= fmax {
        return Err(Error::Config(format!("need 0 <= fmin < fmax <= sr/2, got fmin={fmin} fmax={fmax} sr={sr}")));
    }
    let n_bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * sr / n_fft as f64;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; too many mel bands for n_fft={n_fft}"
            )));
        }
    }
    Ok(MelFilterbank { n_mels, n_bins, weights, centers: edges[1..=n_mels].to_vec() })
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Applies the filters to a power spectrum frame.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }

    /// `ln(max(filterbank · |X|², floor))` for every frame.
    pub fn log_mel(&self, spec: &Spectrogram) -> LogMelFeature {
        let mut values = Vec::with_capacity(spec.frames * self.n_mels);
        for t in 0..spec.frames {
            let power: Vec<f64> = spec.power(t).collect();
            values.extend(self.apply(&power).into_iter().map(|e| e.max(LOG_FLOOR).ln() as f32));
        }
        LogMelFeature { frames: spec.frames, mel_bins: self.n_mels, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn canonical() -> MelFilterbank {
        mel_filterbank(32_000.0, 1024, 64, 0.0, 16_000.0).unwrap()
    }

    #[test]
    fn mel_of_1000_hz() {
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(440.0)) - 440.0).abs() < 1e-9);
    }

    #[test]
    fn rows_positive_and_centers_increasing() {
        let fb = canonical();
        assert_eq!(fb.weights.len(), 64 * 513);
        assert!(fb.weights.iter().all(|&w| w >= 0.0));
        for m in 0..64 {
            assert!(fb.row(m).iter().sum::<f64>() > 0.0);
        }
        assert!(fb.centers.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn filter_areas_are_locked() {
        // Row sums (response to an all-ones power spectrum), computed with an
        // independent numpy implementation of the same construction.
        let fb = canonical();
        let areas = fb.apply(&vec![1.0; 513]);
        let expected = [
            (0, 1.144_754_792_0),
            (1, 1.178_351_659_9),
            (31, 5.207_138_784_5),
            (63, 24.841_513_591_7),
        ];
        for (m, area) in expected {
            assert!((areas[m] - area).abs() < 1e-6, "filter {m}: {} vs {area}", areas[m]);
        }
    }

    #[test]
    fn too_many_bands_is_a_config_error() {
        assert!(matches!(mel_filterbank(32_000.0, 1024, 400, 0.0, 16_000.0), Err(Error::Config(_))));
    }

    #[test]
    fn fmax_above_nyquist_is_rejected() {
        assert!(mel_filterbank(32_000.0, 1024, 64, 0.0, 16_001.0).is_err());
    }
}
