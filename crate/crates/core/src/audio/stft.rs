use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Periodic Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Number of full frames: `1 + (len - win) / hop`, zero when shorter than a window.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        1 + (len - win) / hop
    }
}

/// One-sided complex spectrogram, `frames × (win / 2 + 1)`.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    pub fn power(&self, t: usize) -> impl Iterator<Item = f64> + '_ {
        self.frame(t).iter().map(|c| c.norm_sqr())
    }
}

/// Hamming-windowed STFT without centering: frame `t` covers
/// `samples[t·hop .. t·hop + win]`.
pub fn stft(samples: &[f32], win: usize, hop: usize) -> Result<Spectrogram> {
    if samples.len() < win {
        return Err(Error::InputTooShort { needed: win, got: samples.len() });
    }
    let frames = frame_count(samples.len(), win, hop);
    let bins = win / 2 + 1;
    let window = hamming(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let chunk = &samples[t * hop..t * hop + win];
        for ((b, &s), &w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram { frames, bins, values })
}
