//! Short-time Fourier transform with centered, reflect-padded framing.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, SeldError};

/// Periodic Hann window, `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// One-sided complex spectrogram, row-major `frames x bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Index into a signal of length `len` mirrored about its end samples
/// (the edge sample is not repeated).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || hop == 0 || hop > n_fft {
            return Err(SeldError::data(format!(
                "invalid STFT geometry n_fft={n_fft} hop={hop}"
            )));
        }
        Ok(Self {
            n_fft,
            hop,
            window: hann_periodic(n_fft),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor(len / hop)` frames; frame `t` is centered on sample `t * hop`.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop
    }

    pub fn forward(&self, signal: &[f64]) -> Result<Spectrogram> {
        if signal.is_empty() {
            return Err(SeldError::data("STFT of an empty signal"));
        }
        let frames = self.frames_for(signal.len());
        if frames == 0 {
            return Err(SeldError::data(format!(
                "signal of {} samples is shorter than one hop ({})",
                signal.len(),
                self.hop
            )));
        }
        let bins = self.bins();
        let half = (self.n_fft / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut data = Vec::with_capacity(frames * bins);
        for t in 0..frames {
            let start = (t * self.hop) as isize - half;
            for (k, b) in buf.iter_mut().enumerate() {
                let s = signal[reflect(start + k as isize, signal.len())];
                *b = Complex::new(s * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram { frames, bins, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn frame_count_and_zero_signal() {
        let stft = Stft::new(1024, 300).unwrap();
        let s = stft.forward(&vec![0.0; 120_000]).unwrap();
        assert_eq!((s.frames, s.bins), (400, 513));
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
        assert!(stft.forward(&[]).is_err());
        assert!(stft.forward(&[1.0; 299]).is_err());
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let stft = Stft::new(1024, 300).unwrap();
        let sig: Vec<f64> = (0..24_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 24_000.0).sin())
            .collect();
        let s = stft.forward(&sig).unwrap();
        let p = s.power();
        // Reflect padding distorts the edge frames; the true bin is 42.67.
        for t in 2..s.frames - 2 {
            let row = &p[t * s.bins..(t + 1) * s.bins];
            let arg = (0..s.bins).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(arg == 42 || arg == 43, "frame {t}: peak at bin {arg}");
        }
    }
}
