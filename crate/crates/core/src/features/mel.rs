//! Triangular mel filterbank on the HTK mel scale, without area normalization.

use crate::error::{Result, SeldError};

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// One filter: its first non-zero FFT bin and the weights from there on.
#[derive(Clone, Debug)]
struct Filter {
    start: usize,
    weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MelBank {
    bins: usize,
    filters: Vec<Filter>,
    centers: Vec<f64>,
}

impl MelBank {
    pub fn new(n_mels: usize, sample_rate: f64, n_fft: usize, fmin: f64, fmax: f64) -> Result<Self> {
        if !(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0) || n_mels == 0 {
            return Err(SeldError::data(format!(
                "invalid mel range {fmin}..{fmax} Hz for {n_mels} bands at {sample_rate} Hz"
            )));
        }
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let freq = |k: usize| k as f64 * sample_rate / n_fft as f64;
        let mut filters = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w: Vec<f64> = (0..bins)
                .map(|k| {
                    let f = freq(k);
                    ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0)
                })
                .collect();
            let Some(start) = w.iter().position(|&v| v > 0.0) else {
                return Err(SeldError::data(format!(
                    "mel band {m} ({l:.1}-{r:.1} Hz) covers no FFT bin; reduce n_mels or raise n_fft"
                )));
            };
            let end = w.iter().rposition(|&v| v > 0.0).unwrap() + 1;
            filters.push(Filter {
                start,
                weights: w[start..end].to_vec(),
            });
        }
        Ok(Self {
            bins,
            filters,
            centers: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn n_bins(&self) -> usize {
        self.bins
    }

    /// Center frequencies in Hz.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Dense `n_mels x bins` matrix.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        self.filters
            .iter()
            .map(|f| {
                let mut row = vec![0.0; self.bins];
                row[f.start..f.start + f.weights.len()].copy_from_slice(&f.weights);
                row
            })
            .collect()
    }

    /// `bank . v` for one spectrum of `bins` values.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.filters) {
            *o = f.weights.iter().zip(&v[f.start..]).map(|(w, x)| w * x).sum();
        }
    }
}

/// Log-mel floor.
pub const LOG_FLOOR: f64 = 1e-10;

/// `ln(max(bank . p, 1e-10))` per frame of a `frames x bins` power spectrogram.
pub fn logmel(power: &[f64], frames: usize, bank: &MelBank) -> Result<Vec<f64>> {
    if power.len() != frames * bank.n_bins() {
        return Err(SeldError::data("power spectrogram does not match the filterbank"));
    }
    if let Some(p) = power.iter().find(|p| !(**p >= 0.0)) {
        return Err(SeldError::data(format!("negative or NaN power value {p}")));
    }
    let nm = bank.n_mels();
    let mut out = vec![0.0; frames * nm];
    for t in 0..frames {
        let row = &mut out[t * nm..(t + 1) * nm];
        bank.apply(&power[t * bank.n_bins()..(t + 1) * bank.n_bins()], row);
        for v in row.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
    }
    Ok(out)
}
