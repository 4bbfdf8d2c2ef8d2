//! Seven-channel input features from first-order Ambisonics audio: four
//! log-mel spectrograms (W, X, Y, Z) followed by the three components of the
//! mel-domain intensity vector.

pub mod cache;
pub mod mel;
pub mod stft;
pub mod wav;

pub use cache::{load_features, save_features};

use mff_tensor::Tensor;

use crate::config::DataConfig;
use crate::error::{Result, SeldError};
use mel::{logmel, MelBank};
use stft::{Spectrogram, Stft};

pub const FEATURE_CHANNELS: usize = 7;

/// Guard below which an intensity vector is treated as zero.
pub const IV_EPS: f64 = 1e-8;

/// Four equally long channels in W, X, Y, Z order.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub channels: [Vec<f32>; 4],
}

impl AudioClip {
    pub fn new(sample_rate: u32, channels: [Vec<f32>; 4]) -> Result<Self> {
        let len = channels[0].len();
        if len == 0 {
            return Err(SeldError::data("audio clip has no samples"));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(SeldError::data("audio channels differ in length"));
        }
        Ok(Self { sample_rate, channels })
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[7, frames, mels]` feature block of one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureClip {
    pub data: Tensor<f32>,
}

impl FeatureClip {
    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn mels(&self) -> usize {
        self.data.shape()[2]
    }

    /// Row-major `frames x mels` plane of one channel.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames() * self.mels();
        &self.data.data()[c * n..(c + 1) * n]
    }
}

/// Mel-projected intensity vectors `Re(conj(W) * (X, Y, Z))`, normalized to
/// unit length per mel bin (zero vectors stay zero). Returns three
/// `frames x mels` planes.
pub fn intensity_vectors(spectra: [&Spectrogram; 4], bank: &MelBank) -> Result<[Vec<f64>; 3]> {
    let [w, x, y, z] = spectra;
    for s in [x, y, z] {
        if s.frames != w.frames || s.bins != w.bins {
            return Err(SeldError::data("intensity vector spectra differ in shape"));
        }
    }
    if w.bins != bank.n_bins() {
        return Err(SeldError::data("spectra do not match the filterbank"));
    }
    let (frames, nm) = (w.frames, bank.n_mels());
    let mut out = [vec![0.0; frames * nm], vec![0.0; frames * nm], vec![0.0; frames * nm]];
    let mut raw = vec![0.0; w.bins];
    let mut mel = [vec![0.0; nm], vec![0.0; nm], vec![0.0; nm]];
    for t in 0..frames {
        let wf = w.frame(t);
        for (comp, s) in [x, y, z].into_iter().enumerate() {
            for ((r, a), b) in raw.iter_mut().zip(wf).zip(s.frame(t)) {
                *r = (a.conj() * b).re;
            }
            bank.apply(&raw, &mut mel[comp]);
        }
        for m in 0..nm {
            let v = [mel[0][m], mel[1][m], mel[2][m]];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(IV_EPS);
            for c in 0..3 {
                out[c][t * nm + m] = v[c] / norm;
            }
        }
    }
    Ok(out)
}

pub struct FeatureExtractor {
    stft: Stft,
    bank: MelBank,
    sample_rate: u32,
    segment_samples: usize,
}

impl FeatureExtractor {
    pub fn new(cfg: &DataConfig) -> Result<Self> {
        let stft = Stft::new(cfg.n_fft, cfg.hop)?;
        let bank = MelBank::new(cfg.n_mels, cfg.sample_rate as f64, cfg.n_fft, cfg.fmin, cfg.fmax)?;
        let segment_samples = (cfg.clip_seconds * cfg.sample_rate as f64).round() as usize;
        Ok(Self {
            stft,
            bank,
            sample_rate: cfg.sample_rate,
            segment_samples,
        })
    }

    pub fn bank(&self) -> &MelBank {
        &self.bank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Features of one segment of any length (`frames = floor(len / hop)`).
    pub fn segment(&self, channels: [&[f64]; 4]) -> Result<FeatureClip> {
        let spectra = channels
            .iter()
            .map(|c| self.stft.forward(c))
            .collect::<Result<Vec<_>>>()?;
        let (frames, nm) = (spectra[0].frames, self.bank.n_mels());
        let plane = frames * nm;
        let mut data = Vec::with_capacity(FEATURE_CHANNELS * plane);
        for s in &spectra {
            let lm = logmel(&s.power(), frames, &self.bank)?;
            data.extend(lm.iter().map(|&v| v as f32));
        }
        let iv = intensity_vectors([&spectra[0], &spectra[1], &spectra[2], &spectra[3]], &self.bank)?;
        for c in iv {
            data.extend(c.iter().map(|&v| v as f32));
        }
        Ok(FeatureClip {
            data: Tensor::new(&[FEATURE_CHANNELS, frames, nm], data)?,
        })
    }

    /// Splits a clip into non-overlapping segments (the last one zero-padded)
    /// and extracts each.
    pub fn extract(&self, clip: &AudioClip) -> Result<Vec<FeatureClip>> {
        if clip.sample_rate != self.sample_rate {
            return Err(SeldError::data(format!(
                "sample rate {} Hz, expected {} Hz",
                clip.sample_rate, self.sample_rate
            )));
        }
        if clip.is_empty() {
            return Err(SeldError::data("audio clip has no samples"));
        }
        let seg = self.segment_samples;
        let count = clip.len().div_ceil(seg);
        (0..count)
            .map(|k| {
                let chans: Vec<Vec<f64>> = clip
                    .channels
                    .iter()
                    .map(|c| {
                        let mut v: Vec<f64> = c[k * seg..((k + 1) * seg).min(c.len())]
                            .iter()
                            .map(|&s| s as f64)
                            .collect();
                        v.resize(seg, 0.0);
                        v
                    })
                    .collect();
                self.segment([&chans[0], &chans[1], &chans[2], &chans[3]])
            })
            .collect()
    }
}

/// Energy-weighted mean intensity direction over all bins, weighting each
/// bin by its omnidirectional mel power. Returns `None` for silence.
pub fn mean_iv_direction(f: &FeatureClip) -> Option<[f64; 3]> {
    let w = f.channel(0);
    let mut acc = [0.0; 3];
    for (i, &lw) in w.iter().enumerate() {
        let e = (lw as f64).exp();
        for (c, a) in acc.iter_mut().enumerate() {
            *a += e * f.channel(4 + c)[i] as f64;
        }
    }
    let n = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
    (n > 0.0).then(|| [acc[0] / n, acc[1] / n, acc[2] / n])
}
