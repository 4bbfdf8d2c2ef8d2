//! Synthetic first-order Ambisonics scenes: band-limited bursts, one band
//! per class, encoded as plane waves. A desk-scale stand-in for recorded
//! datasets; there is no reverberation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeldError};
use crate::features::AudioClip;
use crate::labels::{azel_to_vec, EventFrame};

pub const CLASSES: usize = 13;
const BAND_LOW_HZ: f64 = 300.0;
const BAND_HIGH_HZ: f64 = 7000.0;
const FADE_SECONDS: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignalKind {
    Tone,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub class: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub onset: f64,
    pub offset: f64,
    pub kind: SignalKind,
    pub gain: f64,
}

/// Center frequency of a class band, log-spaced over 300 Hz - 7 kHz.
pub fn class_center_hz(class: usize) -> f64 {
    let r = class as f64 / (CLASSES - 1) as f64;
    BAND_LOW_HZ * (BAND_HIGH_HZ / BAND_LOW_HZ).powf(r)
}

/// Plane-wave encoding `W = s, X = cos az cos el s, Y = sin az cos el s, Z = sin el s`.
pub fn foa_encode(mono: &[f64], azimuth_deg: f64, elevation_deg: f64) -> Result<[Vec<f64>; 4]> {
    let d = azel_to_vec(azimuth_deg, elevation_deg)?;
    Ok([
        mono.to_vec(),
        mono.iter().map(|s| d[0] * s).collect(),
        mono.iter().map(|s| d[1] * s).collect(),
        mono.iter().map(|s| d[2] * s).collect(),
    ])
}

fn render(src: &SourceSpec, sample_rate: u32, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = class_center_hz(src.class);
    let partials: Vec<(f64, f64)> = match src.kind {
        SignalKind::Tone => vec![(f0, rng.random::<f64>() * std::f64::consts::TAU)],
        SignalKind::Noise => (0..12)
            .map(|_| {
                let f = f0 * (1.0 + 0.16 * (rng.random::<f64>() - 0.5));
                (f, rng.random::<f64>() * std::f64::consts::TAU)
            })
            .collect(),
    };
    let amp = src.gain / (partials.len() as f64).sqrt();
    let start = (src.onset * sr).round() as usize;
    let end = ((src.offset * sr).round() as usize).min(len);
    let fade = (FADE_SECONDS * sr) as usize;
    let mut out = vec![0.0; len];
    for (n, o) in out.iter_mut().enumerate().take(end).skip(start) {
        let t = n as f64 / sr;
        let env = ((n - start).min(end - 1 - n) as f64 / fade.max(1) as f64).min(1.0);
        *o = amp
            * env
            * partials
                .iter()
                .map(|(f, p)| (std::f64::consts::TAU * f * t + p).sin())
                .sum::<f64>();
    }
    out
}

/// Label frames covered by `[onset, offset)`: starting at `floor(onset / hop)`,
/// `ceil((offset - onset) / hop)` frames long.
pub fn label_frames(onset: f64, offset: f64, hop: f64) -> std::ops::Range<usize> {
    let start = (onset / hop + 1e-9).floor() as usize;
    let count = ((offset - onset) / hop - 1e-9).ceil() as usize;
    start..start + count
}

/// Mixes encoded sources into one clip and emits their label frames.
pub fn mix_scene(
    sources: &[SourceSpec],
    sample_rate: u32,
    seconds: f64,
    label_hop: f64,
    seed: u64,
) -> Result<(AudioClip, Vec<EventFrame>)> {
    let len = (seconds * sample_rate as f64).round() as usize;
    let n_frames = (seconds / label_hop).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mix = [vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]];
    let mut events = Vec::new();
    for s in sources {
        if !(s.offset > s.onset && s.onset >= 0.0) || s.class >= CLASSES {
            return Err(SeldError::data(format!("invalid source {s:?}")));
        }
        let doa = azel_to_vec(s.azimuth_deg, s.elevation_deg)?;
        let enc = foa_encode(&render(s, sample_rate, len, &mut rng), s.azimuth_deg, s.elevation_deg)?;
        for (m, e) in mix.iter_mut().zip(&enc) {
            for (a, b) in m.iter_mut().zip(e) {
                *a += b;
            }
        }
        for frame in label_frames(s.onset, s.offset, label_hop).filter(|&f| f < n_frames) {
            events.push(EventFrame {
                frame,
                class: s.class,
                doa,
            });
        }
    }
    let mut counts = vec![0usize; n_frames];
    for e in &events {
        counts[e.frame] += 1;
    }
    if let Some(f) = counts.iter().position(|&c| c > 3) {
        return Err(SeldError::data(format!(
            "{} overlapping sources in label frame {f}, at most 3",
            counts[f]
        )));
    }
    let channels = mix.map(|c| c.into_iter().map(|v| v as f32).collect());
    Ok((AudioClip::new(sample_rate, channels)?, events))
}

/// A random scene of 1-3 sources with distinct classes, onsets and
/// offsets on the label grid.
pub fn random_sources(rng: &mut ChaCha8Rng, seconds: f64, label_hop: f64) -> Vec<SourceSpec> {
    let n = rng.random_range(1..=3);
    let mut classes: Vec<usize> = (0..CLASSES).collect();
    let total = (seconds / label_hop).round() as usize;
    (0..n)
        .map(|_| {
            let class = classes.swap_remove(rng.random_range(0..classes.len()));
            let dur = rng.random_range(total / 5..=total * 3 / 5).max(1);
            let start = rng.random_range(0..=total - dur);
            SourceSpec {
                class,
                azimuth_deg: rng.random_range(-180.0..180.0),
                elevation_deg: rng.random_range(-45.0..45.0),
                onset: start as f64 * label_hop,
                offset: (start + dur) as f64 * label_hop,
                kind: if rng.random::<bool>() {
                    SignalKind::Tone
                } else {
                    SignalKind::Noise
                },
                gain: rng.random_range(0.2..0.5),
            }
        })
        .collect()
}
