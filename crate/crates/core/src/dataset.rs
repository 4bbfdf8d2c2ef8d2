//! Datasets on disk: a directory with `manifest.txt` (one clip id per line),
//! `<id>.wav` (4-channel FOA) and `<id>.csv` (labels), optionally paired with
//! a feature cache whose entries are named `<id>:<segment>`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Config;
use crate::error::{Result, SeldError};
use crate::features::wav::{read_wav, write_wav};
use crate::features::{load_features, FeatureClip, FeatureExtractor};
use crate::labels::{read_labels, write_labels, EventFrame, LabelClip};
use crate::synth::{mix_scene, random_sources};

pub const MANIFEST: &str = "manifest.txt";

pub fn read_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| SeldError::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_manifest(dir: &Path, ids: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = ids.join("\n");
    if !ids.is_empty() {
        text.push('\n');
    }
    atomic_write(&path, text.as_bytes())
}

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| SeldError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| SeldError::io(path, e))
}

/// Generates `clips` random scenes into `dir` and returns their ids.
pub fn synthesize(dir: &Path, clips: usize, seed: u64, cfg: &Config) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| SeldError::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..clips).map(|_| rng.random()).collect();
    let d = &cfg.data;
    let ids: Vec<String> = (0..clips).map(|i| format!("clip{i:04}")).collect();
    ids.par_iter().zip(&seeds).try_for_each(|(id, &s)| -> Result<()> {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let sources = random_sources(&mut r, d.clip_seconds, d.label_hop_seconds);
        let (clip, events) = mix_scene(&sources, d.sample_rate, d.clip_seconds, d.label_hop_seconds, r.random())?;
        write_wav(&dir.join(format!("{id}.wav")), &clip)?;
        write_labels(&dir.join(format!("{id}.csv")), &events)
    })?;
    write_manifest(dir, &ids)?;
    Ok(ids)
}

/// Features of every clip in a dataset directory, in manifest order.
pub fn extract_dir(dir: &Path, cfg: &Config) -> Result<Vec<(String, FeatureClip)>> {
    let ids = read_manifest(dir)?;
    let fx = FeatureExtractor::new(&cfg.data)?;
    let per_clip = ids
        .par_iter()
        .map(|id| -> Result<Vec<(String, FeatureClip)>> {
            let path = dir.join(format!("{id}.wav"));
            let clip = read_wav(&path, cfg.data.channel_order)?;
            let segs = fx.extract(&clip).map_err(|e| match e {
                SeldError::Data(m) => SeldError::Data(format!("{}: {m}", path.display())),
                other => other,
            })?;
            Ok(segs
                .into_iter()
                .enumerate()
                .map(|(k, f)| (format!("{id}:{k}"), f))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_clip.into_iter().flatten().collect())
}

/// One model input segment with its labels.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub features: FeatureClip,
    pub labels: LabelClip,
    /// Reference events with frames local to the segment.
    pub events: Vec<EventFrame>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads a dataset directory. Features come from `cache` when given,
    /// otherwise they are extracted from the WAV files.
    pub fn load(dir: &Path, cfg: &Config, cache: Option<&Path>) -> Result<Self> {
        let features = match cache {
            Some(p) => load_features(p)?,
            None => extract_dir(dir, cfg)?,
        };
        let frames = cfg.label_frames();
        let mut samples = Vec::with_capacity(features.len());
        let mut current: Option<(String, Vec<EventFrame>)> = None;
        for (id, f) in features {
            let (clip, seg) = id
                .rsplit_once(':')
                .and_then(|(c, k)| k.parse::<usize>().ok().map(|k| (c.to_string(), k)))
                .ok_or_else(|| SeldError::data(format!("feature id `{id}` is not of the form <clip>:<segment>")))?;
            if f.frames() != cfg.feature_frames() || f.mels() != cfg.data.n_mels {
                return Err(SeldError::data(format!(
                    "{id}: features are {:?}, configuration expects [7, {}, {}]",
                    f.data.shape(),
                    cfg.feature_frames(),
                    cfg.data.n_mels
                )));
            }
            if current.as_ref().is_none_or(|(c, _)| *c != clip) {
                let events = read_labels(&dir.join(format!("{clip}.csv")))?;
                current = Some((clip.clone(), events));
            }
            let events = &current.as_ref().expect("labels loaded").1;
            let start = seg * frames;
            let local: Vec<EventFrame> = events
                .iter()
                .filter(|e| (start..start + frames).contains(&e.frame))
                .map(|e| EventFrame {
                    frame: e.frame - start,
                    ..*e
                })
                .collect();
            for e in &local {
                if e.class >= cfg.model.classes {
                    return Err(SeldError::data(format!("{clip}: class {} out of range", e.class)));
                }
            }
            let labels = LabelClip::from_events(&local, 0, frames, cfg.model.tracks)?;
            samples.push(Sample {
                id,
                features: f,
                labels,
                events: local,
            });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
