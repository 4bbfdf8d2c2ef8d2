//! Run configuration: plain-text `key = value` files with section prefixes
//! (`model.`, `mff.`, `train.`, `data.`, `eval.`), plus command-line overrides.
//!
//! Every key has a default; defaults give the full-size model.
//! Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use mff_tensor::PoolMode;

use crate::error::{ConfigError, Result, SeldError};

#[derive(Clone, Debug, PartialEq)]
pub struct MffConfig {
    /// Number of parallel subnetworks.
    pub s: usize,
    /// Convolutional blocks per TFCM.
    pub m: usize,
    /// Channels of the first subnetwork (equal to the stem output).
    pub base_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderLayout {
    /// One linear head per output track.
    PerTrack,
    /// One linear producing all tracks at once.
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Output channels of the three branch Dual Conv stages.
    pub branch_channels: [usize; 3],
    pub embed_dim: usize,
    pub conformer_layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
    pub dropout: f64,
    pub tracks: usize,
    pub classes: usize,
    pub pool: PoolMode,
    pub decoder: DecoderLayout,
    pub bn_momentum: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Starss22,
    Starss23,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PitMode {
    Frame,
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop: f64,
    pub profile: Profile,
    /// Overrides the profile's drop epoch when non-zero.
    pub lr_drop_epoch: usize,
    pub sed_weight: f64,
    pub doa_weight: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub pit: PitMode,
    pub seed: u64,
    pub eval_every: usize,
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelOrder {
    /// W, X, Y, Z as stored.
    Wxyz,
    /// Ambisonic channel numbering W, Y, Z, X.
    Acn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub clip_seconds: f64,
    pub label_hop_seconds: f64,
    pub channel_order: ChannelOrder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub segment_frames: usize,
    pub threshold_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub mff: MffConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("mff.s", "number of parallel subnetworks (0 bypasses the module)"),
    ("mff.m", "convolutional blocks per TFCM"),
    ("mff.base_channels", "channels after the stem Dual Conv"),
    (
        "model.branch_channels",
        "channels of the three branch Dual Conv stages, comma separated",
    ),
    (
        "model.embed_dim",
        "Conformer width; must equal the last branch channel count",
    ),
    ("model.conformer_layers", "number of Conformer blocks per branch"),
    ("model.heads", "attention heads"),
    (
        "model.conv_kernel",
        "depthwise kernel of the Conformer convolution module",
    ),
    ("model.ffn_expansion", "feed-forward expansion factor"),
    ("model.dropout", "dropout probability inside the Conformer"),
    ("model.tracks", "output tracks"),
    ("model.classes", "sound event classes"),
    ("model.pool", "branch pooling: avg | max"),
    ("model.decoder", "output heads: per_track | shared"),
    ("model.bn_momentum", "batch-norm running statistics momentum"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "clips per optimizer step"),
    ("train.lr", "initial learning rate"),
    ("train.lr_drop", "learning rate after the drop epoch"),
    (
        "train.profile",
        "schedule profile: starss22 (drop after 80) | starss23 (drop after 60)",
    ),
    ("train.lr_drop_epoch", "explicit drop epoch; 0 uses the profile"),
    ("train.sed_weight", "detection loss weight"),
    ("train.doa_weight", "localization loss weight"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.grad_clip", "global gradient norm cap; 0 disables"),
    ("train.pit", "permutation granularity: frame | clip"),
    ("train.seed", "seed for initialization, shuffling and dropout"),
    ("train.eval_every", "validate every N epochs"),
    ("train.precision", "f32 | f64"),
    ("data.sample_rate", "expected input sample rate in Hz"),
    ("data.n_fft", "STFT size and Hann window length"),
    ("data.hop", "STFT hop in samples"),
    ("data.n_mels", "mel bands"),
    ("data.fmin", "lowest mel edge in Hz"),
    ("data.fmax", "highest mel edge in Hz"),
    ("data.clip_seconds", "segment length in seconds"),
    ("data.label_hop_seconds", "label frame length in seconds"),
    ("data.channel_order", "input channel order: wxyz | acn"),
    ("eval.segment_frames", "label frames per scoring segment"),
    ("eval.threshold_deg", "angular threshold for location-aware detection"),
];

impl Default for Config {
    fn default() -> Self {
        Self {
            mff: MffConfig {
                s: 3,
                m: 6,
                base_channels: 64,
            },
            model: ModelConfig {
                branch_channels: [128, 256, 256],
                embed_dim: 256,
                conformer_layers: 2,
                heads: 4,
                conv_kernel: 31,
                ffn_expansion: 4,
                dropout: 0.05,
                tracks: 3,
                classes: 13,
                pool: PoolMode::Average,
                decoder: DecoderLayout::PerTrack,
                bn_momentum: 0.1,
            },
            train: TrainConfig {
                epochs: 100,
                batch_size: 6,
                lr: 3e-4,
                lr_drop: 3e-5,
                profile: Profile::Starss22,
                lr_drop_epoch: 0,
                sed_weight: 0.8,
                doa_weight: 0.2,
                weight_decay: 0.01,
                grad_clip: 5.0,
                pit: PitMode::Frame,
                seed: 0,
                eval_every: 1,
                precision: Precision::F32,
            },
            data: DataConfig {
                sample_rate: 24_000,
                n_fft: 1024,
                hop: 300,
                n_mels: 128,
                fmin: 20.0,
                fmax: 12_000.0,
                clip_seconds: 5.0,
                label_hop_seconds: 0.1,
                channel_order: ChannelOrder::Wxyz,
            },
            eval: EvalConfig {
                segment_frames: 10,
                threshold_deg: 20.0,
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> std::result::Result<T, ConfigError> {
    options
        .iter()
        .find(|(name, _)| name.eq_ignore_ascii_case(value))
        .map(|&(_, v)| v)
        .ok_or_else(|| ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: format!(
                "expected one of {}",
                options.iter().map(|o| o.0).collect::<Vec<_>>().join(", ")
            ),
        })
}

const POOLS: &[(&str, PoolMode)] = &[("avg", PoolMode::Average), ("max", PoolMode::Max)];
const DECODERS: &[(&str, DecoderLayout)] = &[
    ("per_track", DecoderLayout::PerTrack),
    ("shared", DecoderLayout::Shared),
];
const PROFILES: &[(&str, Profile)] = &[("starss22", Profile::Starss22), ("starss23", Profile::Starss23)];
const PITS: &[(&str, PitMode)] = &[("frame", PitMode::Frame), ("clip", PitMode::Clip)];
const PRECISIONS: &[(&str, Precision)] = &[("f32", Precision::F32), ("f64", Precision::F64)];
const ORDERS: &[(&str, ChannelOrder)] = &[("wxyz", ChannelOrder::Wxyz), ("acn", ChannelOrder::Acn)];

fn name_of<T: PartialEq + Copy>(options: &[(&'static str, T)], v: T) -> &'static str {
    options.iter().find(|o| o.1 == v).map(|o| o.0).unwrap_or("?")
}

impl Config {
    /// The reduced model used for desk-scale overfitting runs.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.mff = MffConfig {
            s: 3,
            m: 4,
            base_channels: 16,
        };
        c.model.branch_channels = [16, 32, 64];
        c.model.embed_dim = 64;
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "mff.s" => self.mff.s = parse(key, v)?,
            "mff.m" => self.mff.m = parse(key, v)?,
            "mff.base_channels" => self.mff.base_channels = parse(key, v)?,
            "model.branch_channels" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<std::result::Result<_, _>>()?;
                self.model.branch_channels = parts.try_into().map_err(|_| ConfigError::InvalidValue {
                    key: key.into(),
                    value: v.into(),
                    reason: "expected exactly three channel counts".into(),
                })?;
            }
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.conformer_layers" => self.model.conformer_layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.conv_kernel" => self.model.conv_kernel = parse(key, v)?,
            "model.ffn_expansion" => self.model.ffn_expansion = parse(key, v)?,
            "model.dropout" => self.model.dropout = parse(key, v)?,
            "model.tracks" => self.model.tracks = parse(key, v)?,
            "model.classes" => self.model.classes = parse(key, v)?,
            "model.pool" => self.model.pool = choice(key, v, POOLS)?,
            "model.decoder" => self.model.decoder = choice(key, v, DECODERS)?,
            "model.bn_momentum" => self.model.bn_momentum = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.lr_drop" => self.train.lr_drop = parse(key, v)?,
            "train.profile" => self.train.profile = choice(key, v, PROFILES)?,
            "train.lr_drop_epoch" => self.train.lr_drop_epoch = parse(key, v)?,
            "train.sed_weight" => self.train.sed_weight = parse(key, v)?,
            "train.doa_weight" => self.train.doa_weight = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.pit" => self.train.pit = choice(key, v, PITS)?,
            "train.seed" => self.train.seed = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.precision" => self.train.precision = choice(key, v, PRECISIONS)?,
            "data.sample_rate" => self.data.sample_rate = parse(key, v)?,
            "data.n_fft" => self.data.n_fft = parse(key, v)?,
            "data.hop" => self.data.hop = parse(key, v)?,
            "data.n_mels" => self.data.n_mels = parse(key, v)?,
            "data.fmin" => self.data.fmin = parse(key, v)?,
            "data.fmax" => self.data.fmax = parse(key, v)?,
            "data.clip_seconds" => self.data.clip_seconds = parse(key, v)?,
            "data.label_hop_seconds" => self.data.label_hop_seconds = parse(key, v)?,
            "data.channel_order" => self.data.channel_order = choice(key, v, ORDERS)?,
            "eval.segment_frames" => self.eval.segment_frames = parse(key, v)?,
            "eval.threshold_deg" => self.eval.threshold_deg = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "mff.s" => self.mff.s.to_string(),
            "mff.m" => self.mff.m.to_string(),
            "mff.base_channels" => self.mff.base_channels.to_string(),
            "model.branch_channels" => {
                let [a, b, c] = self.model.branch_channels;
                format!("{a},{b},{c}")
            }
            "model.embed_dim" => self.model.embed_dim.to_string(),
            "model.conformer_layers" => self.model.conformer_layers.to_string(),
            "model.heads" => self.model.heads.to_string(),
            "model.conv_kernel" => self.model.conv_kernel.to_string(),
            "model.ffn_expansion" => self.model.ffn_expansion.to_string(),
            "model.dropout" => self.model.dropout.to_string(),
            "model.tracks" => self.model.tracks.to_string(),
            "model.classes" => self.model.classes.to_string(),
            "model.pool" => name_of(POOLS, self.model.pool).into(),
            "model.decoder" => name_of(DECODERS, self.model.decoder).into(),
            "model.bn_momentum" => self.model.bn_momentum.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.lr_drop" => self.train.lr_drop.to_string(),
            "train.profile" => name_of(PROFILES, self.train.profile).into(),
            "train.lr_drop_epoch" => self.train.lr_drop_epoch.to_string(),
            "train.sed_weight" => self.train.sed_weight.to_string(),
            "train.doa_weight" => self.train.doa_weight.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.grad_clip" => self.train.grad_clip.to_string(),
            "train.pit" => name_of(PITS, self.train.pit).into(),
            "train.seed" => self.train.seed.to_string(),
            "train.eval_every" => self.train.eval_every.to_string(),
            "train.precision" => name_of(PRECISIONS, self.train.precision).into(),
            "data.sample_rate" => self.data.sample_rate.to_string(),
            "data.n_fft" => self.data.n_fft.to_string(),
            "data.hop" => self.data.hop.to_string(),
            "data.n_mels" => self.data.n_mels.to_string(),
            "data.fmin" => self.data.fmin.to_string(),
            "data.fmax" => self.data.fmax.to_string(),
            "data.clip_seconds" => self.data.clip_seconds.to_string(),
            "data.label_hop_seconds" => self.data.label_hop_seconds.to_string(),
            "data.channel_order" => name_of(ORDERS, self.data.channel_order).into(),
            "eval.segment_frames" => self.eval.segment_frames.to_string(),
            "eval.threshold_deg" => self.eval.threshold_deg.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> std::result::Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SeldError::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// Frames per segment of feature input.
    pub fn feature_frames(&self) -> usize {
        (self.data.clip_seconds * self.data.sample_rate as f64).round() as usize / self.data.hop
    }

    /// Label frames per segment.
    pub fn label_frames(&self) -> usize {
        (self.data.clip_seconds / self.data.label_hop_seconds).round() as usize
    }

    pub fn segment_samples(&self) -> usize {
        (self.data.clip_seconds * self.data.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Inconsistent(m));
        let (mff, model, train, data) = (&self.mff, &self.model, &self.train, &self.data);
        if mff.m == 0 {
            return bad("mff.m must be at least 1".into());
        }
        if mff.base_channels == 0 || model.branch_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if mff.s > 1 && data.n_mels % 4usize.pow(mff.s as u32 - 1) != 0 {
            return bad(format!(
                "data.n_mels={} not divisible by 4^(s-1) for mff.s={}",
                data.n_mels, mff.s
            ));
        }
        if model.embed_dim != model.branch_channels[2] {
            return bad(format!(
                "model.embed_dim={} must equal the last branch channel count {}",
                model.embed_dim, model.branch_channels[2]
            ));
        }
        if model.heads == 0 || model.embed_dim % model.heads != 0 {
            return bad(format!(
                "model.embed_dim={} not divisible by model.heads={}",
                model.embed_dim, model.heads
            ));
        }
        if model.conv_kernel % 2 == 0 {
            return bad("model.conv_kernel must be odd".into());
        }
        if model.tracks != 3 {
            return bad("model.tracks must be 3".into());
        }
        if !(0.0..1.0).contains(&model.dropout) {
            return bad("model.dropout must lie in [0, 1)".into());
        }
        if !(train.lr > 0.0 && train.lr_drop > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if (train.sed_weight + train.doa_weight - 1.0).abs() > 1e-9 {
            return bad("train.sed_weight + train.doa_weight must equal 1".into());
        }
        if train.batch_size == 0 || train.eval_every == 0 {
            return bad("train.batch_size and train.eval_every must be positive".into());
        }
        if data.hop == 0 || data.hop > data.n_fft {
            return bad("data.hop must lie in 1..=data.n_fft".into());
        }
        if !(data.fmin >= 0.0 && data.fmin < data.fmax && data.fmax <= data.sample_rate as f64 / 2.0) {
            return bad("need 0 <= data.fmin < data.fmax <= sample_rate/2".into());
        }
        let t = self.feature_frames();
        if !t.is_multiple_of(8) || t / 8 != self.label_frames() {
            return bad(format!(
                "{t} feature frames do not pool to {} label frames",
                self.label_frames()
            ));
        }
        if self.eval.segment_frames == 0 {
            return bad("eval.segment_frames must be positive".into());
        }
        Ok(())
    }
}

/// Splits `--section.key=value` arguments out of an argument list.
/// Returns the remaining arguments and the overrides in order.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|body| body.split_once('='))
            .filter(|(k, _)| {
                ["model.", "mff.", "train.", "data.", "eval."]
                    .iter()
                    .any(|p| k.starts_with(p))
            })
            .map(|(k, v)| (k.to_string(), v.to_string()));
        match is_override {
            Some(kv) => overrides.push(kv),
            None => rest.push(a),
        }
    }
    (rest, overrides)
}
