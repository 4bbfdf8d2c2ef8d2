//! Four-channel WAV input and output.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::config::ChannelOrder;
use crate::error::{Result, SeldError};

/// Reads a 4-channel WAV (integer PCM or 32-bit float) and returns it in
/// W, X, Y, Z order.
pub fn read_wav(path: &Path, order: ChannelOrder) -> Result<AudioClip> {
    let wav_err = |source| SeldError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 4 {
        return Err(SeldError::data(format!(
            "{}: {} channels, expected 4 (FOA)",
            path.display(),
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let mut ch: [Vec<f32>; 4] = std::array::from_fn(|_| Vec::with_capacity(interleaved.len() / 4));
    for frame in interleaved.chunks_exact(4) {
        for (c, &v) in ch.iter_mut().zip(frame) {
            c.push(v);
        }
    }
    let channels = match order {
        ChannelOrder::Wxyz => ch,
        ChannelOrder::Acn => {
            let [w, y, z, x] = ch;
            [w, x, y, z]
        }
    };
    AudioClip::new(spec.sample_rate, channels).map_err(|e| SeldError::data(format!("{}: {e}", path.display())))
}

/// Writes a clip as 32-bit float WAV in W, X, Y, Z order.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 4,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let wav_err = |source| SeldError::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut w = WavWriter::create(path, spec).map_err(wav_err)?;
    for i in 0..clip.len() {
        for c in &clip.channels {
            w.write_sample(c[i]).map_err(wav_err)?;
        }
    }
    w.finalize().map_err(wav_err)
}
