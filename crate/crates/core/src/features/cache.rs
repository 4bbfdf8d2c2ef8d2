//! Feature cache files.
//!
//! Layout, integers little-endian `u64`:
//!
//! ```text
//! b"MFFFEAT1"
//! clip count
//! per clip: id length, UTF-8 id bytes, 3 extents (channels, frames, mels),
//!           product(extents) little-endian f32 values
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use mff_tensor::Tensor;

use super::FeatureClip;
use crate::error::{Result, SeldError};

pub const FEATURE_MAGIC: &[u8; 8] = b"MFFFEAT1";

pub fn write_features(w: &mut impl Write, clips: &[(String, FeatureClip)]) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(clips.len() as u64).to_le_bytes())?;
    for (id, clip) in clips {
        w.write_all(&(id.len() as u64).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for &e in clip.data.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in clip.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Atomic write: temporary sibling file, then rename.
pub fn save_features(path: &Path, clips: &[(String, FeatureClip)]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let io = |e| SeldError::io(path, e);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        write_features(&mut w, clips).map_err(io)?;
        w.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_features(r: &mut impl Read) -> std::result::Result<Vec<(String, FeatureClip)>, String> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| "file too short for header".to_string())?;
    if &magic != FEATURE_MAGIC {
        return Err("bad magic, not a feature cache".into());
    }
    let trunc = |e: std::io::Error| format!("truncated file: {e}");
    let count = read_u64(r).map_err(trunc)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(r).map_err(trunc)? as usize;
        if len > 1 << 16 {
            return Err(format!("implausible id length {len}"));
        }
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(trunc)?;
        let id = String::from_utf8(id).map_err(|_| "clip id is not UTF-8".to_string())?;
        let dims = [
            read_u64(r).map_err(trunc)? as usize,
            read_u64(r).map_err(trunc)? as usize,
            read_u64(r).map_err(trunc)? as usize,
        ];
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(format!("{id}: implausible extents {dims:?}"));
        }
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(trunc)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let data = Tensor::new(&dims, data).map_err(|e| e.to_string())?;
        out.push((id, FeatureClip { data }));
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<(String, FeatureClip)>> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| SeldError::io(path, e))?);
    read_features(&mut r).map_err(|m| SeldError::data(format!("{}: {m}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_round_trip() {
        let clip = FeatureClip {
            data: Tensor::from_fn(&[7, 2, 3], |i| i as f32),
        };
        let mut buf = Vec::new();
        write_features(&mut buf, &[("a:0".into(), clip.clone())]).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 8 + 3 + 24 + 42 * 4);
        let back = read_features(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a:0".to_string(), clip)]);
        buf.pop();
        assert!(read_features(&mut buf.as_slice()).is_err());
    }
}
