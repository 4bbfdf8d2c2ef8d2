//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u64`:
//!
//! ```text
//! b"MFFCKPT1"
//! entry count
//! per entry: name length, UTF-8 name bytes, rank, `rank` extents,
//!            product(extents) little-endian f32 values
//! ```
//!
//! Every store entry is written, buffers included, in store order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFFCKPT1";

pub fn write_checkpoint<T: Scalar>(store: &ParamStore<T>, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, name, value, _) in store.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.rank() as u64).to_le_bytes())?;
        for &e in value.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in value.data() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(store, &mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| TensorError::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| TensorError::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(r)? as usize;
        if len > 1 << 16 {
            return Err(TensorError::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| TensorError::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = read_u64(r)? as usize;
        if rank > 8 {
            return Err(TensorError::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| TensorError::Checkpoint(format!("{name}: truncated data: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Loads a checkpoint into an existing store. Names and shapes must match
/// the store exactly.
pub fn load_checkpoint<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let entries = read_checkpoint::<T>(&mut r)?;
    if entries.len() != store.len() {
        return Err(TensorError::Checkpoint(format!(
            "{} entries in file, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, value) in entries {
        let id = store.id(&name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
        store.set(id, value)?;
    }
    Ok(())
}
