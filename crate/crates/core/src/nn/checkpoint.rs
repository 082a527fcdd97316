//! Flat binary parameter checkpoints.
//!
//! Layout: magic `UPN1`, one byte of element width (4 = f32, 8 = f64),
//! u32 record count; then per record: u32 name length, name bytes, u32 rank,
//! u64 dims, raw little-endian values.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"UPN1";

pub fn encode_state<T: Real>(entries: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::BYTES);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            v.write_le(&mut out);
        }
    }
    out
}

pub struct StateRecord<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

pub fn decode_state<T: Real>(bytes: &[u8]) -> Result<Vec<StateRecord<T>>> {
    let bad = |msg: &str| Error::Schema {
        path: "<checkpoint>".into(),
        msg: msg.into(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(bad("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("bad magic, expected UPN1"));
    }
    let width = take(&mut pos, 1)?[0];
    if width != T::BYTES {
        return Err(bad(&format!(
            "checkpoint precision {width} bytes, expected {}",
            T::BYTES
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * T::BYTES as usize)?;
        let values: Vec<T> = raw
            .chunks_exact(T::BYTES as usize)
            .map(|c| T::read_le(c))
            .collect();
        records.push(StateRecord { name, shape, values });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save_state<T: Real>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode_state(entries))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a checkpoint into existing tensors, matched by name.
pub fn load_state<T: Real>(path: &Path, entries: &[(String, Tensor<T>)]) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let records = decode_state::<T>(&bytes)?;
    if records.len() != entries.len() {
        return Err(Error::Schema {
            path: path.display().to_string(),
            msg: format!(
                "checkpoint has {} records, model expects {}",
                records.len(),
                entries.len()
            ),
        });
    }
    let by_name: std::collections::HashMap<&str, &StateRecord<T>> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    for (name, tensor) in entries {
        let rec = by_name.get(name.as_str()).ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            msg: format!("checkpoint missing parameter {name}"),
        })?;
        if rec.shape != tensor.shape() {
            return Err(Error::Schema {
                path: path.display().to_string(),
                msg: format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    rec.shape,
                    tensor.shape()
                ),
            });
        }
        tensor.set_data(rec.values.clone());
    }
    Ok(())
}
