//! Binary tensor files and multi-tensor archives.
//!
//! One tensor record is laid out as
//!
//! ```text
//! b"MMFKTNSR" | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | rank x u64 LE dims | LE scalars, row-major
//! ```
//!
//! An archive is a concatenation of records in one `.bin` file plus a sidecar
//! JSON manifest (same path, `.json` extension) mapping each tensor name to the
//! byte offset of its record. A single-tensor file is an archive whose only
//! record sits at offset 0, so it can be read without a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MMFKTNSR";

/// Name to byte-offset map stored next to an archive.
pub type Manifest = BTreeMap<String, u64>;

pub fn encode_tensor<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let rank = u8::try_from(tensor.rank())
        .map_err(|_| Error::shape(tensor.shape(), "rank does not fit in a u8"))?;
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(rank);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated record at byte {}", *at)))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decodes the record starting at `offset`, converting to `T` if the stored
/// dtype differs. Returns the tensor and the offset just past the record.
pub fn decode_tensor<T: Scalar>(bytes: &[u8], offset: usize) -> Result<(Tensor<T>, usize)> {
    let mut at = offset;
    if take(bytes, &mut at, 8)? != MAGIC {
        return Err(Error::Format(format!("bad magic at byte {offset}")));
    }
    let header = take(bytes, &mut at, 2)?;
    let dtype = DType::from_tag(header[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", header[0])))?;
    let rank = header[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = take(bytes, &mut at, 8)?;
        let d = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let count: usize = shape.iter().product();
    let raw = take(bytes, &mut at, count * dtype.size())?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    Ok((Tensor::new(&shape, data)?, at))
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut bytes = Vec::new();
    encode_tensor(tensor, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let (t, end) = decode_tensor(&bytes, 0)?;
    if end != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor record",
            bytes.len() - end
        )));
    }
    Ok(t)
}

pub fn manifest_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `entries` to `bin` and the manifest next to it.
pub fn write_archive<T: Scalar>(bin: impl AsRef<Path>, entries: &[(String, &Tensor<T>)]) -> Result<Manifest> {
    let bin = bin.as_ref();
    let mut bytes = Vec::new();
    let mut manifest = Manifest::new();
    for (name, tensor) in entries {
        if manifest.insert(name.clone(), bytes.len() as u64).is_some() {
            return Err(Error::Format(format!("duplicate archive entry {name}")));
        }
        encode_tensor(tensor, &mut bytes)?;
    }
    fs::write(bin, bytes)?;
    fs::write(manifest_path(bin), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_archive<T: Scalar>(bin: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<T>>> {
    let bin = bin.as_ref();
    let bytes = fs::read(bin)?;
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path(bin))?)?;
    let mut out = BTreeMap::new();
    for (name, offset) in manifest {
        let offset = usize::try_from(offset).map_err(|_| Error::Format("offset overflow".into()))?;
        let (t, _) = decode_tensor(&bytes, offset)?;
        out.insert(name, t);
    }
    Ok(out)
}

/// Removes `key` from a loaded archive, failing with a format error if absent.
pub fn take_entry<T: Scalar>(archive: &mut BTreeMap<String, Tensor<T>>, key: &str) -> Result<Tensor<T>> {
    archive
        .remove(key)
        .ok_or_else(|| Error::Format(format!("archive is missing `{key}`")))
}
