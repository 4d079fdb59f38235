//! Binary tensor files and atomic file output.
//!
//! Layout (little endian): `b"FMQT"`, `u16` version, `u8` rank, `rank x u32`
//! dims, then the row-major payload. Version 1 stores `f64`, version 2 stores
//! `f32` for archives written with the 32-bit storage flag.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"FMQT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    #[default]
    F64,
    F32,
}

impl Storage {
    pub fn version(self) -> u16 {
        match self {
            Storage::F64 => 1,
            Storage::F32 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Storage::F64 => 8,
            Storage::F32 => 4,
        }
    }

    fn from_version(v: u16) -> Option<Storage> {
        match v {
            1 => Some(Storage::F64),
            2 => Some(Storage::F32),
            _ => None,
        }
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn encode_tensor(t: &Tensor, storage: Storage) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} does not fit the header", t.rank())));
    }
    let mut out = Vec::with_capacity(11 + 4 * t.rank() + storage.width() * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&storage.version().to_le_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match storage {
        Storage::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Storage::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    Ok(out)
}

struct Header {
    storage: Storage,
    shape: Vec<usize>,
    len: u64,
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let mut fixed = [0u8; 7];
    r.read_exact(&mut fixed).map_err(|_| format_err(path, "truncated header"))?;
    if &fixed[..4] != TENSOR_MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    let storage = Storage::from_version(version).ok_or_else(|| format_err(path, format!("unsupported version {version}")))?;
    let rank = fixed[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d).map_err(|_| format_err(path, "truncated dims"))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(format_err(path, "zero dimension"));
    }
    Ok(Header {
        storage,
        len: 7 + 4 * rank as u64,
        shape,
    })
}

fn decode_payload(bytes: &[u8], storage: Storage) -> Vec<f64> {
    match storage {
        Storage::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
        Storage::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
            .collect(),
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut cursor = bytes;
    let h = read_header(&mut cursor, path)?;
    let numel: usize = h.shape.iter().product();
    if cursor.len() != numel * h.storage.width() {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", cursor.len(), numel * h.storage.width()),
        ));
    }
    Tensor::new(h.shape, decode_payload(cursor, h.storage))
}

pub fn write_tensor(path: &Path, t: &Tensor, storage: Storage) -> Result<()> {
    write_atomic(path, &encode_tensor(t, storage)?)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

/// Reads entry `index` along the leading axis without loading the whole file.
pub fn read_tensor_slice(path: &Path, index: usize) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let h = read_header(&mut r, path)?;
    if h.shape.len() < 2 || index >= h.shape[0] {
        return Err(format_err(path, format!("slice {index} out of range for {:?}", h.shape)));
    }
    let inner: usize = h.shape[1..].iter().product();
    let width = h.storage.width();
    r.seek(SeekFrom::Start(h.len + (index * inner * width) as u64))
        .map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; inner * width];
    r.read_exact(&mut buf).map_err(|_| format_err(path, "truncated payload"))?;
    Tensor::new(h.shape[1..].to_vec(), decode_payload(&buf, h.storage))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut bytes, row)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| format_err(path, format!("line {}: {e}", n + 1))))
        .collect()
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_keeps_nan_payload_bits() {
        let weird = f64::from_bits(0x7ff8_dead_beef_0001);
        let t = Tensor::new([2, 2], vec![1.5, -0.0, weird, f64::INFINITY]).unwrap();
        let bytes = encode_tensor(&t, Storage::F64).unwrap();
        assert_eq!(bytes.len(), 7 + 8 + 32);
        let back = decode_tensor(&bytes, Path::new("mem")).unwrap();
        assert!(back.bit_eq(&t));
    }

    #[test]
    fn f32_storage_is_within_single_precision() {
        let t = Tensor::new([3], vec![0.1, -2.5, 1e-3]).unwrap();
        let back = decode_tensor(&encode_tensor(&t, Storage::F32).unwrap(), Path::new("mem")).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-7);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode_tensor(&t, Storage::F64).unwrap();
        assert!(decode_tensor(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        bytes[0] = b'X';
        assert!(decode_tensor(&bytes, Path::new("mem")).is_err());
    }
}
