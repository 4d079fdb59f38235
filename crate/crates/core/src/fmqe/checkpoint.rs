//! Versioned evaluator checkpoints.
//!
//! Little endian: `b"FMQE"`, `u16` version, `u8` variant (0 IFEM, 1 BFEM),
//! `u32` length + JSON model spec, `u32` parameter count, then per parameter
//! `u16` name length, name, `u8` rank, `rank x u32` dims and `f64` values.

use std::fs;
use std::path::Path;

use super::{FmqeModel, ModelSpec};
use crate::archive::Module;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMQE";
pub const CHECKPOINT_VERSION: u16 = 1;

fn variant(m: Module) -> u8 {
    match m {
        Module::Ifem => 0,
        Module::Bfem => 1,
    }
}

pub fn encode_checkpoint(model: &FmqeModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(variant(model.module()));
    let spec = serde_json::to_vec(&model.spec)?;
    out.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "truncated checkpoint".into(),
            });
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<FmqeModel> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut c = Cursor { bytes, path };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let var = c.u8()?;
    let len = c.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(c.take(len)?).map_err(|e| bad(e.to_string()))?;
    if variant(spec.module) != var {
        return Err(bad(format!("variant byte {var} disagrees with spec module {}", spec.module)));
    }
    let mut model = FmqeModel::new(spec, 1.0, 0)?;
    let count = c.u32()? as usize;
    if count != model.params.len() {
        return Err(bad(format!("{count} parameters, layout expects {}", model.params.len())));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let n = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|e| bad(e.to_string()))?;
        if name != model.params.name(id) {
            return Err(bad(format!("expected parameter {:?}, found {name:?}", model.params.name(id))));
        }
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let data = c
            .take(8 * numel)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        model.params.set(id, Tensor::new(dims, data)?)?;
    }
    if !c.bytes.is_empty() {
        return Err(bad(format!("{} trailing bytes", c.bytes.len())));
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &FmqeModel) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<FmqeModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
