//! `MFFW` weight files.
//!
//! Layout (little-endian): `"MFFW"`, version `u8`, `u32` length of the JSON
//! architecture, the JSON itself, `u32` tensor count, then per tensor a `u16`
//! name length, the UTF-8 name, a dtype tag `u8`, `u8` rank, `u32` dims and
//! the raw values.

use std::path::Path;

use super::model::{ArchConfig, NetworkParams};
use crate::error::{MffError, Result};
use crate::scalar::{DType, Scalar};

const MAGIC: &[u8; 4] = b"MFFW";
const VERSION: u8 = 1;

pub fn write_checkpoint<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    let arch = serde_json::to_vec(&params.arch).expect("arch serializes");
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    let named = params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn read_value<T: Scalar>(dtype: DType, bytes: &[u8]) -> T {
    match dtype {
        DType::F32 => T::of(f32::read_le(bytes) as f64),
        DType::F64 => T::of(f64::read_le(bytes)),
    }
}

/// Decodes a checkpoint, converting stored values to `T` if needed.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> std::result::Result<NetworkParams<T>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchConfig =
        serde_json::from_slice(r.take(arch_len)?).map_err(|e| format!("architecture: {e}"))?;
    arch.validate().map_err(|e| e.to_string())?;
    let mut params = NetworkParams::<T>::zeros(&arch);
    let names = NetworkParams::<T>::tensor_names(&arch);
    let count = r.u32()? as usize;
    if count != names.len() {
        return Err(format!("expected {} tensors, found {count}", names.len()));
    }
    let mut seen = vec![false; names.len()];
    let mut slots = params.tensors_mut();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| "tensor name is not UTF-8")?;
        let slot = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| format!("unexpected tensor {name:?}"))?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(format!("duplicate tensor {name:?}"));
        }
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| format!("{name}: unknown dtype"))?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let t = &mut slots[slot];
        if dims != t.shape() {
            return Err(format!("{name}: shape {dims:?} does not match architecture {:?}", t.shape()));
        }
        let raw = r.take(t.len() * dtype.size())?;
        for (v, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(dtype.size())) {
            *v = read_value(dtype, chunk);
        }
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    drop(slots);
    if !params.is_finite() {
        return Err("non-finite weights".into());
    }
    Ok(params)
}

pub fn save_checkpoint<T: Scalar>(params: &NetworkParams<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MffError::io(dir, e))?;
    }
    std::fs::write(path, write_checkpoint(params)).map_err(|e| MffError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<NetworkParams<T>> {
    let bytes = std::fs::read(path).map_err(|e| MffError::io(path, e))?;
    read_checkpoint(&bytes).map_err(|msg| MffError::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
