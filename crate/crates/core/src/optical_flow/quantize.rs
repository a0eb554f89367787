//! Symmetric 8-bit quantization of flow fields by their own maximum absolute
//! component, and the `MFFQ` cache file that stores the result.

use std::fs;
use std::path::Path;

use crate::error::{MffError, Result};
use crate::plane::Plane;
use crate::scalar::Scalar;

use super::FlowField;

pub const MFFQ_MAGIC: &[u8; 4] = b"MFFQ";
pub const MFFQ_VERSION: u8 = 0x01;
const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 4;

/// Flow codes in `[0, 255]` with zero at 128, plus the scale `M` they were
/// normalised by.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedFlow {
    pub u: Plane<u8>,
    pub v: Plane<u8>,
    pub scale: f32,
}

impl QuantizedFlow {
    /// The exact encoding of zero motion: every code 128, `M = 0`.
    pub fn zero(width: usize, height: usize) -> Self {
        QuantizedFlow {
            u: Plane::filled(width, height, 128),
            v: Plane::filled(width, height, 128),
            scale: 0.0,
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    /// Little-endian: magic, version, u16 width, u16 height, f32 scale, u plane, v plane.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 2 * self.u.data().len());
        out.extend_from_slice(MFFQ_MAGIC);
        out.push(MFFQ_VERSION);
        out.extend_from_slice(&(self.width() as u16).to_le_bytes());
        out.extend_from_slice(&(self.height() as u16).to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        out.extend_from_slice(self.u.data());
        out.extend_from_slice(self.v.data());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err(format!("truncated header ({} bytes)", bytes.len()));
        }
        if &bytes[..4] != MFFQ_MAGIC {
            return Err("bad magic".into());
        }
        if bytes[4] != MFFQ_VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let w = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let h = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let scale = f32::from_le_bytes([bytes[9], bytes[10], bytes[11], bytes[12]]);
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(format!("invalid scale {scale}"));
        }
        let n = w * h;
        if bytes.len() != HEADER_LEN + 2 * n {
            return Err(format!(
                "expected {} bytes for {}x{}, found {}",
                HEADER_LEN + 2 * n,
                w,
                h,
                bytes.len()
            ));
        }
        let body = &bytes[HEADER_LEN..];
        Ok(QuantizedFlow {
            u: Plane::new(w, h, body[..n].to_vec()).map_err(|e| e.to_string())?,
            v: Plane::new(w, h, body[n..].to_vec()).map_err(|e| e.to_string())?,
            scale,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| MffError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MffError::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| MffError::CacheFormat {
            path: path.to_path_buf(),
            msg,
        })
    }
}

#[inline]
fn encode_value(x: f64, m: f64) -> u8 {
    let code = (((x / m) + 1.0) / 2.0 * 255.0 + 0.5).floor();
    code.clamp(0.0, 255.0) as u8
}

pub fn quantize_flow<T: Scalar>(flow: &FlowField<T>) -> Result<QuantizedFlow> {
    if !flow.is_finite() {
        return Err(MffError::NonFinite("cannot quantize non-finite flow".into()));
    }
    let m = flow.max_abs().to_f64_lossy();
    if m == 0.0 {
        return Ok(QuantizedFlow::zero(flow.width(), flow.height()));
    }
    let code = |p: &Plane<T>| p.map(|x| encode_value(x.to_f64_lossy(), m));
    Ok(QuantizedFlow {
        u: code(&flow.u),
        v: code(&flow.v),
        scale: m as f32,
    })
}

/// `x = (code/255·2 − 1)·M`.
pub fn dequantize_flow<T: Scalar>(q: &QuantizedFlow) -> FlowField<T> {
    let m = q.scale as f64;
    let decode = |p: &Plane<u8>| p.map(|c| T::of((c as f64 / 255.0 * 2.0 - 1.0) * m));
    FlowField {
        u: decode(&q.u),
        v: decode(&q.v),
    }
}
