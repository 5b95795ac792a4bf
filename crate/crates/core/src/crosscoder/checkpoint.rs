//! Binary checkpoint layout, all integers little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `XDCK` | 4 bytes |
//! | version | u32 |
//! | dtype (0 = f32, 1 = f64) | u32 |
//! | d_model, latents | u32, u32 |
//! | flags (bit 0: threshold set) | u32 |
//! | threshold | f64 |
//! | input scales | f64 x 2 |
//! | score mode | u32 |
//! | config JSON length, bytes | u32, utf-8 |
//! | tensor count | u32 |
//! | per tensor: name length, name, rows, cols, data | u16, utf-8, u64, u64, dtype x rows·cols |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, Matrix, Real};

use super::params::{CrosscoderParams, ScoreMode, TENSOR_NAMES};
use super::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(params: &CrosscoderParams<T>, path: &Path) -> Result<()> {
    params.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        CHECKPOINT_VERSION,
        T::DTYPE.code(),
        params.d_model() as u32,
        params.latents() as u32,
        params.threshold.is_some() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let th = params.threshold.map_or(0.0, |t| t.to_f64().unwrap());
    buf.extend_from_slice(&th.to_le_bytes());
    for s in params.input_scale {
        buf.extend_from_slice(&s.to_f64().unwrap().to_le_bytes());
    }
    buf.extend_from_slice(&params.score_mode.code().to_le_bytes());
    let cfg = match &params.config {
        Some(c) => serde_json::to_vec(c).map_err(|e| Error::Format(e.to_string()))?,
        None => Vec::new(),
    };
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(TENSOR_NAMES.len() as u32).to_le_bytes());
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors()) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for &v in t.as_slice() {
            v.put_le(&mut buf);
        }
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&buf).map_err(Error::io(path))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a checkpoint into precision `T`. An f32 file loads exactly into
/// f64; an f64 file may not be loaded as f32.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<CrosscoderParams<T>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{} is not a crosscoder checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let code = c.u32()?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
    if dtype.size() > T::DTYPE.size() {
        return Err(Error::Format(format!("cannot load {dtype:?} checkpoint as {:?}", T::DTYPE)));
    }
    let d = c.u32()? as usize;
    let n = c.u32()? as usize;
    let flags = c.u32()?;
    let th = c.f64()?;
    let scales = [c.f64()?, c.f64()?];
    let mode_code = c.u32()?;
    let score_mode =
        ScoreMode::from_code(mode_code).ok_or_else(|| Error::Format(format!("unknown score mode {mode_code}")))?;
    let cfg_len = c.u32()? as usize;
    let cfg_bytes = c.take(cfg_len)?;
    let config: Option<TrainConfig> = if cfg_len == 0 {
        None
    } else {
        Some(serde_json::from_slice(cfg_bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?)
    };
    let count = c.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", TENSOR_NAMES.len())));
    }
    let mut params = CrosscoderParams::<T>::zeros(d, n);
    for (name, slot) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
        let len = c.u16()? as usize;
        let got = c.take(len)?;
        if got != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor {name}, found {}",
                String::from_utf8_lossy(got)
            )));
        }
        let rows = c.u64()? as usize;
        let cols = c.u64()? as usize;
        let nbytes = rows
            .checked_mul(cols)
            .and_then(|x| x.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let raw = c.take(nbytes)?;
        let data = raw.chunks_exact(dtype.size()).map(|ch| T::get_le(dtype, ch)).collect();
        *slot = Matrix::from_vec(rows, cols, data)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
    }
    params.threshold = (flags & 1 == 1).then(|| T::lit(th));
    params.input_scale = scales.map(T::lit);
    params.score_mode = score_mode;
    params.config = config;
    params
        .validate()
        .map_err(|e| Error::Format(format!("inconsistent checkpoint: {e}")))?;
    Ok(params)
}
