//! Little-endian binary weight files.
//!
//! Layout:
//! ```text
//! b"DCXW" | u32 version | u32 len | config JSON
//! u32 n_params  × { u32 len | name | u32 ndim | u64 dims.. | f64 values.. }
//! u32 n_running × { u32 len | name | u64 channels | f64 mean.. | f64 var.. }
//! ```
//! Values are stored as `f64` whatever the in-memory scalar type.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::densenet::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"DCXW";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
}

pub fn encode_weights<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(&mut out, &serde_json::to_string(model.config())?);
    put_u32(&mut out, model.params().len() as u32);
    for p in model.params() {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.shape().len() as u32);
        for &d in p.value.shape() {
            put_u64(&mut out, d as u64);
        }
        put_values(&mut out, p.value.data());
    }
    put_u32(&mut out, model.running_stats().len() as u32);
    for r in model.running_stats() {
        put_str(&mut out, &r.name);
        put_u64(&mut out, r.mean.len() as u64);
        put_values(&mut out, &r.mean);
        put_values(&mut out, &r.var);
    }
    Ok(out)
}

pub fn save_weights<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let bytes = encode_weights(model)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("weight file truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} overflows")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("non-UTF-8 name: {e}")))
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

/// Reads the configuration stored in a weight file without the tensors.
pub fn decode_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&r.string()?)?;
    config.validate()?;
    Ok(config)
}

pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let config = decode_config(bytes)?;
    let mut r = Reader { buf: bytes, pos: 0 };
    r.take(8)?;
    r.string()?;
    let mut model = Model::<T>::build(config, 0)?;
    let n = r.u32()? as usize;
    if n != model.params().len() {
        return Err(Error::Format(format!(
            "weight file has {n} parameters, configuration needs {}",
            model.params().len()
        )));
    }
    for i in 0..n {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let p = &mut model.params_mut()[i];
        if p.name != name || p.value.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {i}: file has {name} {shape:?}, model expects {} {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let values = r.values(p.value.len())?;
        p.value.data_mut().copy_from_slice(&values);
    }
    let n = r.u32()? as usize;
    if n != model.running_stats().len() {
        return Err(Error::Format(format!(
            "weight file has {n} batch-norm statistics, configuration needs {}",
            model.running_stats().len()
        )));
    }
    for i in 0..n {
        let name = r.string()?;
        let channels = r.u64()?;
        let s = &mut model.running_stats_mut()[i];
        if s.name != name || s.mean.len() != channels {
            return Err(Error::Format(format!(
                "statistics {i}: file has {name} ({channels} channels), model expects {} ({})",
                s.name,
                s.mean.len()
            )));
        }
        s.mean = r.values(channels)?;
        s.var = r.values(channels)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in weight file", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

/// Loads `path` and fails unless its configuration equals `expected`.
pub fn load_weights_matching<T: Scalar>(path: &Path, expected: &ModelConfig) -> Result<Model<T>> {
    let model = load_weights::<T>(path)?;
    if model.config() != expected {
        return Err(Error::Config(format!(
            "weight file {} was trained with {:?}, expected {:?}",
            path.display(),
            model.config(),
            expected
        )));
    }
    Ok(model)
}
