//! Binary checkpoints: magic, format version, length-prefixed JSON metadata,
//! then named tensor blobs (`name`, dtype code, shape, little-endian data).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimState};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"COOKIEKT";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT1: &str = "optim.m/";
const MOMENT2: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    /// `pretrain` or `finetune`.
    pub phase: String,
    pub stage: u8,
    pub epoch: usize,
    pub global_step: u64,
    pub val_rsum: Option<f64>,
    pub seed: u64,
    pub optimizer: Option<AdamWConfig>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: ParamStore<T>,
    pub optim: Option<OptimState<T>>,
}

fn push_tensor<T: Real>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE.code());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(buf);
    }
}

pub fn encode_checkpoint<T: Real>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    meta.optimizer = ckpt.optim.as_ref().map(|o| o.config);
    meta.optimizer_step = ckpt.optim.as_ref().map_or(0, |o| o.step);
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(ckpt.params.num_elements() * 3 * T::DTYPE.size() + json.len() + 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let extra = if ckpt.optim.is_some() { 3 } else { 1 };
    buf.extend_from_slice(&((ckpt.params.len() * extra) as u32).to_le_bytes());
    for (_, name, t) in ckpt.params.iter() {
        push_tensor(&mut buf, name, t);
    }
    if let Some(o) = &ckpt.optim {
        if !o.matches(&ckpt.params) {
            return Err(Error::Checkpoint("optimizer state does not mirror the parameters".into()));
        }
        for (k, (_, name, _)) in ckpt.params.iter().enumerate() {
            push_tensor(&mut buf, &format!("{MOMENT1}{name}"), &o.m[k]);
            push_tensor(&mut buf, &format!("{MOMENT2}{name}"), &o.v[k]);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {} of {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u64("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;

    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "`{name}` is stored as {dtype:?}, expected {:?}",
                T::DTYPE
            )));
        }
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` has an absurd shape {shape:?}")))?;
        let raw = r.take(n, "tensor data")?;
        let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if let Some(rest) = name.strip_prefix(MOMENT1) {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix(MOMENT2) {
            v.push((rest.to_string(), t));
        } else {
            params
                .register(name, t)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let optim = match meta.optimizer {
        Some(config) => {
            let order: Vec<&str> = params.iter().map(|(_, n, _)| n).collect();
            let aligned = m.len() == order.len()
                && v.len() == order.len()
                && m.iter().zip(&v).zip(&order).all(|((a, b), n)| a.0 == *n && b.0 == *n);
            if !aligned {
                return Err(Error::Checkpoint("optimizer moments do not mirror the parameters".into()));
            }
            let state = OptimState {
                config,
                step: meta.optimizer_step,
                m: m.into_iter().map(|x| x.1).collect(),
                v: v.into_iter().map(|x| x.1).collect(),
            };
            if !state.matches(&params) {
                return Err(Error::Checkpoint("optimizer moment shapes differ from the parameters".into()));
            }
            Some(state)
        }
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Checkpoint("optimizer moments present without optimizer metadata".into())),
    };
    Ok(Checkpoint { meta, params, optim })
}

/// Writes through a temporary file and a rename so an interrupted write
/// never replaces a good checkpoint.
pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
