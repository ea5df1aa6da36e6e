//! GCKP checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GCKP" | version u32 | count u32
//! manifest:  count x (group str | name str | rank u32 | dims u64.. | dtype u8)
//! payloads:  count x raw element bytes, manifest order
//! optimizer: present u8 | len u64 | blob     (slots keyed by parameter name)
//! metadata:  len u64 | UTF-8 JSON
//! ```
//!
//! Strings are `len u32` followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DualUNet, ModelConfig};
use crate::optim::Optimizer;
use crate::params::Group;
use crate::tensor::{DType, Element};

pub const GCKP_MAGIC: &[u8; 4] = b"GCKP";
pub const GCKP_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Initialized,
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub phase: Phase,
    pub frozen: Vec<Group>,
    /// Completed phases in order, with their epoch counts.
    pub history: Vec<(String, u64)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<E: Element> {
    pub model: DualUNet<E>,
    pub optimizer: Option<Optimizer>,
    pub phase: Phase,
    pub history: Vec<(String, u64)>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

struct ManifestEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

impl<E: Element> Checkpoint<E> {
    pub fn new(model: DualUNet<E>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            phase: Phase::Initialized,
            history: Vec::new(),
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.model.config.clone(),
            phase: self.phase,
            frozen: self.model.store.frozen_groups(),
            history: self.history.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = &self.model.store;
        let mut out = Vec::new();
        out.extend_from_slice(GCKP_MAGIC);
        out.extend_from_slice(&GCKP_VERSION.to_le_bytes());
        out.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for e in store.entries() {
            put_str(&mut out, e.group.name());
            put_str(&mut out, &e.name);
            out.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(E::DTYPE.code());
        }
        for e in store.entries() {
            for &x in e.value.data() {
                x.write_le(&mut out);
            }
        }
        match &self.optimizer {
            Some(opt) => {
                let blob = opt.to_bytes();
                out.push(1);
                out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
                out.extend_from_slice(&blob);
            }
            None => out.push(0),
        }
        let meta = serde_json::to_vec(&self.meta()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    /// Rebuilds the architecture from the stored config, then loads every
    /// tensor by name. Stored values of another float type are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(4)? != GCKP_MAGIC {
            return Err(Error::Checkpoint("missing GCKP magic".into()));
        }
        let version = rd.u32()?;
        if version != GCKP_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let count = rd.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let group = rd.str()?;
            let name = rd.str()?;
            let rank = rd.u32()? as usize;
            let shape = (0..rank)
                .map(|_| rd.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let code = rd.u8()?;
            let dtype = DType::from_code(code)
                .filter(|d| *d != DType::U8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has unsupported dtype code {code}")))?;
            manifest.push(ManifestEntry { group, name, shape, dtype });
        }
        let mut values = Vec::with_capacity(count);
        for m in &manifest {
            let n: usize = m.shape.iter().product();
            let raw = rd.take(n * m.dtype.size())?;
            let v: Vec<E> = match m.dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| E::from_f64_lossy(f32::read_le(c) as f64)).collect(),
                _ => raw.chunks_exact(8).map(|c| E::from_f64_lossy(f64::read_le(c))).collect(),
            };
            values.push(v);
        }
        let opt_blob = match rd.u8()? {
            0 => None,
            1 => {
                let n = rd.u64()? as usize;
                Some(rd.take(n)?)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer marker {other}"))),
        };
        let meta_len = rd.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(rd.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after metadata".into()));
        }

        let mut model = DualUNet::<E>::build(&meta.config)
            .map_err(|e| Error::Checkpoint(format!("stored config does not build: {e}")))?;
        if model.store.len() != manifest.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, architecture has {}",
                manifest.len(),
                model.store.len()
            )));
        }
        for (m, v) in manifest.iter().zip(values) {
            let id = model
                .store
                .find(&m.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", m.name)))?;
            let entry = model.store.entry(id);
            if entry.group.name() != m.group || entry.value.shape() != m.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` stored as {} {:?}, architecture expects {} {:?}",
                    m.name,
                    m.group,
                    m.shape,
                    entry.group,
                    entry.value.shape()
                )));
            }
            model.store.set_values(id, v)?;
        }
        model.store.set_frozen(meta.frozen.iter().copied());
        let optimizer = opt_blob.map(|b| Optimizer::restore(b, &model.store)).transpose()?;
        Ok(Checkpoint {
            model,
            optimizer,
            phase: meta.phase,
            history: meta.history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
