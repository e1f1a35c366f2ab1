//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GRAPHMT\0" | u32 version
//! u32 len | config text (key = value, UTF-8)
//! u32 n_params, then per parameter:
//!     u32 len | name | u32 ndim | u64 dims… | f32 payload
//! u8 has_optimizer, then if 1:
//!     u64 step | per parameter: f64 m… | f64 v…
//! ```

use std::path::Path;

use crate::config::{model_config_from_text, model_config_to_text};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::training::OptimizerState;

pub const MAGIC: &[u8; 8] = b"GRAPHMT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: Vec<ParamRecord>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, optimizer: Option<&OptimizerState>) -> Self {
        Checkpoint {
            config: model_config_to_text(&model.config),
            params: model
                .store
                .iter()
                .map(|(_, name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|&x| x as f32).collect(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config);
        b.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut b, &p.name);
            b.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &p.data {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.extend_from_slice(&o.step.to_le_bytes());
                for buf in o.m.iter().zip(&o.v).flat_map(|(m, v)| [m, v]) {
                    for &x in buf {
                        b.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a graphmt checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.push(ParamRecord { name, shape, data });
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for p in &params {
                    let k = p.data.len();
                    m.push(r.f64s(k)?);
                    v.push(r.f64s(k)?);
                }
                Some(OptimizerState { step, m, v })
            }
            x => return Err(Error::Checkpoint(format!("bad optimizer flag {x}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
        })
    }

    /// Copies parameters into `store`, which must have exactly the same
    /// names and shapes in the same order.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.iter().enumerate() {
            let name = store.name(*id).to_string();
            let rec = self.params.get(k).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            if rec.name != name {
                return Err(Error::CheckpointMismatch {
                    name,
                    detail: format!("checkpoint has `{}` at this position", rec.name),
                });
            }
            let t = store.get_mut(*id);
            if rec.shape != t.shape() {
                return Err(Error::CheckpointMismatch {
                    name,
                    detail: format!("shape {:?} in checkpoint, {:?} in model", rec.shape, t.shape()),
                });
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&rec.data) {
                *dst = src as f64;
            }
        }
        if let Some(extra) = self.params.get(ids.len()) {
            return Err(Error::CheckpointMismatch {
                name: extra.name.clone(),
                detail: "not present in model".into(),
            });
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn into_model(self) -> Result<(Model, Option<OptimizerState>)> {
        let cfg = model_config_from_text(&self.config)?;
        let mut model = Model::new(cfg, 0)?;
        self.apply(&mut model.store)?;
        if let Some(o) = &self.optimizer {
            if !o.matches(&model.store) {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
        }
        Ok((model, self.optimizer))
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn save(path: &Path, model: &Model, optimizer: Option<&OptimizerState>) -> Result<()> {
    let bytes = Checkpoint::from_model(model, optimizer).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn load(path: &Path) -> Result<(Model, Option<OptimizerState>)> {
    read(path)?.into_model()
}
