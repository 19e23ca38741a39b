//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    "C2FVL\0"
//! u32      format version
//! u64      round counter
//! f64      best validation dice
//! str      config fingerprint        (str = u32 byte length + UTF-8)
//! str      model configuration text
//! u8       1 if optimizer state follows in blocks, else 0
//! u64      optimizer step count
//! u32      block count
//! blocks   str name, u32 ndim, ndim x u64 dims, prod(dims) x f64
//! ```
//!
//! Blocks are `param.<name>` for every model tensor in store order, then
//! `adam.m.<name>` and `adam.v.<name>` for each trainable tensor.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::model_from_text;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"C2FVL\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub best_val_dice: f64,
    pub fingerprint: String,
    /// Model configuration as `key = value` lines.
    pub meta: String,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn capture(
        store: &ParamStore,
        adam: Option<AdamState>,
        round: u64,
        best_val_dice: f64,
        meta: &str,
        fingerprint: &str,
    ) -> Self {
        Self {
            round,
            best_val_dice,
            fingerprint: fingerprint.to_string(),
            meta: meta.to_string(),
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
            adam,
        }
    }

    /// Copy the stored tensors into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("model has no tensor named {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = t.clone();
        }
        if let Some(adam) = &self.adam {
            let trainable = store.ids().filter(|id| store.kind(*id) == ParamKind::Trainable).count();
            if adam.m.len() != trainable || adam.v.len() != trainable {
                return Err(Error::Checkpoint("optimizer state does not cover the trainable tensors".into()));
            }
        }
        Ok(())
    }

    /// Rebuild the network described by `meta` and load the stored tensors.
    pub fn build_model(&self) -> Result<(Model, ParamStore)> {
        let cfg = model_from_text(&self.meta)?;
        let (model, mut store) = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore(&mut store)?;
        Ok((model, store))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.best_val_dice.to_le_bytes());
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &self.meta);
        out.push(u8::from(self.adam.is_some()));
        out.extend_from_slice(&self.adam.as_ref().map_or(0, |a| a.t).to_le_bytes());
        let mut blocks: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (format!("param.{n}"), t)).collect();
        if let Some(a) = &self.adam {
            blocks.extend(a.m.iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
            blocks.extend(a.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        }
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let round = r.u64()?;
        let best_val_dice = r.f64()?;
        let fingerprint = r.str()?;
        let meta = r.str()?;
        let has_adam = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad optimizer flag {b}"))),
        };
        let t = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("{name}: implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: block larger than the file")))?;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.f64()?);
            }
            let tensor = Tensor::from_vec(&shape, data);
            if let Some(p) = name.strip_prefix("param.") {
                params.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                m.push((p.to_string(), tensor));
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v.push((p.to_string(), tensor));
            } else {
                return Err(Error::Checkpoint(format!("unknown block {name}")));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        if !has_adam && (!m.is_empty() || !v.is_empty()) {
            return Err(Error::Checkpoint("optimizer blocks without optimizer flag".into()));
        }
        Ok(Self {
            round,
            best_val_dice,
            fingerprint,
            meta,
            params,
            adam: has_adam.then_some(AdamState { t, m, v }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
