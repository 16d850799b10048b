//! Binary checkpoint: magic `NVLP`, format version, JSON metadata, then named
//! parameter stores and optimizer states, all little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"NVLP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub stores: Vec<(String, ParamStore)>,
    pub optimizers: Vec<(String, AdamW)>,
}

impl Checkpoint {
    pub fn store(&self, name: &str) -> Result<&ParamStore> {
        self.stores
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("no parameter set `{name}`")))
    }

    pub fn optimizer(&self, name: &str) -> Result<&AdamW> {
        self.optimizers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u64(&mut w, meta.len() as u64);
        w.extend_from_slice(&meta);
        put_u32(&mut w, self.stores.len() as u32);
        for (name, store) in &self.stores {
            put_str(&mut w, name);
            put_u32(&mut w, store.len() as u32);
            for p in store.iter() {
                put_str(&mut w, &p.name);
                w.push(p.frozen as u8);
                put_tensor(&mut w, &p.value);
            }
        }
        put_u32(&mut w, self.optimizers.len() as u32);
        for (name, opt) in &self.optimizers {
            put_str(&mut w, name);
            let c = &opt.cfg;
            for v in [c.beta1, c.beta2, c.eps, c.weight_decay] {
                put_f64(&mut w, v);
            }
            put_u64(&mut w, opt.step);
            put_u32(&mut w, opt.m.len() as u32);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_tensor(&mut w, m);
                put_tensor(&mut w, v);
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut stores = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let mut store = ParamStore::new();
            for _ in 0..r.u32()? {
                let pname = r.string()?;
                let frozen = r.take(1)?[0] != 0;
                let t = r.tensor()?;
                if store.id_of(&pname).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate parameter {pname}")));
                }
                store.add(pname, t, frozen);
            }
            stores.push((name, store));
        }
        let mut optimizers = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let cfg = AdamWConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                m.push(r.tensor()?);
                v.push(r.tensor()?);
            }
            optimizers.push((name, AdamW { cfg, step, m, v }));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            meta,
            stores,
            optimizers,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Restores optimizer moments, checking they fit `params`.
pub fn restore_optimizer(opt: &mut AdamW, saved: &AdamW, params: &ParamStore) -> Result<()> {
    if saved.m.len() != params.len()
        || saved.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.value.shape())
    {
        return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
    }
    *opt = saved.clone();
    Ok(())
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(w: &mut Vec<u8>, v: f64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_tensor(w: &mut Vec<u8>, t: &Tensor) {
    put_u32(w, t.shape().len() as u32);
    for &d in t.shape() {
        put_u64(w, d as u64);
    }
    for &v in t.data() {
        put_f64(w, v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(Error::Checkpoint("truncated tensor".into()));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
