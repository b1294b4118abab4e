//! `LVMT` checkpoint files.
//!
//! Layout: magic `LVMT`, version `u32`, then records until end of file. Each
//! record is `name_len: u32`, UTF-8 name, `rank: u32`, `rank` dims as `u32`,
//! then the values as little-endian `f64`. All integers are little-endian.

use std::path::Path;

use super::optim::{Adam, AdamState};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::io::Reader;

pub const MAGIC: &[u8; 4] = b"LVMT";
pub const VERSION: u32 = 1;

/// Ordered named tensors, as stored on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.records.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(Tensor::item)
    }

    pub fn push_params(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, t) in store.iter() {
            let mut t = t.clone();
            t.requires_grad = false;
            t.grad = None;
            self.push(format!("{prefix}{name}"), t);
        }
    }

    /// Every record under `prefix`, with the prefix stripped, as a store.
    pub fn params(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in &self.records {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.add(rest, t.clone())?;
            }
        }
        Ok(store)
    }

    pub fn push_adam(&mut self, prefix: &str, store: &ParamStore, adam: &Adam) {
        for ((_, name, _), st) in store.iter().zip(adam.states()) {
            let shape = st.shape.clone();
            self.push(format!("{prefix}m/{name}"), Tensor::new(shape.clone(), st.m.clone()).expect("shape"));
            self.push(format!("{prefix}v/{name}"), Tensor::new(shape, st.v.clone()).expect("shape"));
            self.push(format!("{prefix}t/{name}"), Tensor::scalar(st.t as f64));
        }
    }

    /// Restores optimizer moments saved with [`push_adam`](Self::push_adam).
    pub fn load_adam(&self, prefix: &str, store: &ParamStore, adam: &mut Adam) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (name, st) in names.iter().zip(adam.states_mut()) {
            let missing = || Error::format(format!("checkpoint lacks optimizer state for {name:?}"));
            let m = self.get(&format!("{prefix}m/{name}")).ok_or_else(missing)?;
            let v = self.get(&format!("{prefix}v/{name}")).ok_or_else(missing)?;
            let t = self.scalar(&format!("{prefix}t/{name}")).ok_or_else(missing)?;
            if m.shape() != st.shape.as_slice() || v.shape() != st.shape.as_slice() {
                return Err(Error::shape(format!("optimizer state shape mismatch for {name:?}")));
            }
            *st = AdamState { m: m.data().to_vec(), v: v.data().to_vec(), t: t as u64, ..st.clone() };
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported LVMT version {version}")));
        }
        let mut ckpt = Checkpoint::new();
        while !r.is_empty() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(len)?.to_vec())
                .map_err(|_| Error::format("record name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            ckpt.push(name, Tensor::new(shape, data)?);
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
