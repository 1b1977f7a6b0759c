use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{Shape4, Tensor4D};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SALSEGCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Uniform on `±sqrt(6 / fan_in)`.
    FanInUniform { fan_in: usize },
    /// Uniform on `±bound`.
    Uniform { bound: f64 },
}

/// Named, ordered parameter set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor4D>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor4D) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.names.push(name.clone());
        self.tensors.push(tensor);
        self.index.insert(name, self.names.len() - 1);
        Ok(self.names.len() - 1)
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: Shape4, init: Init, rng: &mut R) -> Result<usize> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Constant(v) => vec![v; numel],
            Init::FanInUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform { bound } => (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect(),
        };
        self.insert(name, Tensor4D::from_vec(shape, data)?)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn tensor(&self, idx: usize) -> &Tensor4D {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor4D {
        &mut self.tensors[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4D> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor4D> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor4D)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor4D::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated header".into()))? != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint (bad magic)".into()));
        }
        let version = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32().ok_or_else(|| bad("truncated header".into()))?;
        let mut store = ParamStore::new();
        for rec in 0..count {
            let trunc = || bad(format!("truncated record {rec}"));
            let len = cur.u32().ok_or_else(trunc)? as usize;
            let name = std::str::from_utf8(cur.take(len).ok_or_else(trunc)?)
                .map_err(|_| bad(format!("record {rec}: name is not UTF-8")))?
                .to_string();
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = cur.u32().ok_or_else(trunc)? as usize;
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * 8).ok_or_else(trunc)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store
                .insert(name, Tensor4D::from_vec(shape, data)?)
                .map_err(|e| bad(e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after last record".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, idx: usize, g: &[f64]) {
        match &mut self.slots[idx] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Zero gradient for parameters that legitimately received none this
    /// step (e.g. a branch that was not evaluated).
    pub fn fill_missing(&mut self, store: &ParamStore) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(vec![0.0; store.tensor(i).numel()]);
            }
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[f64]> {
        self.slots.get(idx).and_then(|s| s.as_deref())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().flatten().all(|v| v.is_finite())
    }
}
