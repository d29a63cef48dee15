//! Named parameter storage and the binary weight-snapshot format.
//!
//! Snapshot layout (all integers u32 little-endian, values f32 little-endian):
//! `b"ASASNAPS"`, version, tensor count, then per tensor: name length, UTF-8
//! name, rank, dims, row-major values.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ASASNAPS";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Default)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<S>>>,
}

/// Parameters of a [`ParamStore`] bound as leaves on one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph<S>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.param(Arc::clone(v))).collect(),
        }
    }

    /// Binds every parameter as a constant, for inference.
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|v| g.frozen(Arc::clone(v)))
                .collect(),
        }
    }

    /// Collects per-parameter gradients in store order; unused parameters get
    /// zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<S>) -> Vec<Tensor<S>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    /// Rounds every value to 32-bit precision, matching what a snapshot
    /// round trip stores.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            for x in Arc::make_mut(v).data_mut() {
                *x = S::of(x.to_f64_lossy() as f32 as f64);
            }
        }
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        put_u32(w, SNAPSHOT_VERSION)?;
        put_u32(w, self.values.len() as u32)?;
        for (name, t) in self.names.iter().zip(&self.values) {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                put_u32(w, d as u32)?;
            }
            put_f32s(w, t.data())?;
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(Error::Parse("not a weight snapshot".into()));
        }
        let version = get_u32(r)?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported snapshot version {version}"
            )));
        }
        let count = get_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = get_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
            let rank = get_u32(r)? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| get_u32(r).map(|d| d as usize))
                .collect::<Result<_>>()?;
            let n = shape.iter().product();
            let data = get_f32s(r, n)?;
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Copies values from `other` into same-named, same-shaped parameters.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| Error::Parse(format!("snapshot lacks parameter {name}")))?;
            let src = other.get(id);
            if src.shape() != v.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: {:?} vs {:?}", src.shape(), v.shape()),
                ));
            }
            *v = Arc::new(src.clone());
        }
        Ok(())
    }
}

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn put_f32s<W: Write, S: Scalar>(w: &mut W, vals: &[S]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for &v in vals {
        buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn get_f32s<R: Read, S: Scalar>(r: &mut R, n: usize) -> Result<Vec<S>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}
