//! Named parameter sets and the `DGT1` checkpoint format.
//!
//! A checkpoint is the magic `DGT1` followed by one record per parameter:
//! `u16` name length, UTF-8 name, `u8` rank, rank x `u64` dims, then the values
//! as little-endian `f64`. All integers are little-endian. Records run to EOF.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{InitSpec, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGT1";

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An ordered, uniquely named set of parameters.
///
/// Every store carries a process-unique id so a graph holding leaves from several
/// stores (generator and discriminators in one loss) can route gradients back.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Param>,
    names: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            names: self.names.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            names: HashMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter. Panics on a duplicate name: parameter layouts are
    /// built by code, so a collision is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains_key(&name), "duplicate parameter name {name}");
        let id = self.params.len();
        self.names.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(id)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: InitSpec, rng: &mut Rng) -> ParamId {
        let value = Tensor::create(shape, init, rng).expect("valid init spec");
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Euclidean distance between the values of two stores with the same layout.
    pub fn distance(&self, other: &ParamStore) -> f64 {
        assert_eq!(self.params.len(), other.params.len());
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()).map(|(x, y)| (x - y) * (x - y)))
            .sum::<f64>()
            .sqrt()
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("parameter name too long: {}", p.name)))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            let rank = u8::try_from(p.value.ndim())
                .map_err(|_| Error::Invalid(format!("rank too large for {}", p.name)))?;
            w.write_all(&[rank])?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads every record of a checkpoint into a new store, in file order.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("checkpoint magic is not DGT1".into()));
        }
        let mut cur = Cursor { bytes: &bytes, pos: 4 };
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let len = u16::from_le_bytes(cur.take::<2>()?) as usize;
            let name = std::str::from_utf8(cur.slice(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.take::<1>()?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(cur.take::<8>()?) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = cur.slice(n.checked_mul(8).ok_or_else(|| Error::Format("dims overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if store.names.contains_key(&name) {
                return Err(Error::Format(format!("duplicate parameter {name} in checkpoint")));
            }
            store.add(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    /// Overwrites values by name from `src`. Every parameter of `self` must be
    /// present in `src` with an identical shape.
    pub fn load_from(&mut self, src: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = src
                .id(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            let v = src.value(id);
            if v.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.slice(N)?.try_into().unwrap())
    }
}
