//! Complex tensors, named parameter storage and reverse-mode differentiation.
//!
//! Gradients follow the conjugate-cogradient convention: after
//! [`Tape::backward`] a parameter `w` holds `dL/dw*`, so `w - mu * grad` is a
//! descent step on the real loss `L`.

mod adam;
mod check;
mod kernels;
pub(crate) mod tape;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use adam::{adam_step, AdamState};
pub use check::finite_diff_check;
pub use kernels::ConvGeom;
pub use tape::{Gradients, Tape, Var};

use crate::error::shape_err;
use crate::{Error, Result, C64};

/// Dense row-major complex tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CTensor {
    shape: Vec<usize>,
    data: Vec<C64>,
    grad: Option<Vec<C64>>,
    requires_grad: bool,
}

impl CTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("CTensor::new", n, data.len()));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![C64::new(0.0, 0.0); n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_real(shape: Vec<usize>, re: &[f64]) -> Result<Self> {
        Self::new(shape, re.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn scalar(v: C64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[C64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[C64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err("accumulate_grad", self.data.len(), g.len()));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// Role of a stored tensor. Only trainable entries count as free parameters
/// and receive optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: CTensor,
}

/// Ordered collection of named tensors with stable hierarchical names
/// (`"compandor.fc1.weight"`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, tensor: CTensor) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(Error::InvalidArgument(alloc::format!("duplicate parameter {name}")));
        }
        let tensor = tensor.with_requires_grad(kind == ParamKind::Trainable);
        self.entries.push(ParamEntry { name, kind, tensor });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &CTensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut CTensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    /// Real degrees of freedom of the trainable entries (two per complex value).
    pub fn real_param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| 2 * e.tensor.len())
            .sum()
    }

    /// Writes tape gradients into the parameters' gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.iter() {
            self.entries[id.0].tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Overwrites buffers (running statistics) recorded during a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<C64>)>) -> Result<()> {
        for (id, data) in updates {
            let t = &mut self.entries[id.0].tensor;
            if t.data.len() != data.len() {
                return Err(shape_err("apply_buffer_updates", t.data.len(), data.len()));
            }
            t.data = data;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }

    /// Deterministic fingerprint of names, shapes and values (FNV-1a over
    /// the raw bit patterns). Used to compare checkpoints across runs.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            for d in &e.tensor.shape {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &e.tensor.data {
                eat(&v.re.to_bits().to_le_bytes());
                eat(&v.im.to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(CTensor::new(vec![2, 3], vec![C64::new(0.0, 0.0); 5]).is_err());
        assert_eq!(CTensor::zeros(vec![2, 3]).len(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", ParamKind::Trainable, CTensor::zeros(vec![1])).unwrap();
        assert!(s.insert("a", ParamKind::Buffer, CTensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn counts_only_trainable() {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Trainable, CTensor::zeros(vec![2, 3])).unwrap();
        s.insert("b", ParamKind::Trainable, CTensor::zeros(vec![2])).unwrap();
        s.insert("stats", ParamKind::Buffer, CTensor::zeros(vec![7])).unwrap();
        assert_eq!(s.real_param_count(), 16);
        assert_eq!(ParamStore::new().real_param_count(), 0);
    }
}
