use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{NnError, Tensor};

const CHECKPOINT_MAGIC: &[u8; 5] = b"SGNT1";

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

impl Slot {
    fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { grad: zeros.clone(), m: zeros.clone(), v: zeros, value }
    }
}

/// Named trainable parameters with gradient slots and Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter; its gradient and moments reset to zero.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.slots.insert(name.into(), Slot::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `grad` into the named gradient slot.
    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<(), NnError> {
        let slot = self.slots.get_mut(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        if slot.grad.shape() != grad.shape() {
            return Err(NnError::ShapeMismatch(format!("gradient for {name} has shape {:?}", grad.shape())));
        }
        slot.grad.add_assign(grad);
        Ok(())
    }

    /// One bias-corrected Adam update of every parameter from its gradient slot.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for slot in self.slots.values_mut() {
            let g = slot.grad.data();
            let m = slot.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = slot.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (slot.m.data(), slot.v.data());
            for ((p, mi), vi) in slot.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }

    /// Flat little-endian checkpoint of the parameter values, sorted by name.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, slot) in &self.slots {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(slot.value.rank() as u32).to_le_bytes());
            for &d in slot.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in slot.value.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |why: &str| NnError::MalformedCheckpoint(why.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing SGNT1 header"));
        }
        let mut cur = &bytes[5..];
        fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], NnError> {
            if cur.len() < n {
                return Err(NnError::MalformedCheckpoint("truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            *cur = tail;
            Ok(head)
        }
        fn take_u32(cur: &mut &[u8]) -> Result<usize, NnError> {
            Ok(u32::from_le_bytes(take(cur, 4)?.try_into().expect("4 bytes")) as usize)
        }
        let mut store = ParamStore::new();
        while !cur.is_empty() {
            let name_len = take_u32(&mut cur)?;
            let name = std::str::from_utf8(take(&mut cur, name_len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let rank = take_u32(&mut cur)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u32(&mut cur)?);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut cur, n.checked_mul(8).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
