//! Named parameters, Adam state, and the PNWT weight file.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PNWT_MAGIC: &str = "PNWT1";

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// First-moment accumulator.
    pub m: Tensor,
    /// Second-moment accumulator.
    pub v: Tensor,
    /// Running statistics are stored here with `trainable = false`.
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor, trainable: bool) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            m: z.clone(),
            v: z,
            value,
            trainable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradients keyed by parameter name, as produced by a backward pass.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    /// Adam steps taken so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.params
            .insert(name.to_string(), Param::new(value, trainable));
        Ok(())
    }

    /// Inserts a `[fan_in, fan_out]` weight with He-normal initialization.
    pub fn insert_weight<R: Rng>(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<()> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::matrix(fan_in, fan_out, data)?, true)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape mismatch for `{name}`"
                )));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    /// Overwrites values (used for batch-norm running statistics).
    pub fn apply_updates(&mut self, updates: Vec<(String, Tensor)>) -> Result<()> {
        for (name, t) in updates {
            let p = self
                .params
                .get_mut(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
            p.value = t;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// One Adam step with bias correction over all trainable parameters;
    /// gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for (name, p) in &self.params {
            if p.trainable && !p.grad.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut().filter(|p| p.trainable) {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.zero_grad();
        Ok(())
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            step: self.step,
        }
    }

    /// Union of two stores; names must be disjoint. The step counter of
    /// `self` is kept.
    pub fn merged(&self, other: &ParamStore) -> Result<ParamStore> {
        let mut out = self.clone();
        for (k, v) in &other.params {
            if out.params.insert(k.clone(), v.clone()).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{k}` in both stores"
                )));
            }
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and values of parameters with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (k, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(k.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    kind: String,
    step: u64,
    slots: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    optimizer: OptimizerMeta,
}

pub fn save_weights(store: &ParamStore) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (name, p) in &store.params {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            count: p.value.len(),
            trainable: p.trainable,
        });
        offset += p.value.len();
    }
    let manifest = Manifest {
        params: entries,
        optimizer: OptimizerMeta {
            kind: "adam".into(),
            step: store.step,
            slots: vec!["m".into(), "v".into()],
        },
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 24);
    out.extend_from_slice(PNWT_MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.params.values() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in store.params.values() {
        for slot in [&p.m, &p.v] {
            for v in slot.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect()
}

pub fn load_weights(bytes: &[u8]) -> Result<ParamStore> {
    let magic = format!("{PNWT_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::Format("bad PNWT magic".into()));
    }
    let mut pos = magic.len();
    let len_bytes = bytes
        .get(pos..pos + 8)
        .ok_or_else(|| Error::Format("truncated manifest length".into()))?;
    let mlen = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
    pos += 8;
    let json = bytes
        .get(pos..pos.saturating_add(mlen))
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    pos += mlen;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;

    let total: usize = manifest.params.iter().map(|e| e.count).sum();
    let blob = &bytes[pos..];
    if blob.len() != total * 8 * 3 {
        return Err(Error::Format(format!(
            "blob length {} does not match manifest ({} values with two optimizer slots)",
            blob.len(),
            total
        )));
    }
    let values = read_f64s(&blob[..total * 8]);
    let slots = read_f64s(&blob[total * 8..]);
    let mut store = ParamStore {
        params: BTreeMap::new(),
        step: manifest.optimizer.step,
    };
    let mut slot_pos = 0;
    for e in &manifest.params {
        if e.shape.iter().product::<usize>() != e.count || e.offset + e.count > total {
            return Err(Error::Format(format!(
                "inconsistent entry for `{}`",
                e.name
            )));
        }
        let value = Tensor::new(
            e.shape.clone(),
            values[e.offset..e.offset + e.count].to_vec(),
        )?;
        let m = Tensor::new(
            e.shape.clone(),
            slots[slot_pos..slot_pos + e.count].to_vec(),
        )?;
        slot_pos += e.count;
        let v = Tensor::new(
            e.shape.clone(),
            slots[slot_pos..slot_pos + e.count].to_vec(),
        )?;
        slot_pos += e.count;
        let mut p = Param::new(value, e.trainable);
        p.m = m;
        p.v = v;
        if store.params.insert(e.name.clone(), p).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{}`", e.name)));
        }
    }
    Ok(store)
}
