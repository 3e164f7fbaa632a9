//! Named trainable tensors with deterministic initialization, checkpoint IO
//! and decoupled-weight-decay adaptive-moment updates.
//!
//! Checkpoint layout: magic `C4DS`, version u32, record count u64, then per
//! record `(u32 name length, name bytes, u32 rank, u32 dims..., f64 LE
//! payload)`. Optimizer moments and counters are stored as records under a
//! reserved `__opt` name prefix so the format stays self-describing.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C4DS";
const CHECKPOINT_VERSION: u32 = 1;
const OPT_PREFIX: &str = "__opt";

/// Named parameter tensors plus optimizer state. Iteration order is the
/// name order (BTreeMap), so training walks parameters deterministically.
pub struct ParamStore {
    seed: u64,
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            params: BTreeMap::new(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    /// Fetch a parameter, initializing it on first use. Weights draw from
    /// uniform(-a, a) with `a = sqrt(6 / (fan_in + fan_out))`; the stream is
    /// seeded from the store seed and the parameter name, so initialization
    /// does not depend on creation order.
    pub fn get_or_init(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        if name.starts_with(OPT_PREFIX) {
            return Err(Error::config(format!(
                "parameter name {name} uses a reserved prefix"
            )));
        }
        if let Some(t) = self.params.get(name) {
            if t.dims() != dims {
                return Err(Error::shape(format!(
                    "parameter {name}: stored {:?}, requested {:?}",
                    t.dims(),
                    dims
                )));
            }
            return Ok(t.clone());
        }
        let (fan_in, fan_out) = fans(dims);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-a..a)).collect();
        let t = Tensor::new(dims.to_vec(), data)?;
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Fetch a parameter initialized to zeros (biases).
    pub fn get_or_zeros(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        if let Some(t) = self.params.get(name) {
            if t.dims() != dims {
                return Err(Error::shape(format!(
                    "parameter {name}: stored {:?}, requested {:?}",
                    t.dims(),
                    dims
                )));
            }
            return Ok(t.clone());
        }
        let t = Tensor::zeros(dims.to_vec());
        self.params.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Sum of parameter value bits, for cheap change detection in tests.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut acc = 0u64;
        for (name, t) in &self.params {
            if name.starts_with(prefix) {
                for v in t.data() {
                    acc = acc.wrapping_mul(0x100000001b3).wrapping_add(v.to_bits());
                }
            }
        }
        acc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let n_records = self.params.len() + 2 * self.moments.len() + 1;
        buf.extend_from_slice(&(n_records as u64).to_le_bytes());
        let mut write_record = |name: &str, t: &Tensor| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
            for &d in t.dims() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in &self.params {
            write_record(name, t);
        }
        for (name, (m, v)) in &self.moments {
            write_record(&format!("{OPT_PREFIX}_m__{name}"), m);
            write_record(&format!("{OPT_PREFIX}_v__{name}"), v);
        }
        write_record(
            &format!("{OPT_PREFIX}_step__"),
            &Tensor::new(vec![1], vec![self.step as f64])?,
        );
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > buf.len() {
                return Err(Error::parse(*off, "checkpoint truncated".to_string()));
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad checkpoint magic".to_string()));
        }
        let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let n_records = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
        let mut store = ParamStore::new(seed);
        let mut m_pending: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut v_pending: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..n_records {
            let name_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
                .map_err(|_| Error::parse(off, "non-utf8 record name".to_string()))?;
            let rank = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::parse(off, format!("record {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = dims.iter().product();
            let raw = take(&mut off, numel * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data)?;
            if let Some(rest) = name.strip_prefix(&format!("{OPT_PREFIX}_m__")) {
                m_pending.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(&format!("{OPT_PREFIX}_v__")) {
                v_pending.insert(rest.to_string(), t);
            } else if name == format!("{OPT_PREFIX}_step__") {
                store.step = t.item()? as u64;
            } else {
                store.params.insert(name, t);
            }
        }
        for (name, m) in m_pending {
            let v = v_pending
                .remove(&name)
                .ok_or_else(|| Error::data(format!("moment v missing for {name}")))?;
            store.moments.insert(name, (m, v));
        }
        Ok(store)
    }
}

/// Fan-in/fan-out for the supported parameter shapes.
fn fans(dims: &[usize]) -> (usize, usize) {
    match dims {
        [n] => (*n, *n),
        [i, o] => (*i, *o),
        [k1, k2, ci, co] => (k1 * k2 * ci, k1 * k2 * co),
        other => {
            let n: usize = other.iter().product();
            (n, n)
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Decoupled-weight-decay adaptive-moment optimizer.
#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.003,
        }
    }
}

impl AdamW {
    /// Apply one update to every parameter with a gradient. Parameters absent
    /// from `grads` (frozen) keep their values and moments untouched.
    pub fn step(&self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        store.step += 1;
        let t = store.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let param = store
                .params
                .get(name)
                .ok_or_else(|| Error::data(format!("gradient for unknown parameter {name}")))?
                .clone();
            param.same_dims(grad)?;
            let (m_old, v_old) = store.moments.get(name).cloned().unwrap_or_else(|| {
                (
                    Tensor::zeros(param.dims().to_vec()),
                    Tensor::zeros(param.dims().to_vec()),
                )
            });
            let mut p = param.data().to_vec();
            let mut m = m_old.data().to_vec();
            let mut v = v_old.data().to_vec();
            for i in 0..p.len() {
                let g = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
            let dims = param.dims().to_vec();
            store
                .params
                .insert(name.clone(), Tensor::new(dims.clone(), p)?);
            store.moments.insert(
                name.clone(),
                (Tensor::new(dims.clone(), m)?, Tensor::new(dims, v)?),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_name_keyed() {
        let mut s1 = ParamStore::new(7);
        let mut s2 = ParamStore::new(7);
        let a1 = s1.get_or_init("layer.w", &[4, 4]).unwrap();
        // creation order must not matter
        let _ = s2.get_or_init("other.w", &[2, 2]).unwrap();
        let a2 = s2.get_or_init("layer.w", &[4, 4]).unwrap();
        assert_eq!(a1.data(), a2.data());
        let mut s3 = ParamStore::new(8);
        let a3 = s3.get_or_init("layer.w", &[4, 4]).unwrap();
        assert_ne!(a1.data(), a3.data());
    }

    #[test]
    fn init_bound_follows_fan_sum() {
        let mut s = ParamStore::new(1);
        let w = s.get_or_init("w", &[10, 30]).unwrap();
        let a = (6.0 / 40.0f64).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() < a));
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join(format!("cluseg_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let mut store = ParamStore::new(3);
        store.get_or_init("a.w", &[3, 5]).unwrap();
        store.get_or_zeros("a.b", &[5]).unwrap();
        // fabricate optimizer state by stepping once
        let mut grads = BTreeMap::new();
        grads.insert(
            "a.w".to_string(),
            Tensor::new(vec![3, 5], vec![0.1; 15]).unwrap(),
        );
        AdamW::default().step(&mut store, &grads).unwrap();
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path, 3).unwrap();
        assert_eq!(loaded.step_count(), 1);
        for name in ["a.w", "a.b"] {
            let x = store.get(name).unwrap();
            let y = loaded.get(name).unwrap();
            assert_eq!(x.dims(), y.dims());
            for (a, b) in x.data().iter().zip(y.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let (m1, v1) = store.moments.get("a.w").unwrap();
        let (m2, v2) = loaded.moments.get("a.w").unwrap();
        assert_eq!(m1.data(), m2.data());
        assert_eq!(v1.data(), v2.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoint_is_parse_error() {
        let dir = std::env::temp_dir().join(format!("cluseg_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            ParamStore::load(&path, 0),
            Err(Error::Parse { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut store = ParamStore::new(5);
        let before = store.get_or_init("w", &[2, 2]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(vec![2, 2]));
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data(), before.data());
    }

    #[test]
    fn lr_zero_is_identity_even_with_decay() {
        let mut store = ParamStore::new(5);
        let before = store.get_or_init("w", &[2, 2]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap(),
        );
        let opt = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store.get("w").unwrap().data(), before.data());
    }

    #[test]
    fn scalar_quadratic_converges() {
        // minimize (x - 3)^2 from x = 0
        let mut store = ParamStore::new(1);
        store.set("x", Tensor::scalar(0.0).unwrap());
        let opt = AdamW {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut steps = 0;
        for _ in 0..2000 {
            let x = store.get("x").unwrap().item().unwrap();
            let g = 2.0 * (x - 3.0);
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(g).unwrap());
            opt.step(&mut store, &grads).unwrap();
            steps += 1;
            if (store.get("x").unwrap().item().unwrap() - 3.0).abs() < 1e-6 {
                break;
            }
        }
        let x = store.get("x").unwrap().item().unwrap();
        assert!((x - 3.0).abs() < 1e-6, "x = {x} after {steps} steps");
    }

    #[test]
    fn frozen_params_keep_moments_untouched() {
        let mut store = ParamStore::new(2);
        store.get_or_init("a", &[2]).unwrap();
        store.get_or_init("b", &[2]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(
            "a".to_string(),
            Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(),
        );
        AdamW::default().step(&mut store, &grads).unwrap();
        assert!(store.moments.contains_key("a"));
        assert!(!store.moments.contains_key("b"));
    }
}
