//! Named parameter storage, the Adam optimizer, and checkpoint IO.
//!
//! Parameters live in a `BTreeMap` keyed by dotted names such as
//! `ain.gru.wx_z`, so iteration order, checkpoint layout, and checksums are
//! all deterministic. Checkpoints are a flat binary container:
//!
//! ```text
//! magic "TJC1PARM" | u32 count | entries sorted by name
//! entry: u32 name_len | name bytes | u32 ndim | u32*ndim dims | f64*numel
//! ```
//!
//! All integers are little-endian; payloads are little-endian f64 bits.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorId};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TJC1PARM";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic (not a parameter checkpoint)")]
    BadMagic,
    #[error("corrupt checkpoint: {reason}")]
    Corrupt { reason: String },
    #[error("checkpoint parameters do not match the model: missing {missing:?}, unexpected {unexpected:?}")]
    NameMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("parameter {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("unknown parameter {0}")]
    UnknownName(String),
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U[-bound, +bound]`, seeded per parameter name.
    Uniform { bound: f64 },
}

/// FNV-1a 64-bit hash; used for checkpoint checksums in run logs and for
/// per-name seed derivation.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// All trainable tensors of a model, keyed by dotted name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Values are derived from `seed ^ fnv1a64(name)`,
    /// so initialization is independent of registration order.
    pub fn register(&mut self, name: &str, shape: Vec<usize>, init: Init, seed: u64) {
        assert!(
            !self.entries.contains_key(name),
            "parameter {name} registered twice"
        );
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform { bound } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        self.entries
            .insert(name.to_string(), Tensor::new(shape, data).unwrap());
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Insert every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.entries {
            let id = g.tensor(t.clone().with_grad());
            ids.insert(name.clone(), id);
        }
        BoundParams { ids }
    }

    /// Overwrite values from `src`; names and shapes must match exactly.
    pub fn assign_from(&mut self, src: &ParamStore) -> Result<(), ParamError> {
        let missing: Vec<String> = self
            .entries
            .keys()
            .filter(|k| !src.entries.contains_key(*k))
            .cloned()
            .collect();
        let unexpected: Vec<String> = src
            .entries
            .keys()
            .filter(|k| !self.entries.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(ParamError::NameMismatch {
                missing,
                unexpected,
            });
        }
        for (name, tensor) in &src.entries {
            let dst = self.entries.get_mut(name).unwrap();
            if dst.shape != tensor.shape {
                return Err(ParamError::ShapeMismatch {
                    name: name.clone(),
                    expected: dst.shape.clone(),
                    found: tensor.shape.clone(),
                });
            }
            dst.data.clone_from(&tensor.data);
        }
        Ok(())
    }

    /// All values concatenated in name order; inverse of
    /// [`ParamStore::set_flat_values`].
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all values from a flat vector in name order. Used by the
    /// gradient checker to probe parameters; returns elements consumed.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        off
    }

    // ---- checkpoint IO ----

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, ParamError> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut cur, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ParamError::BadMagic);
        }
        let count = read_u32(&mut cur, "entry count")? as usize;
        let mut entries = BTreeMap::new();
        let mut prev_name: Option<String> = None;
        for i in 0..count {
            let name_len = read_u32(&mut cur, "name length")? as usize;
            if name_len > 4096 {
                return Err(ParamError::Corrupt {
                    reason: format!("entry {i}: unreasonable name length {name_len}"),
                });
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact(&mut cur, &mut name_bytes, "name")?;
            let name = String::from_utf8(name_bytes).map_err(|_| ParamError::Corrupt {
                reason: format!("entry {i}: name is not utf-8"),
            })?;
            if let Some(prev) = &prev_name {
                if *prev >= name {
                    return Err(ParamError::Corrupt {
                        reason: format!("entries not sorted: {prev:?} then {name:?}"),
                    });
                }
            }
            let ndim = read_u32(&mut cur, "ndim")? as usize;
            if ndim > 8 {
                return Err(ParamError::Corrupt {
                    reason: format!("{name}: unreasonable rank {ndim}"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut cur, "dim")? as usize);
            }
            let numel: usize = shape.iter().product();
            if cur.len() < numel * 8 {
                return Err(ParamError::Corrupt {
                    reason: format!("{name}: truncated payload"),
                });
            }
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                read_exact(&mut cur, &mut b, "payload")?;
                data.push(f64::from_le_bytes(b));
            }
            prev_name = Some(name.clone());
            entries.insert(name, Tensor::new(shape, data).unwrap());
        }
        if !cur.is_empty() {
            return Err(ParamError::Corrupt {
                reason: format!("{} trailing bytes after last entry", cur.len()),
            });
        }
        Ok(ParamStore { entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::deserialize(&bytes)
    }

    /// FNV-1a 64 over the serialized container; logged alongside training
    /// steps so checkpoints can be tied to runs.
    pub fn checksum(&self) -> u64 {
        fnv1a64(&self.serialize())
    }
}

fn read_exact(cur: &mut &[u8], buf: &mut [u8], what: &str) -> Result<(), ParamError> {
    if cur.len() < buf.len() {
        return Err(ParamError::Corrupt {
            reason: format!("unexpected end of file reading {what}"),
        });
    }
    buf.copy_from_slice(&cur[..buf.len()]);
    *cur = &cur[buf.len()..];
    Ok(())
}

fn read_u32(cur: &mut &[u8], what: &str) -> Result<u32, ParamError> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Graph handles for one forward pass of every parameter in a store.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Handles in name order, matching [`ParamStore::flat_values`] layout.
    pub fn ids_sorted(&self) -> Vec<TensorId> {
        self.ids.values().copied().collect()
    }

    /// Collect gradients after `Graph::backward`. Parameters the loss never
    /// touched get zero gradients.
    pub fn grads(&self, g: &Graph) -> GradStore {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.ids {
            let grad = match g.grad(id) {
                Some(gr) => gr.to_vec(),
                None => vec![0.0; g.value(id).numel()],
            };
            out.insert(name.clone(), grad);
        }
        GradStore { entries: out }
    }
}

/// Gradient buffers keyed like the parameter store.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    entries: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(params: &ParamStore) -> Self {
        GradStore {
            entries: params
                .entries
                .iter()
                .map(|(k, t)| (k.clone(), vec![0.0; t.numel()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown gradient {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Elementwise accumulate (batch gradients are summed, not averaged).
    pub fn add_assign(&mut self, other: &GradStore) {
        for (name, src) in &other.entries {
            let dst = self
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient stores disagree on {name}"));
            assert_eq!(dst.len(), src.len(), "gradient size mismatch for {name}");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn l2_norm(&self, name: &str) -> f64 {
        self.get(name).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Dotted-prefix group with the largest gradient norm; used in NaN
    /// abort diagnostics. Group is the name up to the last dot.
    pub fn largest_group(&self) -> Option<(String, f64)> {
        let mut groups: BTreeMap<String, f64> = BTreeMap::new();
        for (name, g) in &self.entries {
            let group = match name.rfind('.') {
                Some(i) => name[..i].to_string(),
                None => name.clone(),
            };
            *groups.entry(group).or_insert(0.0) += g.iter().map(|v| v * v).sum::<f64>();
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, v.sqrt()))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
    }

    pub fn has_non_finite(&self) -> bool {
        self.entries
            .values()
            .any(|g| g.iter().any(|v| !v.is_finite()))
    }
}

/// Adam with bias correction; state tensors are keyed like the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in params.entries.iter_mut() {
            let g = grads.get(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                tensor.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
