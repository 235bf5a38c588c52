use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Standard deviation of the truncated-normal initialiser.
pub const INIT_STD: f64 = 0.02;

/// Samples N(0, std²) truncated to ±2·std by rejection.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values = Vec::with_capacity(n);
    while values.len() < n {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            values.push(z * std);
        }
    }
    Tensor::new(shape.to_vec(), values).expect("shape matches sample count")
}

/// Named parameters, iterated in lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::contract(format!("duplicate parameter path `{path}`")));
        }
        self.params.insert(path, t);
        Ok(())
    }

    pub fn init_normal(&mut self, path: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<()> {
        self.insert(path, truncated_normal(rng, shape, INIT_STD).with_grad())
    }

    pub fn init_zeros(&mut self, path: &str, shape: &[usize]) -> Result<()> {
        self.insert(path, Tensor::zeros(shape).with_grad())
    }

    pub fn init_ones(&mut self, path: &str, shape: &[usize]) -> Result<()> {
        self.insert(path, Tensor::full(shape, 1.0).with_grad())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{path}`")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.params.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to a path prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::len)
            .sum()
    }

    /// Marks exactly the parameters accepted by `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (p, t) in self.params.iter_mut() {
            t.requires_grad = pred(p);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(p, t)| (p.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Adds the gradients of bound parameters into their `grad` buffers.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (path, var) in &bound.vars {
            if let Some(g) = grads.get(*var) {
                self.get_mut(path)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over path names, shapes and little-endian values of the
    /// parameters accepted by `pred`.
    pub fn digest(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (p, t) in self.params.iter().filter(|(p, _)| pred(p)) {
            h.update(p.as_bytes());
            for s in t.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (p, t) in &self.params {
            m.insert(p.clone(), encode_tensor(t));
        }
        Value::Object(m)
    }

    /// Parses a parameter map; every tensor comes back trainable.
    pub fn from_json(v: &Value, rng_seed: u64) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Format("parameters must be a JSON object".into()))?;
        let mut store = ParamStore::new(rng_seed);
        for (p, tv) in obj {
            store.insert(p.clone(), decode_tensor(tv)?.with_grad())?;
        }
        Ok(store)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_tensor(t: &Tensor) -> Value {
    json!({ "shape": t.shape(), "data": B64.encode(t.to_le_bytes()) })
}

pub fn decode_tensor(v: &Value) -> Result<Tensor> {
    let shape: Vec<usize> = serde_json::from_value(
        v.get("shape")
            .cloned()
            .ok_or_else(|| Error::Format("tensor missing `shape`".into()))?,
    )?;
    let data = v
        .get("data")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Format("tensor missing `data`".into()))?;
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Format(format!("bad base64 tensor buffer: {e}")))?;
    Tensor::from_le_bytes(shape, &bytes)
}

/// Parameters recorded on one tape, addressed by path.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Binds already-recorded variables, e.g. the inputs of a gradient check.
    pub fn from_vars<S: Into<String>>(vars: impl IntoIterator<Item = (S, Var<'t>)>) -> Self {
        Bound {
            vars: vars.into_iter().map(|(p, v)| (p.into(), v)).collect(),
        }
    }

    pub fn get(&self, path: &str) -> Result<Var<'t>> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{path}` not bound")))
    }

    pub fn try_get(&self, path: &str) -> Option<Var<'t>> {
        self.vars.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }
}
