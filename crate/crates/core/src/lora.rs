//! Low-rank adapters on the five memory projections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{truncated_normal, Bound, ParamStore, Tensor, Var, INIT_STD};
use crate::nn::Dropout;

/// Adapted weights: addressing `Wq`, `Wk` and writing `Wq_hat`, `Wk_hat`,
/// `Wv_hat`.
pub const TARGETS: [&str; 5] = [
    "memory.Wq",
    "memory.Wk",
    "memory.Wq_hat",
    "memory.Wk_hat",
    "memory.Wv_hat",
];

pub const PREFIX: &str = "lora.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            dropout: 0.0,
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub fn a_path(target: &str) -> String {
    format!("{PREFIX}{target}.A")
}

pub fn b_path(target: &str) -> String {
    format!("{PREFIX}{target}.B")
}

pub fn is_adapter(path: &str) -> bool {
    path.starts_with(PREFIX)
}

/// `y = x·W + scale·(drop(x)·B)·A`.
pub fn adapted_matmul<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    a: Var<'t>,
    scale: f64,
    dropout: f64,
    drop: &mut Dropout<'_>,
) -> Result<Var<'t>> {
    let base = x.matmul(w)?;
    let xd = drop.apply(x, dropout)?;
    base.add(xd.matmul(b)?.matmul(a)?.scale(scale))
}

/// Dense `scale·B·A`.
pub fn materialize(b: &Tensor, a: &Tensor, scale: f64) -> Result<Tensor> {
    if b.cols() != a.rows() {
        return Err(Error::Dimension {
            op: "lora materialize",
            lhs: b.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let mut v = crate::numerics::kernels::matmul(b.rows(), b.cols(), a.cols(), b.values(), a.values());
    v.iter_mut().for_each(|x| *x *= scale);
    Tensor::new(vec![b.rows(), a.cols()], v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterReport {
    pub adapter_params: usize,
    pub total_params: usize,
    pub percent: f64,
}

/// Adds zero-initialized adapters to the five memory projections and
/// freezes every other parameter.
pub fn attach(store: &mut ParamStore, cfg: &mut ModelConfig, lora: LoraConfig, seed: u64) -> Result<AdapterReport> {
    if cfg.lora.is_some() || store.iter().any(|(p, _)| is_adapter(p)) {
        return Err(Error::contract("adapters are already attached"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for target in TARGETS {
        let w = store.get(target)?;
        let (din, dout) = (w.rows(), w.cols());
        if lora.rank == 0 || 2 * lora.rank > din.min(dout) {
            return Err(Error::config(
                "lora.rank",
                format!("rank {} must be in 1..={} for {target}", lora.rank, din.min(dout) / 2),
            ));
        }
        if !(0.0..1.0).contains(&lora.dropout) {
            return Err(Error::config("lora.dropout", "must lie in [0, 1)"));
        }
        let a = truncated_normal(&mut rng, &[lora.rank, dout], INIT_STD);
        store.insert(b_path(target), Tensor::zeros(&[din, lora.rank]))?;
        store.insert(a_path(target), a)?;
    }
    store.set_trainable(is_adapter);
    cfg.lora = Some(lora);
    Ok(report(store))
}

pub fn report(store: &ParamStore) -> AdapterReport {
    let adapter_params = store.count(PREFIX);
    let total_params = store.count("");
    AdapterReport {
        adapter_params,
        total_params,
        percent: 100.0 * adapter_params as f64 / total_params.max(1) as f64,
    }
}

/// Adapter parameter count for square `d×d` projections.
pub fn adapter_count(d: usize, rank: usize) -> usize {
    TARGETS.len() * 2 * d * rank
}

/// Folds every adapter into its base weight and removes it.
pub fn merge(store: &mut ParamStore, cfg: &mut ModelConfig) -> Result<()> {
    let lora = cfg
        .lora
        .ok_or_else(|| Error::contract("no adapters attached"))?;
    for target in TARGETS {
        let b = store
            .remove(&b_path(target))
            .ok_or_else(|| Error::contract(format!("missing adapter {}", b_path(target))))?;
        let a = store
            .remove(&a_path(target))
            .ok_or_else(|| Error::contract(format!("missing adapter {}", a_path(target))))?;
        let delta = materialize(&b, &a, lora.scale())?;
        let w = store.get_mut(target)?;
        w.values_mut()
            .iter_mut()
            .zip(delta.values())
            .for_each(|(x, d)| *x += d);
    }
    store.set_trainable(|_| true);
    cfg.lora = None;
    Ok(())
}

/// Applies a memory projection, routed through its adapter when one is
/// attached.
pub struct Projector<'a, 't> {
    pub bound: &'a Bound<'t>,
    pub lora: Option<LoraConfig>,
}

impl<'t> Projector<'_, 't> {
    pub fn project(&self, x: Var<'t>, target: &str, drop: &mut Dropout<'_>) -> Result<Var<'t>> {
        let w = self.bound.get(target)?;
        match self.lora {
            Some(l) => adapted_matmul(
                x,
                w,
                self.bound.get(&b_path(target))?,
                self.bound.get(&a_path(target))?,
                l.scale(),
                l.dropout,
                drop,
            ),
            None => x.matmul(w),
        }
    }
}
