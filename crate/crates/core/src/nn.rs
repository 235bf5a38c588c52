//! Small layer helpers shared by the backbone, memory and heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Bound, Var};

/// Inverted dropout. Inactive unless constructed with an rng.
pub struct Dropout<'a> {
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rng: None }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply<'t>(&mut self, x: Var<'t>, p: f64) -> Result<Var<'t>> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.rows() * x.cols())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = x.tape().constant_matrix(x.rows(), x.cols(), mask)?;
        x.mul(m)
    }
}

/// `x·W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn linear<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(p.get(&format!("{prefix}.w"))?)?
        .add_row(p.get(&format!("{prefix}.b"))?)
}

pub fn layer_norm<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.layer_norm(p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?, eps)
}
