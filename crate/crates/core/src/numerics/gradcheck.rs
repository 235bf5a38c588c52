//! Central-difference gradient checker.
//!
//! Only forward values are used to build the numeric estimate, so the
//! checker stays independent of the reverse sweep it validates.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Magnitude floor of the relative-error denominator; keeps exactly-zero
/// gradients from dividing by zero.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input, flat index, analytic, numeric) of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, input: usize, idx: usize, analytic: f64, numeric: f64) {
        let rel = rel_err(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((input, idx, analytic, numeric));
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Which coordinates of each input get probed.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// Up to `n` coordinates per input, sampled with `seed`.
    Sample { n: usize, seed: u64 },
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` for every probed input coordinate.
pub fn check<F>(inputs: &[Tensor], h: f64, probe: Probe, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| tape.constant(t)).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match probe {
            Probe::All => (0..t.len()).collect(),
            Probe::Sample { n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
                let mut idx = sample(&mut rng, t.len(), n.min(t.len())).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for j in coords {
            let orig = t.values()[j];
            work[i].values_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].values_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].values_mut()[j] = orig;
            report.record(i, j, analytic[i][j], (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}
