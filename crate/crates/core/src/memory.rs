//! Content-addressable working memory.
//!
//! `N` slots of width `d`. Each token of the encoded sequence addresses the
//! slots through a softmax over `(E·Wk)(M·Wq)ᵀ/√d`, writes into them with an
//! erase/add update gated by a second softmax `β`, and reads back through
//! the same address weights.
//!
//! All functions accept `blocks` independent memories stacked by rows so a
//! batch runs in one pass: memories are `(blocks·N)×d`, token rows
//! `(blocks·L)×d`, weights `(blocks·L)×N`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Projector;
use crate::nn::Dropout;
use crate::numerics::{truncated_normal, Tensor, Var, INIT_STD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub slots: usize,
    /// Address/write/read passes over the same encoded sequence.
    pub rounds: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig { slots: 64, rounds: 1 }
    }
}

pub fn init_memory(n: usize, d: usize, seed: u64) -> Result<Tensor> {
    if n == 0 || d == 0 {
        return Err(Error::contract(format!("memory must be at least 1x1, got {n}x{d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(truncated_normal(&mut rng, &[n, d], INIT_STD).with_grad())
}

/// Row-wise softmax over slots of `keys·queriesᵀ/√d`, where `keys` are the
/// projected tokens and `queries` the projected memory rows.
pub fn address_projected<'t>(keys: Var<'t>, queries: Var<'t>, blocks: usize) -> Result<Var<'t>> {
    let scale = 1.0 / (keys.cols() as f64).sqrt();
    keys.block_matmul_nt(queries, blocks)?.scale(scale).softmax_rows()
}

/// `softmax((E·Wk)(M·Wq)ᵀ/√d)`, shape `(blocks·L)×N`.
pub fn address<'t>(m: Var<'t>, e: Var<'t>, wq: Var<'t>, wk: Var<'t>, blocks: usize) -> Result<Var<'t>> {
    address_projected(e.matmul(wk)?, m.matmul(wq)?, blocks)
}

/// Output of the sequential update: per-token reads and the final memory.
pub struct Written<'t> {
    /// Row `j` is `w_j · M_j`, the read after token `j` has been written.
    pub reads: Var<'t>,
    pub memory: Var<'t>,
}

/// Applies the erase/add update token by token:
/// `M ← diag(1 − w_j⊙(1−β_j))·M + (w_j⊙β_j) ⊗ v_j`.
pub fn write<'t>(m: Var<'t>, w: Var<'t>, beta: Var<'t>, v: Var<'t>, blocks: usize) -> Result<Written<'t>> {
    let l_rows = w.rows();
    let scan = m.memory_scan(w, beta, v, blocks)?;
    Ok(Written {
        reads: scan.slice_rows(0, l_rows)?,
        memory: scan.slice_rows(l_rows, m.rows())?,
    })
}

/// `w · M` for a single memory.
pub fn read<'t>(m: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    w.matmul(m)
}

pub struct MemoryOut<'t> {
    pub e_out: Var<'t>,
    pub memory: Var<'t>,
    /// Address weights of the last round.
    pub w: Var<'t>,
    pub beta: Var<'t>,
}

/// Address, write and read `e_seq` against `m_init`, `rounds` times.
pub fn memory_forward<'t>(
    proj: &Projector<'_, 't>,
    m_init: Var<'t>,
    e_seq: Var<'t>,
    blocks: usize,
    rounds: usize,
    drop: &mut Dropout<'_>,
) -> Result<MemoryOut<'t>> {
    if rounds == 0 {
        return Err(Error::contract("memory rounds must be at least 1"));
    }
    let keys = proj.project(e_seq, "memory.Wk", drop)?;
    let keys_hat = proj.project(e_seq, "memory.Wk_hat", drop)?;
    let values = proj.project(e_seq, "memory.Wv_hat", drop)?;
    let mut m = m_init;
    let mut out = None;
    for _ in 0..rounds {
        let w = address_projected(keys, proj.project(m, "memory.Wq", drop)?, blocks)?;
        let beta = address_projected(keys_hat, proj.project(m, "memory.Wq_hat", drop)?, blocks)?;
        let written = write(m, w, beta, values, blocks)?;
        m = written.memory;
        out = Some(MemoryOut {
            e_out: written.reads,
            memory: written.memory,
            w,
            beta,
        });
    }
    Ok(out.expect("rounds >= 1"))
}
