//! The full model: embed → encode → working memory → heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, HeadOutputs};
use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig, Projector};
use crate::memory::{self, MemoryConfig};
use crate::nn::Dropout;
use crate::numerics::{Bound, ParamStore, Tensor, Var};
use crate::trajectory::Segment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub memory: MemoryConfig,
    /// Heads see `e_seq + E_out` instead of `E_out` alone.
    pub heads_skip: bool,
    /// Set once adapters are attached.
    pub lora: Option<LoraConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.memory.slots == 0 {
            return Err(Error::config("memory.slots", "must be at least 1"));
        }
        if self.memory.rounds == 0 {
            return Err(Error::config("memory.rounds", "must be at least 1"));
        }
        Ok(())
    }

    /// Fresh parameters: truncated normal weights, zero biases, unit
    /// layer-norm gains.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let c = &self.backbone;
        let d = c.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new(seed);
        let linear = |s: &mut ParamStore, rng: &mut ChaCha8Rng, path: &str, din: usize, dout: usize| {
            s.init_normal(&format!("{path}.w"), &[din, dout], rng)?;
            s.init_zeros(&format!("{path}.b"), &[1, dout])
        };
        linear(&mut s, &mut rng, "embed.rtg", 1, d)?;
        linear(&mut s, &mut rng, "embed.state", c.state_dim, d)?;
        s.init_normal("embed.action", &[c.action_vocab, d], &mut rng)?;
        s.init_normal("embed.pos", &[c.max_timestep, d], &mut rng)?;
        for i in 0..c.layers {
            s.init_ones(&format!("blocks.{i}.ln.g"), &[1, d])?;
            s.init_zeros(&format!("blocks.{i}.ln.b"), &[1, d])?;
            for proj in ["q", "k", "v", "out"] {
                linear(&mut s, &mut rng, &format!("blocks.{i}.attn.{proj}"), d, d)?;
            }
        }
        s.init_ones("ln_f.g", &[1, d])?;
        s.init_zeros("ln_f.b", &[1, d])?;
        s.insert(
            "memory.M0",
            memory::init_memory(self.memory.slots, d, seed.wrapping_add(0x4d30))?,
        )?;
        for w in lora::TARGETS {
            s.init_normal(w, &[d, d], &mut rng)?;
        }
        for (head, out) in [("action", c.action_vocab), ("reward", 1), ("rtg", 1)] {
            linear(&mut s, &mut rng, &format!("heads.{head}.fc1"), d, d)?;
            linear(&mut s, &mut rng, &format!("heads.{head}.fc2"), d, out)?;
        }
        Ok(s)
    }
}

impl ModelConfig {
    /// Parameter counts implied by the config, without allocating.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let c = &self.backbone;
        let d = c.d_model;
        let linear = |din: usize, dout: usize| din * dout + dout;
        let backbone = linear(1, d)
            + linear(c.state_dim, d)
            + c.action_vocab * d
            + c.max_timestep * d
            + c.layers * (2 * d + 4 * linear(d, d))
            + 2 * d;
        let memory = self.memory.slots * d + lora::TARGETS.len() * d * d;
        let heads = [c.action_vocab, 1, 1].iter().map(|&o| linear(d, d) + linear(d, o)).sum();
        let adapters = self.lora.map_or(0, |l| lora::adapter_count(d, l.rank));
        ParamBreakdown {
            backbone,
            memory,
            heads,
            adapters,
        }
    }
}

/// Parameter counts per module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub backbone: usize,
    pub memory: usize,
    pub heads: usize,
    pub adapters: usize,
}

impl ParamBreakdown {
    pub fn of(store: &ParamStore) -> Self {
        ParamBreakdown {
            backbone: store.count("embed.") + store.count("blocks.") + store.count("ln_f."),
            memory: store.count("memory."),
            heads: store.count("heads."),
            adapters: store.count(lora::PREFIX),
        }
    }

    pub fn total(&self) -> usize {
        self.backbone + self.memory + self.heads + self.adapters
    }

    pub fn rows(&self) -> [(&'static str, usize); 4] {
        [
            ("backbone", self.backbone),
            ("memory", self.memory),
            ("heads", self.heads),
            ("adapters", self.adapters),
        ]
    }
}

/// `size` segments of `k` timesteps, flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    pub state_dim: usize,
    pub rtg: Vec<f64>,
    pub states: Vec<f64>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<usize>,
    /// `true` marks padding.
    pub pad: Vec<bool>,
}

impl Batch {
    pub fn from_segments(segs: &[&Segment]) -> Result<Self> {
        let first = segs.first().ok_or_else(|| Error::contract("empty batch"))?;
        let k = first.len();
        let state_dim = first.states.first().map_or(0, Vec::len);
        let mut b = Batch {
            size: segs.len(),
            k,
            state_dim,
            rtg: Vec::with_capacity(segs.len() * k),
            states: Vec::with_capacity(segs.len() * k * state_dim),
            actions: Vec::with_capacity(segs.len() * k),
            rewards: Vec::with_capacity(segs.len() * k),
            timesteps: Vec::with_capacity(segs.len() * k),
            pad: Vec::with_capacity(segs.len() * k),
        };
        for s in segs {
            if s.len() != k || s.states.iter().any(|x| x.len() != state_dim) {
                return Err(Error::contract("segments in a batch must share K and state dim"));
            }
            b.rtg.extend_from_slice(&s.rtg);
            s.states.iter().for_each(|x| b.states.extend_from_slice(x));
            b.actions.extend_from_slice(&s.actions);
            b.rewards.extend_from_slice(&s.rewards);
            b.timesteps.extend_from_slice(&s.timesteps);
            b.pad.extend_from_slice(&s.pad_mask);
        }
        Ok(b)
    }

    pub fn valid_count(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }
}

pub struct Forward<'t> {
    pub heads: HeadOutputs<'t>,
    pub e_seq: Var<'t>,
    pub e_out: Var<'t>,
    /// `(B·N)×d` memory after the last token.
    pub memory: Var<'t>,
    pub address: Var<'t>,
    pub attention: Vec<Var<'t>>,
}

/// Runs the model on `batch`. Each block starts from `init_memory`
/// (`(B·N)×d`) when given, otherwise from the learned `memory.M0`.
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    batch: &Batch,
    init_memory: Option<Var<'t>>,
    drop: &mut Dropout<'_>,
) -> Result<Forward<'t>> {
    if batch.k == 0 || batch.k > cfg.backbone.context {
        return Err(Error::contract(format!(
            "segment length {} outside 1..={}",
            batch.k, cfg.backbone.context
        )));
    }
    let tokens = backbone::embed(&cfg.backbone, p, batch)?;
    let enc = backbone::encode(&cfg.backbone, p, tokens, batch.size, drop)?;
    let m_init = match init_memory {
        Some(m) => m,
        None => p.get("memory.M0")?.tile_rows(batch.size),
    };
    let proj = Projector { bound: p, lora: cfg.lora };
    let mem = memory::memory_forward(&proj, m_init, enc.e_seq, batch.size, cfg.memory.rounds, drop)?;
    let feats = if cfg.heads_skip {
        enc.e_seq.add(mem.e_out)?
    } else {
        mem.e_out
    };
    Ok(Forward {
        heads: backbone::predict_heads(p, feats, batch.size, batch.k)?,
        e_seq: enc.e_seq,
        e_out: mem.e_out,
        memory: mem.memory,
        address: mem.w,
        attention: enc.attention,
    })
}

/// Advances a carried `N×d` memory by the first `steps` timesteps of a
/// single-segment batch, as if they had been processed on their own.
pub fn fold_memory<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t>,
    batch: &Batch,
    memory: &Tensor,
    steps: usize,
) -> Result<Tensor> {
    if batch.size != 1 || steps == 0 || steps > batch.k {
        return Err(Error::contract("fold_memory needs one segment and 1..=k steps"));
    }
    let tape = p.get("memory.M0")?.tape();
    let mut prefix = batch.clone();
    prefix.k = steps;
    prefix.rtg.truncate(steps);
    prefix.states.truncate(steps * batch.state_dim);
    prefix.actions.truncate(steps);
    prefix.rewards.truncate(steps);
    prefix.timesteps.truncate(steps);
    prefix.pad.truncate(steps);
    let mut drop = Dropout::off();
    let out = forward(cfg, p, &prefix, Some(tape.constant(memory)), &mut drop)?;
    Ok(out.memory.to_tensor())
}
