//! Token embedding, causal attention encoder and prediction heads.
//!
//! Each timestep contributes three tokens in the order (return-to-go,
//! state, action). Encoder blocks are pre-norm attention with a residual
//! connection and no feed-forward sub-layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::nn::{layer_norm, linear, Dropout};
use crate::numerics::{interleave, Bound, Var};

pub const TOKENS_PER_STEP: usize = 3;
pub const RTG_TOKEN: usize = 0;
pub const STATE_TOKEN: usize = 1;
pub const ACTION_TOKEN: usize = 2;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Context length `K` in timesteps.
    pub context: usize,
    pub dropout: f64,
    pub action_vocab: usize,
    pub state_dim: usize,
    /// Size of the timestep embedding table; later timesteps share the
    /// last row.
    pub max_timestep: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("backbone.{field}"), msg));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads", "d_model must be a positive multiple of heads");
        }
        if self.context == 0 {
            return bad("context", "must be at least 1");
        }
        if self.action_vocab == 0 || self.state_dim == 0 || self.max_timestep == 0 {
            return bad("action_vocab", "vocab, state_dim and max_timestep must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Embeds a batch into `(B·3k)×d` token rows. A learned per-timestep
/// embedding is shared by the three tokens of that timestep.
pub fn embed<'t>(cfg: &BackboneConfig, p: &Bound<'t>, batch: &Batch) -> Result<Var<'t>> {
    let rows = batch.size * batch.k;
    let tape = p.get("embed.pos")?.tape();
    if let Some(&a) = batch.actions.iter().find(|&&a| a as usize >= cfg.action_vocab) {
        return Err(Error::contract(format!("action id {a} outside vocab {}", cfg.action_vocab)));
    }
    if batch.state_dim != cfg.state_dim {
        return Err(Error::contract(format!(
            "state dim {} does not match model {}",
            batch.state_dim, cfg.state_dim
        )));
    }
    let rtg = linear(p, "embed.rtg", tape.constant_matrix(rows, 1, batch.rtg.clone())?)?;
    let states = linear(
        p,
        "embed.state",
        tape.constant_matrix(rows, cfg.state_dim, batch.states.clone())?,
    )?;
    let idx: Vec<usize> = batch.actions.iter().map(|&a| a as usize).collect();
    let actions = p.get("embed.action")?.gather_rows(&idx)?;
    let tokens = interleave(&[rtg, states, actions])?;
    let pos_idx: Vec<usize> = batch
        .timesteps
        .iter()
        .flat_map(|&t| [t.min(cfg.max_timestep - 1); TOKENS_PER_STEP])
        .collect();
    tokens.add(p.get("embed.pos")?.gather_rows(&pos_idx)?)
}

pub struct Encoded<'t> {
    pub e_seq: Var<'t>,
    /// One `causal_attention` node per layer; see [`Var::attention_probs`].
    pub attention: Vec<Var<'t>>,
}

pub fn encode<'t>(
    cfg: &BackboneConfig,
    p: &Bound<'t>,
    x: Var<'t>,
    blocks: usize,
    drop: &mut Dropout<'_>,
) -> Result<Encoded<'t>> {
    let mut x = drop.apply(x, cfg.dropout)?;
    let mut attention = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let pre = format!("blocks.{i}");
        let h = layer_norm(p, &format!("{pre}.ln"), x, LN_EPS)?;
        let q = linear(p, &format!("{pre}.attn.q"), h)?;
        let k = linear(p, &format!("{pre}.attn.k"), h)?;
        let v = linear(p, &format!("{pre}.attn.v"), h)?;
        let att = q.causal_attention(k, v, blocks, cfg.heads)?;
        attention.push(att);
        let o = linear(p, &format!("{pre}.attn.out"), att)?;
        x = x.add(drop.apply(o, cfg.dropout)?)?;
    }
    Ok(Encoded {
        e_seq: layer_norm(p, "ln_f", x, LN_EPS)?,
        attention,
    })
}

pub struct HeadOutputs<'t> {
    /// `(B·k)×vocab`, read at state tokens.
    pub action_logits: Var<'t>,
    /// `(B·k)×1`, read at action tokens.
    pub reward: Var<'t>,
    /// `(B·k)×1`, read at action tokens.
    pub rtg: Var<'t>,
}

/// Row indices of token `kind` for every timestep of every block.
pub fn token_rows(blocks: usize, k: usize, kind: usize) -> Vec<usize> {
    (0..blocks * k).map(|i| TOKENS_PER_STEP * i + kind).collect()
}

fn mlp<'t>(p: &Bound<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = linear(p, &format!("{prefix}.fc1"), x)?.gelu();
    linear(p, &format!("{prefix}.fc2"), h)
}

pub fn predict_heads<'t>(p: &Bound<'t>, feats: Var<'t>, blocks: usize, k: usize) -> Result<HeadOutputs<'t>> {
    let at_state = feats.gather_rows(&token_rows(blocks, k, STATE_TOKEN))?;
    let at_action = feats.gather_rows(&token_rows(blocks, k, ACTION_TOKEN))?;
    Ok(HeadOutputs {
        action_logits: mlp(p, "heads.action", at_state)?,
        reward: mlp(p, "heads.reward", at_action)?,
        rtg: mlp(p, "heads.rtg", at_action)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use crate::testutil::{micro_config, random_batch};

    #[test]
    fn zero_inputs_and_tables_leave_position_embeddings() {
        let cfg = micro_config(8, 3, 4, 1);
        let mut p = cfg.init_params(1).unwrap();
        for path in ["embed.rtg.w", "embed.rtg.b", "embed.state.w", "embed.state.b", "embed.action"] {
            let shape = p.get(path).unwrap().shape().to_vec();
            *p.get_mut(path).unwrap() = Tensor::zeros(&shape);
        }
        let mut b = random_batch(&cfg, 1, 4, 2);
        b.rtg.fill(0.0);
        b.states.fill(0.0);
        b.actions.fill(0);
        let tape = Tape::new();
        let e = embed(&cfg.backbone, &p.bind(&tape), &b).unwrap().to_tensor();
        assert_eq!(e.shape(), &[12, 8]);
        let pos = p.get("embed.pos").unwrap();
        for row in 0..12 {
            assert_eq!(e.row(row), pos.row(b.timesteps[row / 3]));
        }
    }

    #[test]
    fn changing_one_action_touches_one_token() {
        let cfg = micro_config(8, 3, 8, 1);
        let p = cfg.init_params(3).unwrap();
        let a = random_batch(&cfg, 1, 8, 4);
        let mut b = a.clone();
        b.actions[5] = (a.actions[5] + 1) % 4;
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let ea = embed(&cfg.backbone, &bound, &a).unwrap().to_tensor();
        let eb = embed(&cfg.backbone, &bound, &b).unwrap().to_tensor();
        let differing: Vec<usize> = (0..24).filter(|&r| ea.row(r) != eb.row(r)).collect();
        assert_eq!(differing, vec![3 * 5 + 2]);
    }

    #[test]
    fn embed_rejects_bad_actions_and_dims() {
        let cfg = micro_config(8, 3, 2, 1);
        let p = cfg.init_params(0).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut b = random_batch(&cfg, 1, 2, 0);
        b.actions[1] = 4;
        assert!(embed(&cfg.backbone, &bound, &b).is_err());
        let mut b = random_batch(&cfg, 1, 2, 0);
        b.state_dim = 4;
        b.states.truncate(8);
        assert!(embed(&cfg.backbone, &bound, &b).is_err());
    }

    #[test]
    fn encoder_is_causal() {
        let cfg = micro_config(8, 3, 4, 2);
        let p = cfg.init_params(5).unwrap();
        let mut x = Tensor::new(vec![12, 8], (0..96).map(|i| ((i * 37) % 11) as f64 / 7.0).collect()).unwrap();
        let run = |x: &Tensor| {
            let tape = Tape::new();
            let bound = p.bind(&tape);
            encode(&cfg.backbone, &bound, tape.constant(x), 1, &mut Dropout::off())
                .unwrap()
                .e_seq
                .to_tensor()
        };
        let before = run(&x);
        let j = 7;
        x.values_mut()[j * 8 + 3] += 0.5;
        let after = run(&x);
        for r in 0..j {
            assert_eq!(before.row(r), after.row(r));
        }
        assert_ne!(before.row(j), after.row(j));
    }

    #[test]
    fn zero_attention_is_layer_norm_only() {
        let cfg = micro_config(8, 3, 1, 1);
        let mut p = cfg.init_params(6).unwrap();
        let paths: Vec<String> = p.iter().map(|(k, _)| k.clone()).filter(|k| k.contains(".attn.")).collect();
        for path in paths {
            let shape = p.get(&path).unwrap().shape().to_vec();
            *p.get_mut(&path).unwrap() = Tensor::zeros(&shape);
        }
        let x = Tensor::new(vec![1, 8], vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.25, -0.75, 1.5]).unwrap();
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let out = encode(&cfg.backbone, &bound, tape.constant(&x), 1, &mut Dropout::off())
            .unwrap()
            .e_seq
            .to_tensor();
        let mean = x.values().iter().sum::<f64>() / 8.0;
        let var = x.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (o, v) in out.values().iter().zip(x.values()) {
            assert!((o - (v - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = micro_config(8, 3, 4, 2);
        let p = cfg.init_params(7).unwrap();
        let b = random_batch(&cfg, 2, 4, 8);
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let x = embed(&cfg.backbone, &bound, &b).unwrap();
        let enc = encode(&cfg.backbone, &bound, x, 2, &mut Dropout::off()).unwrap();
        let l = 12;
        for att in &enc.attention {
            let probs = att.attention_probs().unwrap();
            assert_eq!(probs.len(), 2 * cfg.backbone.heads * l * l);
            for (r, row) in probs.chunks(l).enumerate() {
                let i = r % l;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn heads_shapes_and_zero_output_layers() {
        let cfg = micro_config(8, 3, 4, 1);
        let mut p = cfg.init_params(9).unwrap();
        let tape = Tape::new();
        let feats = tape.constant(&Tensor::full(&[2 * 12, 8], 0.3));
        let h = predict_heads(&p.bind(&tape), feats, 2, 4).unwrap();
        assert_eq!(h.action_logits.shape(), vec![8, 4]);
        assert_eq!(h.reward.shape(), vec![8, 1]);
        assert_eq!(h.rtg.shape(), vec![8, 1]);
        for head in ["action", "reward", "rtg"] {
            for part in ["w", "b"] {
                let path = format!("heads.{head}.fc2.{part}");
                let shape = p.get(&path).unwrap().shape().to_vec();
                *p.get_mut(&path).unwrap() = Tensor::zeros(&shape);
            }
        }
        let tape = Tape::new();
        let feats = tape.constant(&Tensor::full(&[12, 8], 0.3));
        let h = predict_heads(&p.bind(&tape), feats, 1, 4).unwrap();
        for v in [h.action_logits, h.reward, h.rtg] {
            assert!(v.values().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn action_loss_reaches_only_state_tokens() {
        let cfg = micro_config(8, 3, 4, 1);
        let p = cfg.init_params(10).unwrap();
        let tape = Tape::new();
        let feats = tape.leaf(&Tensor::full(&[12, 8], 0.1).with_grad());
        let h = predict_heads(&p.bind(&tape), feats, 1, 4).unwrap();
        let g = tape.backward(h.action_logits.sum()).unwrap();
        let grad = g.get(feats).unwrap();
        for (r, row) in grad.chunks(8).enumerate() {
            let touched = row.iter().any(|&v| v != 0.0);
            assert_eq!(touched, r % 3 == STATE_TOKEN, "row {r}");
        }
    }
}
