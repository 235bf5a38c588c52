//! Small configs and random batches shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::memory::MemoryConfig;
use crate::model::{Batch, ModelConfig};

pub fn micro_config(d: usize, slots: usize, k: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            layers,
            d_model: d,
            heads: 2,
            context: k,
            dropout: 0.0,
            action_vocab: 4,
            state_dim: 5,
            max_timestep: 16,
        },
        memory: MemoryConfig { slots, rounds: 1 },
        heads_skip: false,
        lora: None,
    }
}

pub fn random_batch(cfg: &ModelConfig, size: usize, k: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = cfg.backbone.state_dim;
    let n = size * k;
    Batch {
        size,
        k,
        state_dim: sd,
        rtg: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        states: (0..n * sd).map(|_| rng.gen_range(0.0..1.0)).collect(),
        actions: (0..n).map(|_| rng.gen_range(0..cfg.backbone.action_vocab as u32)).collect(),
        rewards: (0..n).map(|_| rng.gen_range(-0.1..1.0)).collect(),
        timesteps: (0..n).map(|i| i % k + 1).collect(),
        pad: vec![false; n],
    }
}

/// Micro model sized for `grid`×`grid` tasks, with a few episodes of
/// GRID_NAV seed `seed` segmented for it.
pub fn grid_setup(grid: usize, k: usize, episodes: usize, seed: u64) -> (ModelConfig, crate::training::TaskData) {
    use crate::tasks::{make_task_sized, generate_episodes, Family};
    let mut cfg = micro_config(8, 4, k, 1);
    cfg.backbone.state_dim = crate::tasks::state_dim(grid);
    cfg.backbone.max_timestep = 4 * grid * grid;
    let spec = make_task_sized(Family::GridNav, "t", seed, grid);
    let trajs = generate_episodes(&spec, episodes, &[0.0, 0.5], seed).unwrap();
    (cfg, crate::training::TaskData::new("t", &trajs, k).unwrap())
}
