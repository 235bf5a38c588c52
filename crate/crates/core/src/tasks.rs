//! Grid-world task family used as the offline multi-task suite.
//!
//! Two near-identical families share one state and action space:
//! `GridNav` (walk to a goal) and `GridKeyDoor` (pick up a key, then walk
//! to the goal). Tasks differ in goal and key placement and in step
//! penalty.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trajectory::{write_dataset, DatasetManifest, Trajectory};

pub const UP: u32 = 0;
pub const DOWN: u32 = 1;
pub const LEFT: u32 = 2;
pub const RIGHT: u32 = 3;
pub const NUM_ACTIONS: usize = 4;

pub const DEFAULT_GRID: usize = 7;
pub const DEFAULT_EPSILONS: [f64; 3] = [0.0, 0.3, 0.7];

/// Strides through the goal candidates; coprime with 48, the candidate
/// count of the default grid, so consecutive seeds never repeat a goal.
const GOAL_STRIDE: usize = 11;
/// With this offset the default held-out pair has one goal on the column-0
/// corridor that most expert routes share, (3,0), and one off every
/// expert route, (4,4).
const GOAL_OFFSET: usize = 6;
const KEY_STRIDE: usize = 5;
const PENALTIES: [f64; 4] = [-0.01, -0.02, -0.03, -0.05];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "GRID_NAV")]
    GridNav,
    #[serde(rename = "GRID_KEYDOOR")]
    GridKeyDoor,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GridNav => "GRID_NAV",
            Family::GridKeyDoor => "GRID_KEYDOOR",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "GRID_NAV" => Ok(Family::GridNav),
            "GRID_KEYDOOR" => Ok(Family::GridKeyDoor),
            _ => Err(Error::contract(format!("unknown task family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    Standard,
    /// With probability `p` the intended move is replaced by a uniformly
    /// random one (which may coincide with it).
    Slippery(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

pub type Pos = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: Family,
    pub task_id: String,
    pub grid_size: usize,
    pub start_pos: Pos,
    pub goal_pos: Pos,
    pub key_pos: Option<Pos>,
    pub step_penalty: f64,
    pub goal_reward: f64,
    pub dynamics: Dynamics,
    pub split: Split,
    /// Discount factor of the task MDP. Kept for completeness; training
    /// uses undiscounted returns.
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub agent_pos: Pos,
    pub has_key: bool,
    pub steps_elapsed: usize,
    pub done: bool,
}

/// Deterministic in `(family, seed)`; `task_id` is only a label.
pub fn make_task(family: Family, task_id: &str, seed: u64) -> TaskSpec {
    make_task_sized(family, task_id, seed, DEFAULT_GRID)
}

pub fn make_task_sized(family: Family, task_id: &str, seed: u64, grid_size: usize) -> TaskSpec {
    let g = grid_size.max(2);
    let start = (0, 0);
    let candidates: Vec<Pos> = (0..g * g)
        .map(|i| (i / g, i % g))
        .filter(|&p| p != start)
        .collect();
    let n = candidates.len();
    let s = seed as usize;
    let goal = candidates[(s.wrapping_mul(GOAL_STRIDE) + GOAL_OFFSET) % n];
    let key_pos = match family {
        Family::GridNav => None,
        Family::GridKeyDoor => {
            let mut k = (s.wrapping_mul(KEY_STRIDE) + 3) % n;
            if candidates[k] == goal {
                k = (k + 1) % n;
            }
            Some(candidates[k])
        }
    };
    TaskSpec {
        family,
        task_id: task_id.to_owned(),
        grid_size: g,
        start_pos: start,
        goal_pos: goal,
        key_pos,
        step_penalty: PENALTIES[s % PENALTIES.len()],
        goal_reward: 1.0,
        dynamics: Dynamics::Standard,
        split: Split::Train,
        gamma: 0.99,
    }
}

/// Ten TRAIN tasks followed by two TEST tasks, seeds `base_seed..base_seed+12`.
pub fn default_suite(family: Family, base_seed: u64) -> Vec<TaskSpec> {
    suite(family, base_seed, 10, 2)
}

pub fn suite(family: Family, base_seed: u64, train: usize, test: usize) -> Vec<TaskSpec> {
    suite_with(family, base_seed, train, test, DEFAULT_GRID, Dynamics::Standard)
}

pub fn suite_with(
    family: Family,
    base_seed: u64,
    train: usize,
    test: usize,
    grid_size: usize,
    dynamics: Dynamics,
) -> Vec<TaskSpec> {
    let prefix = match family {
        Family::GridNav => "nav",
        Family::GridKeyDoor => "key",
    };
    (0..train + test)
        .map(|i| {
            let mut t = make_task_sized(family, &format!("{prefix}-{i:02}"), base_seed + i as u64, grid_size);
            t.dynamics = dynamics;
            if i >= train {
                t.split = Split::Test;
            }
            t
        })
        .collect()
}

impl TaskSpec {
    pub fn step_limit(&self) -> usize {
        4 * self.grid_size * self.grid_size
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.grid_size)
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            agent_pos: self.start_pos,
            has_key: self.key_pos.is_none(),
            steps_elapsed: 0,
            done: false,
        }
    }

    fn needs_key(&self) -> bool {
        self.key_pos.is_some()
    }

    /// Cell the agent currently has to reach.
    fn subgoal(&self, st: &EnvState) -> Pos {
        match self.key_pos {
            Some(k) if !st.has_key => k,
            _ => self.goal_pos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid_size;
        let inside = |p: Pos| p.0 < g && p.1 < g;
        if !inside(self.start_pos) || !inside(self.goal_pos) || self.key_pos.is_some_and(|k| !inside(k)) {
            return Err(Error::contract(format!("{}: position outside the grid", self.task_id)));
        }
        if self.goal_pos == self.start_pos {
            return Err(Error::contract(format!("{}: goal equals start", self.task_id)));
        }
        Ok(())
    }
}

pub fn state_dim(grid_size: usize) -> usize {
    grid_size * grid_size + 2
}

/// One-hot position, then the key bit, then elapsed steps over the limit.
pub fn encode_state(spec: &TaskSpec, st: &EnvState) -> Vec<f64> {
    let g = spec.grid_size;
    let mut v = vec![0.0; state_dim(g)];
    v[st.agent_pos.0 * g + st.agent_pos.1] = 1.0;
    v[g * g] = if spec.needs_key() && st.has_key { 1.0 } else { 0.0 };
    v[g * g + 1] = st.steps_elapsed as f64 / spec.step_limit() as f64;
    v
}

fn apply_move(g: usize, p: Pos, action: u32) -> Pos {
    match action {
        UP => (p.0.saturating_sub(1), p.1),
        DOWN => ((p.0 + 1).min(g - 1), p.1),
        LEFT => (p.0, p.1.saturating_sub(1)),
        _ => (p.0, (p.1 + 1).min(g - 1)),
    }
}

/// Advances the environment by one action. The rng is consulted only for
/// slippery dynamics.
pub fn step<R: Rng>(spec: &TaskSpec, st: &EnvState, action: u32, rng: &mut R) -> Result<(EnvState, f64, bool)> {
    if st.done {
        return Err(Error::contract("step called on a finished episode"));
    }
    if action as usize >= NUM_ACTIONS {
        return Err(Error::contract(format!("action {action} outside 0..{NUM_ACTIONS}")));
    }
    let action = match spec.dynamics {
        Dynamics::Slippery(p) if rng.gen_bool(p) => rng.gen_range(0..NUM_ACTIONS as u32),
        _ => action,
    };
    let mut next = *st;
    next.agent_pos = apply_move(spec.grid_size, st.agent_pos, action);
    next.steps_elapsed += 1;
    if spec.key_pos == Some(next.agent_pos) {
        next.has_key = true;
    }
    let reached = next.agent_pos == spec.goal_pos && next.has_key;
    let reward = if reached { spec.goal_reward } else { spec.step_penalty };
    next.done = reached || next.steps_elapsed >= spec.step_limit();
    Ok((next, reward, next.done))
}

/// BFS distances to `target` over the open grid, indexed `row * g + col`.
fn distances_to(g: usize, target: Pos) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g * g];
    let mut queue = VecDeque::from([target]);
    dist[target.0 * g + target.1] = 0;
    while let Some(p) = queue.pop_front() {
        let d = dist[p.0 * g + p.1];
        for a in 0..NUM_ACTIONS as u32 {
            let q = apply_move(g, p, a);
            if dist[q.0 * g + q.1] == usize::MAX {
                dist[q.0 * g + q.1] = d + 1;
                queue.push_back(q);
            }
        }
    }
    dist
}

/// Shortest-path action toward the current subgoal; ties go to the lowest
/// action index.
pub fn optimal_action(spec: &TaskSpec, st: &EnvState) -> u32 {
    let g = spec.grid_size;
    let dist = distances_to(g, spec.subgoal(st));
    (0..NUM_ACTIONS as u32)
        .min_by_key(|&a| {
            let q = apply_move(g, st.agent_pos, a);
            dist[q.0 * g + q.1]
        })
        .unwrap_or(UP)
}

/// Number of steps an optimal agent needs from the start state.
pub fn optimal_steps(spec: &TaskSpec) -> usize {
    let g = spec.grid_size;
    let goal = distances_to(g, spec.goal_pos);
    let at = |d: &[usize], p: Pos| d[p.0 * g + p.1];
    match spec.key_pos {
        Some(k) => at(&distances_to(g, k), spec.start_pos) + at(&goal, k),
        None => at(&goal, spec.start_pos),
    }
}

/// Exact optimal return under standard dynamics.
pub fn optimal_return(spec: &TaskSpec) -> f64 {
    let n = optimal_steps(spec);
    let mut ret = 0.0;
    for _ in 1..n {
        ret += spec.step_penalty;
    }
    ret + spec.goal_reward
}

pub fn behavior_policy<R: Rng>(spec: &TaskSpec, st: &EnvState, epsilon: f64, rng: &mut R) -> u32 {
    if rng.gen_bool(epsilon.clamp(0.0, 1.0)) {
        rng.gen_range(0..NUM_ACTIONS as u32)
    } else {
        optimal_action(spec, st)
    }
}

/// Runs one episode to completion with `policy` choosing each action.
pub fn run_episode<R, P>(spec: &TaskSpec, rng: &mut R, mut policy: P) -> Result<Trajectory>
where
    R: Rng,
    P: FnMut(&EnvState, &mut R) -> u32,
{
    let mut st = spec.reset();
    let mut traj = Trajectory {
        task_id: spec.task_id.clone(),
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    while !st.done {
        let a = policy(&st, rng);
        traj.states.push(encode_state(spec, &st));
        traj.actions.push(a);
        let (next, r, _) = step(spec, &st, a, rng)?;
        traj.rewards.push(r);
        st = next;
    }
    Ok(traj)
}

pub fn generate_episodes(spec: &TaskSpec, episodes: usize, epsilons: &[f64], seed: u64) -> Result<Vec<Trajectory>> {
    if episodes == 0 {
        return Err(Error::contract("episodes must be at least 1"));
    }
    if epsilons.is_empty() {
        return Err(Error::contract("epsilon schedule is empty"));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes)
        .map(|_| {
            let eps = epsilons[rng.gen_range(0..epsilons.len())];
            run_episode(spec, &mut rng, |st, r| behavior_policy(spec, st, eps, r))
        })
        .collect()
}

/// Generates `episodes` behavior-policy episodes and writes them to `path`.
pub fn generate_dataset(
    spec: &TaskSpec,
    episodes: usize,
    epsilons: &[f64],
    seed: u64,
    path: &Path,
    run_config: Value,
) -> Result<DatasetManifest> {
    let trajs = generate_episodes(spec, episodes, epsilons, seed)?;
    let tag = format!("bfs-eps{epsilons:?}");
    write_dataset(&trajs, path, &spec.task_id, &tag, run_config)
}

/// Monte-Carlo mean return of the uniform random policy and its standard
/// error.
pub fn random_policy_return(spec: &TaskSpec, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes < 2 {
        return Err(Error::contract("need at least 2 episodes for a standard error"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let returns: Vec<f64> = (0..episodes)
        .map(|_| {
            run_episode(spec, &mut rng, |_, r| r.gen_range(0..NUM_ACTIONS as u32)).map(|t| t.total_return())
        })
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
