//! Return-conditioned rollouts and the 16-seed evaluation protocol.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{fold_memory, forward, Batch, ModelConfig};
use crate::nn::Dropout;
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::tasks::{encode_state, optimal_return, random_policy_return, step, Split, TaskSpec, NUM_ACTIONS};
use crate::training::{argmax, pretrain, Checkpoint, MetricsLog, TaskData, TrainConfig};

pub const SEED_STRIDE: u64 = 100;
pub const RANDOM_POLICY_EPISODES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetReturn {
    /// Best episode return in the task's dataset.
    DatasetMax,
    /// The dataset maximum times a factor.
    Multiple(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub runs: usize,
    pub target: TargetReturn,
    pub persist_memory: bool,
    /// Defaults to the task's step limit when `None`.
    pub max_steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            runs: 16,
            target: TargetReturn::DatasetMax,
            persist_memory: true,
            max_steps: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 3 {
            return Err(Error::config("eval.runs", "Top3 needs at least 3 runs"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| i * SEED_STRIDE).collect()
    }

    pub fn target_return(&self, dataset_max: f64) -> f64 {
        match self.target {
            TargetReturn::DatasetMax => dataset_max,
            TargetReturn::Multiple(k) => k * dataset_max,
        }
    }
}

/// A checkpoint prepared for inference: every parameter frozen.
pub struct Policy {
    pub model: ModelConfig,
    params: ParamStore,
}

impl Policy {
    pub fn new(model: ModelConfig, params: &ParamStore) -> Self {
        let mut params = params.clone();
        params.set_trainable(|_| false);
        Policy { model, params }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Policy::new(ckpt.model.clone(), &ckpt.params)
    }

    pub fn initial_memory(&self) -> Result<Tensor> {
        Ok(self.params.get("memory.M0")?.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub ret: f64,
    pub steps: usize,
    pub reached_goal: bool,
    pub actions: Vec<u32>,
}

/// Plays one episode greedily, conditioning on `target` return-to-go and
/// decrementing it by each observed reward.
pub fn rollout(policy: &Policy, spec: &TaskSpec, seed: u64, target: f64, cfg: &EvalConfig) -> Result<Rollout> {
    let mc = &policy.model;
    if mc.backbone.action_vocab != NUM_ACTIONS || mc.backbone.state_dim != spec.state_dim() {
        return Err(Error::contract(format!(
            "model (vocab {}, state {}) does not fit task {} (vocab {NUM_ACTIONS}, state {})",
            mc.backbone.action_vocab,
            mc.backbone.state_dim,
            spec.task_id,
            spec.state_dim()
        )));
    }
    let k = mc.backbone.context;
    let sd = spec.state_dim();
    let limit = cfg.max_steps.unwrap_or(usize::MAX).min(spec.step_limit());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut st = spec.reset();
    let mut rtg_hist: Vec<f64> = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut actions: Vec<u32> = Vec::new();
    let mut rtg = target;
    let mut ret = 0.0;
    let mut memory = if cfg.persist_memory {
        Some(policy.initial_memory()?)
    } else {
        None
    };
    let window = |start: usize, end: usize, rtg_hist: &[f64], states: &[Vec<f64>], actions: &[u32]| Batch {
        size: 1,
        k: end - start,
        state_dim: sd,
        rtg: rtg_hist[start..end].to_vec(),
        states: states[start..end].iter().flatten().copied().collect(),
        actions: actions[start..end].to_vec(),
        rewards: vec![0.0; end - start],
        timesteps: (start..end).collect(),
        pad: vec![false; end - start],
    };
    while !st.done && actions.len() < limit {
        let t = actions.len();
        rtg_hist.push(rtg);
        states.push(encode_state(spec, &st));
        actions.push(0);
        let start = (t + 1).saturating_sub(k);
        let tape = Tape::new();
        let bound = policy.params.bind(&tape);
        if start > 0 {
            if let Some(m) = memory.as_mut() {
                let evicted = window(start - 1, start, &rtg_hist, &states, &actions);
                *m = fold_memory(mc, &bound, &evicted, m, 1)?;
            }
        }
        let batch = window(start, t + 1, &rtg_hist, &states, &actions);
        let init = memory.as_ref().map(|m| tape.constant(m));
        let out = forward(mc, &bound, &batch, init, &mut Dropout::off())?;
        let logits = out.heads.action_logits.values();
        let a = argmax(&logits[(batch.k - 1) * NUM_ACTIONS..batch.k * NUM_ACTIONS]) as u32;
        actions[t] = a;
        let (next, r, _) = step(spec, &st, a, &mut rng)?;
        ret += r;
        rtg -= r;
        st = next;
    }
    Ok(Rollout {
        ret,
        steps: actions.len(),
        reached_goal: st.done && st.agent_pos == spec.goal_pos && st.has_key,
        actions,
    })
}

pub fn average(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean of the three largest values.
pub fn top3(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    average(&v[..v.len().min(3)])
}

/// `(model − dataset)/dataset × 100`.
pub fn rel_imp(score_model: f64, score_dataset: f64) -> Result<f64> {
    if score_dataset == 0.0 {
        return Err(Error::UndefinedBaseline);
    }
    Ok((score_model - score_dataset) / score_dataset * 100.0)
}

/// `(raw − random)/(optimal − random)`: 0 at the random policy, 1 at the
/// optimum.
pub fn normalized_score(raw: f64, random: f64, optimal: f64) -> Result<f64> {
    if optimal == random {
        return Err(Error::contract("optimal and random returns coincide"));
    }
    Ok((raw - random) / (optimal - random))
}

/// Anchors of a task used for normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAnchors {
    pub random_mean: f64,
    pub random_stderr: f64,
    pub optimal: f64,
    pub dataset_mean: f64,
    pub dataset_max: f64,
}

impl TaskAnchors {
    pub fn compute(spec: &TaskSpec, dataset_mean: f64, dataset_max: f64, seed: u64) -> Result<Self> {
        let (random_mean, random_stderr) = random_policy_return(spec, RANDOM_POLICY_EPISODES, seed)?;
        Ok(TaskAnchors {
            random_mean,
            random_stderr,
            optimal: optimal_return(spec),
            dataset_mean,
            dataset_max,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: String,
    pub split: Split,
    pub seeds: Vec<u64>,
    pub returns: Vec<f64>,
    pub average: f64,
    pub top3: f64,
    pub target_return: f64,
    pub anchors: TaskAnchors,
    /// `(average − random)/(optimal − random)`.
    pub normalized_average: f64,
    pub normalized_top3: f64,
    /// `(average − random)/(dataset mean − random)`; 1 matches the
    /// behavior data.
    pub dataset_normalized: Option<f64>,
    /// Relative improvement of the average over the dataset mean return,
    /// absent for a zero baseline.
    pub rel_imp: Option<f64>,
}

impl TaskReport {
    pub fn from_returns(spec: &TaskSpec, seeds: Vec<u64>, returns: Vec<f64>, target: f64, anchors: TaskAnchors) -> Result<Self> {
        let avg = average(&returns);
        let t3 = top3(&returns);
        Ok(TaskReport {
            task_id: spec.task_id.clone(),
            split: spec.split,
            normalized_average: normalized_score(avg, anchors.random_mean, anchors.optimal)?,
            normalized_top3: normalized_score(t3, anchors.random_mean, anchors.optimal)?,
            dataset_normalized: normalized_score(avg, anchors.random_mean, anchors.dataset_mean).ok(),
            rel_imp: rel_imp(avg, anchors.dataset_mean).ok(),
            seeds,
            returns,
            average: avg,
            top3: t3,
            target_return: target,
            anchors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub tasks: usize,
    pub mean_average: f64,
    pub mean_normalized: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub config: EvalConfig,
    pub tasks: Vec<TaskReport>,
    pub summary: BTreeMap<String, SplitSummary>,
    pub run_config: Value,
}

impl EvalReport {
    pub fn new(label: &str, config: EvalConfig, tasks: Vec<TaskReport>, run_config: Value) -> Self {
        let mut summary = BTreeMap::new();
        for (name, split) in [("train", Split::Train), ("test", Split::Test)] {
            let sel: Vec<&TaskReport> = tasks.iter().filter(|t| t.split == split).collect();
            if sel.is_empty() {
                continue;
            }
            let n = sel.len() as f64;
            summary.insert(
                name.to_owned(),
                SplitSummary {
                    tasks: sel.len(),
                    mean_average: sel.iter().map(|t| t.average).sum::<f64>() / n,
                    mean_normalized: sel.iter().map(|t| t.normalized_average).sum::<f64>() / n,
                },
            );
        }
        EvalReport {
            label: label.to_owned(),
            config,
            tasks,
            summary,
            run_config,
        }
    }

    pub fn task(&self, task_id: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// One `task_id,seed,return` row per rollout.
    pub fn write_returns_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["task_id", "seed", "return"])?;
        for t in &self.tasks {
            for (s, r) in t.seeds.iter().zip(&t.returns) {
                w.write_record([t.task_id.clone(), s.to_string(), format!("{r:?}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `task_id,seed,return` rows back, grouped by task in file order.
pub fn read_returns_csv(path: &Path) -> Result<BTreeMap<String, Vec<(u64, f64)>>> {
    let mut out: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    let mut r = csv::Reader::from_path(path)?;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 2,
            msg,
        };
        let task = rec.get(0).ok_or_else(|| parse_err("missing task_id".into()))?;
        let seed = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad seed".into()))?;
        let ret = rec
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad return".into()))?;
        out.entry(task.to_owned()).or_default().push((seed, ret));
    }
    Ok(out)
}

/// Runs `cfg.runs` rollouts per task with seeds `0, 100, 200, …`.
pub fn evaluate_suite(
    policy: &Policy,
    tasks: &[(TaskSpec, TaskAnchors)],
    cfg: &EvalConfig,
    label: &str,
    run_config: Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("evaluate_suite needs at least one task"));
    }
    let seeds = cfg.seeds();
    let mut reports = Vec::with_capacity(tasks.len());
    for (spec, anchors) in tasks {
        let target = cfg.target_return(anchors.dataset_max);
        let returns = seeds
            .iter()
            .map(|&s| rollout(policy, spec, s, target, cfg).map(|r| r.ret))
            .collect::<Result<Vec<_>>>()?;
        reports.push(TaskReport::from_returns(spec, seeds.clone(), returns, target, anchors.clone())?);
    }
    Ok(EvalReport::new(label, cfg.clone(), reports, run_config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub slots: usize,
    pub params: usize,
    pub final_loss: f64,
    /// Mean over tasks of the 16-run Average.
    pub average: f64,
    pub top3: f64,
    pub normalized: f64,
    pub per_task: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub steps: usize,
    pub rows: Vec<SweepRow>,
    pub run_config: Value,
}

impl SweepReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slots", "params", "final_loss", "average", "top3", "normalized"])?;
        for r in &self.rows {
            w.write_record([
                r.slots.to_string(),
                r.params.to_string(),
                format!("{:.6}", r.final_loss),
                format!("{:.6}", r.average),
                format!("{:.6}", r.top3),
                format!("{:.6}", r.normalized),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one model per slot count with an otherwise fixed config and
/// budget, then evaluates each on `eval_tasks`. `on_row` sees each row as
/// soon as it is done.
#[allow(clippy::too_many_arguments)]
pub fn memory_sweep(
    model: &ModelConfig,
    train: &TrainConfig,
    slots: &[usize],
    train_tasks: &[TaskData],
    eval_tasks: &[(TaskSpec, TaskAnchors)],
    eval: &EvalConfig,
    run_config: Value,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepReport> {
    if slots.len() < 2 {
        return Err(Error::contract("a sweep needs at least two slot counts"));
    }
    let mut rows = Vec::with_capacity(slots.len());
    for &n in slots {
        let mut cfg = model.clone();
        cfg.memory.slots = n;
        let mut log = MetricsLog::new(train.log_every);
        let ckpt = pretrain(cfg, train.clone(), train_tasks, run_config.clone(), &mut log)?;
        let final_loss = log.loss_window_means(100).map_or(f64::NAN, |(_, last)| last);
        let report = evaluate_suite(&Policy::from_checkpoint(&ckpt), eval_tasks, eval, &format!("slots-{n}"), Value::Null)?;
        let k = report.tasks.len() as f64;
        let mean = |f: fn(&TaskReport) -> f64| report.tasks.iter().map(f).sum::<f64>() / k;
        let row = SweepRow {
            slots: n,
            params: ckpt.params.count(""),
            final_loss,
            average: mean(|t| t.average),
            top3: mean(|t| t.top3),
            normalized: mean(|t| t.normalized_average),
            per_task: report.tasks.iter().map(|t| (t.task_id.clone(), t.average)).collect(),
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(SweepReport {
        steps: train.steps,
        rows,
        run_config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_examples() {
        assert_eq!((average(&[2.5; 16]), top3(&[2.5; 16])), (2.5, 2.5));
        let xs: Vec<f64> = (1..=16).map(f64::from).collect();
        assert_eq!((average(&xs), top3(&xs)), (8.5, 15.0));
    }

    #[test]
    fn rel_imp_examples() {
        assert_eq!(rel_imp(150.0, 100.0).unwrap(), 50.0);
        assert_eq!(rel_imp(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(rel_imp(80.0, 100.0).unwrap(), -20.0);
        assert!(matches!(rel_imp(1.0, 0.0), Err(Error::UndefinedBaseline)));
    }

    #[test]
    fn normalized_anchors() {
        assert_eq!(normalized_score(0.9, -1.5, 0.9).unwrap(), 1.0);
        assert_eq!(normalized_score(-1.5, -1.5, 0.9).unwrap(), 0.0);
        assert!(normalized_score(1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn seeds_follow_stride_rule() {
        let s = EvalConfig::default().seeds();
        assert_eq!(s, (0..16).map(|i| i * 100).collect::<Vec<u64>>());
        assert!(EvalConfig { runs: 2, ..Default::default() }.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn top3_dominates_average(xs in proptest::collection::vec(-1e3f64..1e3, 3..40)) {
            proptest::prop_assert!(top3(&xs) >= average(&xs) - 1e-9);
        }

        #[test]
        fn rel_imp_monotone(a in -1e3f64..1e3, d in 0.0f64..1e3, base in 0.1f64..1e3) {
            proptest::prop_assert_eq!(rel_imp(a, base).unwrap() <= rel_imp(a + d, base).unwrap(), true);
            proptest::prop_assert_eq!(rel_imp(base, base).unwrap(), 0.0);
        }
    }
}
