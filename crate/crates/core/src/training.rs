//! Three-head loss, AdamW, pre-training and adapter-only fine-tuning.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backbone::HeadOutputs;
use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig};
use crate::model::{forward, Batch, ModelConfig};
use crate::nn::Dropout;
use crate::numerics::{decode_tensor, encode_tensor, ParamStore, Tape, Tensor, Var};
use crate::trajectory::{segment, Segment, Trajectory};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Absolute error under which a reward or return prediction counts as
/// correct in the logged accuracies.
pub const ACC_TOL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionLoss {
    /// Squared error between softmax probabilities and the one-hot target.
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch: usize,
    pub alpha_loss: f64,
    pub lambda_loss: f64,
    pub steps: usize,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub action_loss: ActionLoss,
    /// Pair the reward head with return-to-go targets and the return head
    /// with reward targets.
    pub literal_eq1: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 1.0,
            batch: 16,
            alpha_loss: 1.0,
            lambda_loss: 1.0,
            steps: 2000,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            action_loss: ActionLoss::Mse,
            literal_eq1: false,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("train.{f}"), m));
        if !(self.lr >= 0.0) {
            return bad("lr", "must be non-negative");
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    /// Linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub action: f64,
    pub reward: f64,
    pub rtg: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub action: f64,
    pub reward: f64,
    pub rtg: f64,
}

fn masked_mean<'t>(sq: Var<'t>, mask: &[f64], count: f64) -> Result<Var<'t>> {
    let cols = sq.cols();
    let m: Vec<f64> = mask.iter().flat_map(|&x| std::iter::repeat(x).take(cols)).collect();
    let mv = sq.tape().constant_matrix(sq.rows(), cols, m)?;
    Ok(sq.mul(mv)?.sum().scale(1.0 / count))
}

/// Mean over unpadded timesteps of
/// `action_term + α·(r̃ − r)² + λ·(R̃ − r̂)²`.
pub fn loss<'t>(pred: &HeadOutputs<'t>, batch: &Batch, cfg: &TrainConfig) -> Result<LossParts<'t>> {
    let count = batch.valid_count();
    if count == 0 {
        return Err(Error::contract("loss over an all-padded batch"));
    }
    let count = count as f64;
    let tape = pred.action_logits.tape();
    let rows = batch.size * batch.k;
    let vocab = pred.action_logits.cols();
    let mask: Vec<f64> = batch.pad.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect();
    let mut onehot = vec![0.0; rows * vocab];
    for (i, &a) in batch.actions.iter().enumerate() {
        onehot[i * vocab + a as usize] = 1.0;
    }
    let onehot = tape.constant_matrix(rows, vocab, onehot)?;
    let action = match cfg.action_loss {
        ActionLoss::Mse => {
            let probs = pred.action_logits.softmax_rows()?;
            masked_mean(probs.sub(onehot)?.square()?, &mask, count)?
        }
        ActionLoss::CrossEntropy => {
            let logp = pred.action_logits.log_softmax_rows()?;
            masked_mean(logp.mul(onehot)?, &mask, count)?.scale(-1.0)
        }
    };
    let (reward_target, rtg_target) = if cfg.literal_eq1 {
        (&batch.rtg, &batch.rewards)
    } else {
        (&batch.rewards, &batch.rtg)
    };
    let reward = masked_mean(
        pred.reward.sub(tape.constant_matrix(rows, 1, reward_target.clone())?)?.square()?,
        &mask,
        count,
    )?;
    let rtg = masked_mean(
        pred.rtg.sub(tape.constant_matrix(rows, 1, rtg_target.clone())?)?.square()?,
        &mask,
        count,
    )?;
    let total = action
        .add(reward.scale(cfg.alpha_loss))?
        .add(rtg.scale(cfg.lambda_loss))?;
    Ok(LossParts {
        total,
        action: action.item(),
        reward: reward.item(),
        rtg: rtg.item(),
    })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &HeadOutputs<'_>, batch: &Batch) -> Accuracy {
    let logits = pred.action_logits.values();
    let reward = pred.reward.values();
    let rtg = pred.rtg.values();
    let vocab = pred.action_logits.cols();
    let mut acc = Accuracy::default();
    let mut n = 0.0;
    for i in (0..batch.pad.len()).filter(|&i| !batch.pad[i]) {
        n += 1.0;
        if argmax(&logits[i * vocab..(i + 1) * vocab]) == batch.actions[i] as usize {
            acc.action += 1.0;
        }
        if (reward[i] - batch.rewards[i]).abs() < ACC_TOL {
            acc.reward += 1.0;
        }
        if (rtg[i] - batch.rtg[i]).abs() < ACC_TOL {
            acc.rtg += 1.0;
        }
    }
    if n > 0.0 {
        acc.action /= n;
        acc.reward /= n;
        acc.rtg /= n;
    }
    acc
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(mut g) = t.take_grad() {
                g.iter_mut().for_each(|x| *x *= s);
                t.accumulate_grad(&g).expect("same shape");
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter path
/// and created lazily for parameters that receive gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (path, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.take_grad() else { continue };
            let m = self.m.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(path.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
                *x -= lr * (update + cfg.weight_decay * *x);
            }
        }
    }

    fn to_json(&self) -> Value {
        let enc = |map: &BTreeMap<String, Vec<f64>>| -> Value {
            map.iter()
                .map(|(k, v)| {
                    let t = Tensor::new(vec![v.len()], v.clone()).expect("1-d");
                    (k.clone(), encode_tensor(&t))
                })
                .collect::<serde_json::Map<_, _>>()
                .into()
        };
        json!({ "t": self.t, "m": enc(&self.m), "v": enc(&self.v) })
    }

    fn from_json(v: &Value) -> Result<Self> {
        let dec = |key: &str| -> Result<BTreeMap<String, Vec<f64>>> {
            v.get(key)
                .and_then(Value::as_object)
                .ok_or_else(|| Error::Format(format!("optimizer state missing `{key}`")))?
                .iter()
                .map(|(k, t)| Ok((k.clone(), decode_tensor(t)?.into_values())))
                .collect()
        };
        Ok(AdamW {
            t: v.get("t").and_then(Value::as_u64).unwrap_or(0),
            m: dec("m")?,
            v: dec("v")?,
        })
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    /// Decimal; the word position can exceed 2⁶⁴.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything needed to resume training or run evaluation.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub step: u64,
    pub rng: RngState,
    pub optimizer: AdamW,
    /// Configuration of the run that produced the checkpoint.
    pub run_config: Value,
}

impl Checkpoint {
    pub fn to_json(&self) -> Value {
        json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": {
                "model": self.model,
                "train": self.train,
                "run": self.run_config,
            },
            "step": self.step,
            "rng": self.rng,
            "params": self.params.to_json(),
            "trainable": self.params.iter().filter(|(_, t)| t.requires_grad).map(|(p, _)| p.clone()).collect::<Vec<_>>(),
            "optimizer": self.optimizer.to_json(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let version = v.get("format_version").and_then(Value::as_u64);
        if version != Some(u64::from(CHECKPOINT_FORMAT_VERSION)) {
            return Err(Error::Format(format!(
                "checkpoint format version {version:?} (expected {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let field = |k: &str| v.get(k).ok_or_else(|| Error::Format(format!("checkpoint missing `{k}`")));
        let config = field("config")?;
        let model: ModelConfig = serde_json::from_value(config.get("model").cloned().unwrap_or(Value::Null))?;
        let train: TrainConfig = serde_json::from_value(config.get("train").cloned().unwrap_or(Value::Null))?;
        let rng: RngState = serde_json::from_value(field("rng")?.clone())?;
        let mut params = ParamStore::from_json(field("params")?, train.seed)?;
        if let Some(tr) = v.get("trainable").and_then(Value::as_array) {
            let names: Vec<&str> = tr.iter().filter_map(Value::as_str).collect();
            params.set_trainable(|p| names.contains(&p));
        }
        Ok(Checkpoint {
            model,
            train,
            params,
            step: field("step")?.as_u64().unwrap_or(0),
            rng,
            optimizer: AdamW::from_json(field("optimizer")?)?,
            run_config: config.get("run").cloned().unwrap_or(Value::Null),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Segments of one task's dataset.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task_id: String,
    pub segments: Vec<Segment>,
}

impl TaskData {
    pub fn new(task_id: &str, trajs: &[Trajectory], k: usize) -> Result<Self> {
        let mut segments = Vec::new();
        for t in trajs {
            segments.extend(segment(t, k)?);
        }
        if segments.is_empty() {
            return Err(Error::MissingData(vec![task_id.to_owned()]));
        }
        Ok(TaskData {
            task_id: task_id.to_owned(),
            segments,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub task: String,
    pub loss: f64,
    pub action_loss: f64,
    pub reward_loss: f64,
    pub rtg_loss: f64,
    pub acc: Accuracy,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub run_config: Value,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig, run_config: Value) -> Result<Self> {
        train.validate()?;
        let params = model.init_params(train.seed)?;
        Ok(Trainer {
            model,
            params,
            optimizer: AdamW::default(),
            rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x7472_6169_6e00),
            step: 0,
            train,
            run_config,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        ckpt.model.validate()?;
        Ok(Trainer {
            rng: ckpt.rng.restore()?,
            model: ckpt.model,
            train: ckpt.train,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: ckpt.step,
            run_config: ckpt.run_config,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.train.clone(),
            params: self.params.clone(),
            step: self.step,
            rng: RngState::of(&self.rng),
            optimizer: self.optimizer.clone(),
            run_config: self.run_config.clone(),
        }
    }

    /// Mean loss over `segments` without updating anything.
    pub fn evaluate_loss(&self, segments: &[Segment]) -> Result<f64> {
        let mut total = 0.0;
        let mut weight = 0.0;
        for chunk in segments.chunks(self.train.batch.max(1)) {
            let refs: Vec<&Segment> = chunk.iter().collect();
            let batch = Batch::from_segments(&refs)?;
            let tape = Tape::new();
            let bound = self.params.bind(&tape);
            let out = forward(&self.model, &bound, &batch, None, &mut Dropout::off())?;
            let n = batch.valid_count() as f64;
            total += loss(&out.heads, &batch, &self.train)?.total.item() * n;
            weight += n;
        }
        Ok(total / weight.max(1.0))
    }

    /// One optimizer step on a batch sampled from `task`.
    pub fn step(&mut self, task: &TaskData) -> Result<StepMetrics> {
        let picks: Vec<&Segment> = (0..self.train.batch)
            .map(|_| &task.segments[self.rng.gen_range(0..task.segments.len())])
            .collect();
        let batch = Batch::from_segments(&picks)?;
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let mut drop = Dropout::train(&mut self.rng);
        let out = forward(&self.model, &bound, &batch, None, &mut drop)?;
        let parts = loss(&out.heads, &batch, &self.train)?;
        let acc = accuracy(&out.heads, &batch);
        let total = parts.total.item();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        let grads = tape.backward(parts.total)?;
        self.params.zero_grad();
        self.params.accumulate(&bound, &grads)?;
        let grad_norm = clip_grad_norm(&mut self.params, self.train.grad_clip);
        let lr = self.train.lr_at(self.step as usize);
        self.optimizer.step(&mut self.params, &self.train, lr);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            task: task.task_id.clone(),
            loss: total,
            action_loss: parts.action,
            reward_loss: parts.reward,
            rtg_loss: parts.rtg,
            acc,
            grad_norm,
            lr,
        })
    }

    /// Runs `steps` optimizer steps, cycling through `tasks` one step each.
    pub fn run(&mut self, tasks: &[TaskData], steps: usize, metrics: &mut MetricsLog) -> Result<()> {
        if tasks.is_empty() {
            return Err(Error::MissingData(Vec::new()));
        }
        for _ in 0..steps {
            let task = &tasks[self.step as usize % tasks.len()];
            let m = self.step(task)?;
            metrics.record(&m)?;
        }
        metrics.flush()
    }
}

/// Smoothed metrics rows written every `every` steps.
pub struct MetricsLog {
    writer: Option<csv::Writer<Box<dyn Write>>>,
    every: usize,
    start: Instant,
    window: Vec<StepMetrics>,
    pub history: Vec<StepMetrics>,
}

impl MetricsLog {
    pub fn new(every: usize) -> Self {
        MetricsLog {
            writer: None,
            every: every.max(1),
            start: Instant::now(),
            window: Vec::new(),
            history: Vec::new(),
        }
    }

    pub fn to_csv(path: &Path, every: usize) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_writer(Box::new(fs::File::create(path)?) as Box<dyn Write>);
        w.write_record([
            "step",
            "loss",
            "action_acc",
            "reward_acc",
            "rtg_acc",
            "wallclock",
            "action_loss",
            "reward_loss",
            "rtg_loss",
            "grad_norm",
            "lr",
        ])?;
        Ok(MetricsLog {
            writer: Some(w),
            ..MetricsLog::new(every)
        })
    }

    pub fn record(&mut self, m: &StepMetrics) -> Result<()> {
        self.history.push(m.clone());
        self.window.push(m.clone());
        if self.window.len() >= self.every {
            self.emit()?;
        }
        Ok(())
    }

    fn emit(&mut self) -> Result<()> {
        if self.window.is_empty() {
            return Ok(());
        }
        let n = self.window.len() as f64;
        let mean = |f: fn(&StepMetrics) -> f64| self.window.iter().map(f).sum::<f64>() / n;
        let last = self.window.last().expect("non-empty");
        if let Some(w) = self.writer.as_mut() {
            w.write_record(&[
                last.step.to_string(),
                format!("{:.6}", mean(|m| m.loss)),
                format!("{:.4}", mean(|m| m.acc.action)),
                format!("{:.4}", mean(|m| m.acc.reward)),
                format!("{:.4}", mean(|m| m.acc.rtg)),
                format!("{:.3}", self.start.elapsed().as_secs_f64()),
                format!("{:.6}", mean(|m| m.action_loss)),
                format!("{:.6}", mean(|m| m.reward_loss)),
                format!("{:.6}", mean(|m| m.rtg_loss)),
                format!("{:.4}", mean(|m| m.grad_norm)),
                format!("{:.3e}", last.lr),
            ])?;
        }
        self.window.clear();
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.emit()?;
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Mean training loss over the first and last `n` recorded steps.
    pub fn loss_window_means(&self, n: usize) -> Option<(f64, f64)> {
        let h = &self.history;
        if h.is_empty() {
            return None;
        }
        let n = n.clamp(1, h.len());
        let mean = |s: &[StepMetrics]| s.iter().map(|m| m.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&h[..n]), mean(&h[h.len() - n..])))
    }
}

/// Trains every parameter on the given tasks.
pub fn pretrain(
    model: ModelConfig,
    train: TrainConfig,
    tasks: &[TaskData],
    run_config: Value,
    metrics: &mut MetricsLog,
) -> Result<Checkpoint> {
    let steps = train.steps;
    let mut trainer = Trainer::new(model, train, run_config)?;
    trainer.run(tasks, steps, metrics)?;
    Ok(trainer.checkpoint())
}

/// Attaches adapters to a pre-trained checkpoint and trains only them.
pub fn finetune(
    base: &Checkpoint,
    lora_cfg: LoraConfig,
    train: TrainConfig,
    tasks: &[TaskData],
    run_config: Value,
    metrics: &mut MetricsLog,
) -> Result<(Checkpoint, lora::AdapterReport)> {
    let mut model = base.model.clone();
    let mut params = base.params.clone();
    let report = lora::attach(&mut params, &mut model, lora_cfg, train.seed ^ 0x6c6f_7261)?;
    let steps = train.steps;
    let mut trainer = Trainer {
        rng: ChaCha8Rng::seed_from_u64(train.seed ^ 0x6674),
        model,
        train,
        params,
        optimizer: AdamW::default(),
        step: 0,
        run_config,
    };
    trainer.train.validate()?;
    trainer.run(tasks, steps, metrics)?;
    Ok((trainer.checkpoint(), report))
}
