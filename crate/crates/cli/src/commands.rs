use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, ValueEnum};
use dtmem_core::config::RunConfig;
use dtmem_core::evaluation::{evaluate_suite, memory_sweep, EvalReport, Policy, SweepReport};
use dtmem_core::lora::{self, LoraConfig};
use dtmem_core::model::ParamBreakdown;
use dtmem_core::plot;
use dtmem_core::suite::{SuiteData, SuiteEntry};
use dtmem_core::tasks::Split;
use dtmem_core::training::{finetune, pretrain, Checkpoint, MetricsLog, TrainConfig};
use dtmem_core::{Error, Result};
use log::{info, warn};

use crate::{Command, GlobalArgs};

/// Adapter count published for the reference DT-Mem model.
const PUBLISHED_ADAPTER_PARAMS: usize = 147_000;

#[derive(Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    #[value(name = "GRID_NAV")]
    GridNav,
    #[value(name = "GRID_KEYDOOR")]
    GridKeydoor,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn keep(self, s: Split) -> bool {
        match self {
            SplitArg::Train => s == Split::Train,
            SplitArg::Test => s == Split::Test,
            SplitArg::All => true,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ActionLossArg {
    Mse,
    CrossEntropy,
}

#[derive(Args)]
pub struct GenData {
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Number of TRAIN tasks.
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    test_tasks: Option<usize>,
    /// Episodes per task.
    #[arg(long)]
    episodes: Option<usize>,
    /// Dataset seed; task i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
pub struct Pretrain {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "CKPT")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    action_loss: Option<ActionLossArg>,
    /// Pair the reward head with return-to-go targets and vice versa.
    #[arg(long)]
    literal_eq1: bool,
    /// Metrics CSV; defaults to the checkpoint path with `.metrics.csv`.
    #[arg(long, value_name = "CSV")]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
pub struct Finetune {
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// Tasks to adapt to, each separately. Defaults to every TEST task.
    #[arg(long = "task", value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Also write `<name>.merged.json` with adapters folded into the weights.
    #[arg(long)]
    merge: bool,
    /// Checkpoint file for a single task, otherwise a directory receiving
    /// `<task>.json` per task.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct Eval {
    /// A checkpoint, or a directory of per-task `<task>.json` checkpoints
    /// as written by `finetune`, each evaluated on its own task.
    #[arg(long, value_name = "CKPT")]
    ckpt: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    /// Name shown in plots; defaults to the checkpoint's file stem.
    #[arg(long)]
    label: Option<String>,
    /// Reset memory at every rollout window instead of carrying it across.
    #[arg(long)]
    no_persist: bool,
    #[arg(long, value_name = "JSON")]
    out: PathBuf,
    /// Raw per-seed returns; defaults to the report path with `.returns.csv`.
    #[arg(long, value_name = "CSV")]
    returns: Option<PathBuf>,
}

#[derive(Args)]
pub struct Sweep {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    slots: Vec<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Tasks each swept model is evaluated on.
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
pub struct Plot {
    /// Evaluation reports; reports sharing a label are drawn as one series.
    #[arg(long = "report", required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    sweep: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
pub struct Info {
    /// Adapter rank to account for; defaults to `finetune.lora.rank`.
    #[arg(long)]
    rank: Option<usize>,
}

impl Command {
    /// Subcommand flags as config overrides, applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        match self {
            Command::GenData(a) => {
                push(
                    "suite.family",
                    a.family.map(|f| match f {
                        FamilyArg::GridNav => "GRID_NAV".into(),
                        FamilyArg::GridKeydoor => "GRID_KEYDOOR".into(),
                    }),
                );
                push("suite.train_tasks", a.tasks.map(|v| v.to_string()));
                push("suite.test_tasks", a.test_tasks.map(|v| v.to_string()));
                push("suite.episodes", a.episodes.map(|v| v.to_string()));
                push("suite.data_seed", a.seed.map(|v| v.to_string()));
            }
            Command::Pretrain(a) => {
                push("train.steps", a.steps.map(|v| v.to_string()));
                push(
                    "train.action_loss",
                    a.action_loss.map(|l| match l {
                        ActionLossArg::Mse => "mse".into(),
                        ActionLossArg::CrossEntropy => "cross-entropy".into(),
                    }),
                );
                push("train.literal_eq1", a.literal_eq1.then(|| "true".into()));
            }
            Command::Finetune(a) => {
                push("finetune.lora.rank", a.rank.map(|v| v.to_string()));
                push("finetune.lora.alpha", a.alpha.map(|v| format!("{v:?}")));
                push("finetune.steps", a.steps.map(|v| v.to_string()));
                push("finetune.lr", a.lr.map(|v| format!("{v:?}")));
            }
            Command::Eval(a) => push("eval.persist_memory", a.no_persist.then(|| "false".into())),
            Command::Sweep(a) => {
                if !a.slots.is_empty() {
                    let s: Vec<String> = a.slots.iter().map(usize::to_string).collect();
                    push("sweep.slots", Some(format!("[{}]", s.join(","))));
                }
                push("sweep.steps", a.steps.map(|v| v.to_string()));
            }
            Command::Info(a) => push("finetune.lora.rank", a.rank.map(|v| v.to_string())),
            Command::Plot(_) => {}
        }
        o
    }
}

pub fn run(global: &GlobalArgs, cmd: Command) -> Result<()> {
    let mut overrides = global.set.clone();
    overrides.extend(cmd.overrides());
    let cfg = RunConfig::resolve(global.profile.into(), global.config.as_deref(), &overrides)?;
    match cmd {
        Command::GenData(a) => gen_data(cfg, &a),
        Command::Pretrain(a) => run_pretrain(cfg, &a),
        Command::Finetune(a) => run_finetune(cfg, &a),
        Command::Eval(a) => eval(cfg, &a),
        Command::Sweep(a) => sweep(cfg, &a),
        Command::Plot(a) => run_plot(&a),
        Command::Info(_) => info_cmd(&cfg),
    }
}

/// `path` with its extension replaced by `suffix`, e.g. `ckpt.json` →
/// `ckpt.metrics.csv`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Loads a suite and makes the run config's suite section match it, since
/// the data fixes grid size and task layout.
fn load_suite(cfg: &mut RunConfig, dir: &Path) -> Result<SuiteData> {
    let suite = SuiteData::load(dir)?;
    if let Some(s) = suite.run_config.get("suite") {
        if *s != serde_json::to_value(&cfg.suite)? {
            warn!("suite settings are taken from {}", dir.display());
        }
        cfg.set_value("suite", s.clone())?;
    }
    Ok(suite)
}

fn gen_data(cfg: RunConfig, a: &GenData) -> Result<()> {
    let t0 = Instant::now();
    let suite = SuiteData::generate(&cfg, &a.out)?;
    info!("wrote {} datasets to {} in {:.1}s", suite.entries.len(), a.out.display(), t0.elapsed().as_secs_f64());
    println!("{:<8} {:<6} {:>6} {:>9} {:>9} {:>9} {:>9}", "task", "split", "goal", "data_mean", "data_max", "random", "optimal");
    for e in &suite.entries {
        let x = &e.anchors;
        println!(
            "{:<8} {:<6} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            e.spec.task_id,
            split_name(e.spec.split),
            format!("{},{}", e.spec.goal_pos.0, e.spec.goal_pos.1),
            x.dataset_mean,
            x.dataset_max,
            x.random_mean,
            x.optimal
        );
    }
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

fn metrics_log(path: &Path, every: usize) -> Result<MetricsLog> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    MetricsLog::to_csv(path, every)
}

fn run_pretrain(mut cfg: RunConfig, a: &Pretrain) -> Result<()> {
    let suite = load_suite(&mut cfg, &a.data)?;
    let train: Vec<&SuiteEntry> = suite.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::MissingData(vec!["no TRAIN tasks in the suite".into()]));
    }
    let data = SuiteData::load_data(&a.data, &train, cfg.model.backbone.context, None)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| sibling(&a.out, ".metrics.csv"));
    let mut log = metrics_log(&metrics_path, cfg.train.log_every)?;
    let params = cfg.model.param_breakdown().total();
    info!("pre-training {params} parameters on {} tasks for {} steps", data.len(), cfg.train.steps);
    let t0 = Instant::now();
    let ckpt = pretrain(cfg.model.clone(), cfg.train.clone(), &data, cfg.to_json(), &mut log)?;
    log.flush()?;
    ckpt.save(&a.out)?;
    if let Some((first, last)) = log.loss_window_means(100) {
        println!("loss {first:.4} -> {last:.4} over {} steps", cfg.train.steps);
    }
    info!(
        "wrote {} and {} in {:.1}s",
        a.out.display(),
        metrics_path.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn run_finetune(mut cfg: RunConfig, a: &Finetune) -> Result<()> {
    let suite = load_suite(&mut cfg, &a.data)?;
    let entries = if a.tasks.is_empty() {
        suite.split(Split::Test).collect()
    } else {
        suite.select(&a.tasks)?
    };
    if entries.is_empty() {
        return Err(Error::MissingData(vec!["no TEST tasks in the suite".into()]));
    }
    let base = Checkpoint::load(&a.ckpt)?;
    let lora_cfg: LoraConfig = cfg.finetune.lora;
    let train = TrainConfig {
        steps: cfg.finetune.steps,
        lr: cfg.finetune.lr,
        ..base.train.clone()
    };
    let single = entries.len() == 1 && a.out.extension().is_some_and(|e| e == "json");
    for e in entries {
        let id = &e.spec.task_id;
        let out = if single { a.out.clone() } else { a.out.join(format!("{id}.json")) };
        let data = SuiteData::load_data(&a.data, &[e], base.model.backbone.context, Some(cfg.suite.finetune_fraction))?;
        let mut log = metrics_log(&sibling(&out, ".metrics.csv"), train.log_every)?;
        let t0 = Instant::now();
        let (mut ckpt, report) = finetune(&base, lora_cfg, train.clone(), &data, cfg.to_json(), &mut log)?;
        log.flush()?;
        ckpt.save(&out)?;
        let (first, last) = log.loss_window_means(100).unwrap_or((f64::NAN, f64::NAN));
        println!(
            "{id}: {} adapter params ({:.2}% of {}), {} segments, loss {first:.4} -> {last:.4}, {:.1}s",
            report.adapter_params,
            report.percent,
            report.total_params,
            data[0].segments.len(),
            t0.elapsed().as_secs_f64()
        );
        if a.merge {
            lora::merge(&mut ckpt.params, &mut ckpt.model)?;
            let merged = sibling(&out, ".merged.json");
            ckpt.save(&merged)?;
            info!("wrote {}", merged.display());
        }
    }
    Ok(())
}

/// Per-task checkpoints in `dir`: every `<task>.json` whose stem names a
/// suite task.
fn task_checkpoints(dir: &Path, suite: &SuiteData) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().is_some_and(|e| e == "json") && suite.entry(stem).is_ok() {
            out.insert(stem.to_owned(), path.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::MissingData(vec![format!("no <task>.json checkpoints in {}", dir.display())]));
    }
    Ok(out)
}

fn eval(mut cfg: RunConfig, a: &Eval) -> Result<()> {
    let suite = load_suite(&mut cfg, &a.data)?;
    let entries: Vec<&SuiteEntry> = suite
        .select(&a.tasks)?
        .into_iter()
        .filter(|e| a.split.keep(e.spec.split))
        .collect();
    let label = a.label.clone().unwrap_or_else(|| {
        a.ckpt
            .file_stem()
            .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
    });
    let t0 = Instant::now();
    let report = if a.ckpt.is_dir() {
        let ckpts = task_checkpoints(&a.ckpt, &suite)?;
        let mut tasks = Vec::new();
        for e in entries.iter().filter(|e| ckpts.contains_key(&e.spec.task_id)) {
            let policy = Policy::from_checkpoint(&Checkpoint::load(&ckpts[&e.spec.task_id])?);
            let r = evaluate_suite(&policy, &SuiteData::eval_tasks(&[e]), &cfg.eval, &label, serde_json::Value::Null)?;
            tasks.extend(r.tasks);
        }
        if tasks.is_empty() {
            return Err(Error::MissingData(vec![format!(
                "no selected task has a checkpoint in {}",
                a.ckpt.display()
            )]));
        }
        EvalReport::new(&label, cfg.eval.clone(), tasks, cfg.to_json())
    } else {
        let policy = Policy::from_checkpoint(&Checkpoint::load(&a.ckpt)?);
        evaluate_suite(&policy, &SuiteData::eval_tasks(&entries), &cfg.eval, &label, cfg.to_json())?
    };
    report.save(&a.out)?;
    let returns = a.returns.clone().unwrap_or_else(|| sibling(&a.out, ".returns.csv"));
    report.write_returns_csv(&returns)?;
    print_report(&report);
    info!(
        "wrote {} and {} in {:.1}s",
        a.out.display(),
        returns.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "{:<8} {:<6} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "task", "split", "average", "top3", "norm_avg", "random", "optimal"
    );
    for t in &r.tasks {
        println!(
            "{:<8} {:<6} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3}",
            t.task_id,
            split_name(t.split),
            t.average,
            t.top3,
            t.normalized_average,
            t.anchors.random_mean,
            t.anchors.optimal
        );
    }
    for (split, s) in &r.summary {
        println!("{split}: {} tasks, mean normalized Average {:.3}", s.tasks, s.mean_normalized);
    }
}

fn sweep(mut cfg: RunConfig, a: &Sweep) -> Result<()> {
    let suite = load_suite(&mut cfg, &a.data)?;
    let train: Vec<&SuiteEntry> = suite.split(Split::Train).collect();
    let evals: Vec<&SuiteEntry> = suite.entries.iter().filter(|e| a.split.keep(e.spec.split)).collect();
    let data = SuiteData::load_data(&a.data, &train, cfg.model.backbone.context, None)?;
    let train_cfg = TrainConfig {
        steps: cfg.sweep.steps,
        ..cfg.train.clone()
    };
    fs::create_dir_all(&a.out)?;
    println!("{:>6} {:>9} {:>10} {:>9} {:>9} {:>9}", "slots", "params", "final_loss", "average", "top3", "norm_avg");
    let report = memory_sweep(
        &cfg.model,
        &train_cfg,
        &cfg.sweep.slots,
        &data,
        &SuiteData::eval_tasks(&evals),
        &cfg.eval,
        cfg.to_json(),
        |r| {
            println!(
                "{:>6} {:>9} {:>10.4} {:>9.3} {:>9.3} {:>9.3}",
                r.slots, r.params, r.final_loss, r.average, r.top3, r.normalized
            )
        },
    )?;
    report.save(&a.out.join("sweep.json"))?;
    report.write_csv(&a.out.join("sweep.csv"))?;
    plot::sweep_curve(&report, &a.out.join("sweep.svg"))?;
    info!("wrote sweep.json, sweep.csv and sweep.svg to {}", a.out.display());
    Ok(())
}

fn run_plot(a: &Plot) -> Result<()> {
    // Reports sharing a label, e.g. one per fine-tuned task, become one series.
    let mut series: Vec<EvalReport> = Vec::new();
    for path in &a.reports {
        let r = EvalReport::load(path)?;
        match series.iter_mut().find(|s| s.label == r.label) {
            Some(s) => {
                let mut tasks = std::mem::take(&mut s.tasks);
                tasks.extend(r.tasks);
                *s = EvalReport::new(&s.label, s.config.clone(), tasks, s.run_config.clone());
            }
            None => series.push(r),
        }
    }
    let refs: Vec<&EvalReport> = series.iter().collect();
    fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    for (split, name, title) in [
        (Split::Test, "scores_test.svg", "Normalized Average, TEST tasks"),
        (Split::Train, "scores_train.svg", "Normalized Average, TRAIN tasks"),
    ] {
        if refs.iter().any(|r| r.tasks.iter().any(|t| t.split == split)) {
            plot::score_bars(&refs, Some(split), title, &a.out.join(name))?;
            written.push(name);
        }
    }
    if let Some(s) = &a.sweep {
        plot::sweep_curve(&SweepReport::load(s)?, &a.out.join("sweep.svg"))?;
        written.push("sweep.svg");
    }
    info!("wrote {} to {}", written.join(", "), a.out.display());
    Ok(())
}

fn info_cmd(cfg: &RunConfig) -> Result<()> {
    let mut model = cfg.model.clone();
    let rank = cfg.finetune.lora.rank;
    model.lora = Some(cfg.finetune.lora);
    let b: ParamBreakdown = model.param_breakdown();
    let c = &model.backbone;
    println!(
        "profile {:?}: {} layers, d_model {}, {} heads, context {}, {} memory slots, LoRA rank {rank}",
        cfg.profile, c.layers, c.d_model, c.heads, c.context, model.memory.slots
    );
    let total = b.total();
    println!("{:<10} {:>12} {:>8}", "module", "params", "share");
    for (name, n) in b.rows() {
        println!("{name:<10} {n:>12} {:>7.2}%", 100.0 * n as f64 / total as f64);
    }
    println!("{:<10} {total:>12} {:>7.2}%", "total", 100.0);
    let d = c.d_model;
    println!(
        "adapters: 5 projections x 2 x {d} x {rank} = {} trainable during fine-tuning",
        lora::adapter_count(d, rank)
    );
    if d == 512 && rank == 4 {
        println!(
            "published fine-tuning budget: {PUBLISHED_ADAPTER_PARAMS} ({:.1}x this count, not reproduced by five rank-4 adapters on 512-dim projections)",
            PUBLISHED_ADAPTER_PARAMS as f64 / b.adapters as f64
        );
    }
    Ok(())
}
