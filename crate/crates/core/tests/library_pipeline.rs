use dtmem_core::config::RunConfig;
use dtmem_core::evaluation::{evaluate_suite, read_returns_csv, EvalConfig, Policy};
use dtmem_core::suite::{SuiteData, SuiteEntry};
use dtmem_core::tasks::Split;
use dtmem_core::training::{finetune, pretrain, Checkpoint, MetricsLog, TrainConfig};

fn small() -> RunConfig {
    let mut c = RunConfig::desk();
    for (k, v) in [
        ("suite.grid_size", "4"),
        ("suite.train_tasks", "2"),
        ("suite.test_tasks", "1"),
        ("suite.episodes", "8"),
        ("model.backbone.d_model", "16"),
        ("model.backbone.heads", "2"),
        ("model.backbone.layers", "1"),
        ("model.backbone.context", "4"),
        ("model.memory.slots", "4"),
        ("train.steps", "20"),
        ("eval.runs", "4"),
    ] {
        c.set(k, v).unwrap();
    }
    c.validate().unwrap();
    c
}

#[test]
fn generate_train_save_load_evaluate() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let suite = SuiteData::generate(&cfg, dir.path()).unwrap();
    let train: Vec<&SuiteEntry> = suite.split(Split::Train).collect();
    let data = SuiteData::load_data(dir.path(), &train, 4, None).unwrap();

    let mut log = MetricsLog::new(5);
    let ckpt = pretrain(cfg.model.clone(), cfg.train.clone(), &data, cfg.to_json(), &mut log).unwrap();
    let path = dir.path().join("ckpt.json");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params.digest(|_| true), ckpt.params.digest(|_| true));
    assert_eq!(back.run_config, cfg.to_json());

    let entries: Vec<&SuiteEntry> = suite.entries.iter().collect();
    let tasks = SuiteData::eval_tasks(&entries);
    let eval = EvalConfig { runs: 4, ..EvalConfig::default() };
    let a = evaluate_suite(&Policy::from_checkpoint(&ckpt), &tasks, &eval, "a", cfg.to_json()).unwrap();
    let b = evaluate_suite(&Policy::from_checkpoint(&back), &tasks, &eval, "a", cfg.to_json()).unwrap();
    assert_eq!(a, b);
    assert!(a.tasks.iter().all(|t| t.top3 >= t.average));

    let csv = dir.path().join("returns.csv");
    a.write_returns_csv(&csv).unwrap();
    let raw = read_returns_csv(&csv).unwrap();
    for t in &a.tasks {
        let rets: Vec<f64> = raw[&t.task_id].iter().map(|r| r.1).collect();
        assert_eq!(rets, t.returns);
    }
}

#[test]
fn finetune_leaves_base_checkpoint_intact() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let suite = SuiteData::generate(&cfg, dir.path()).unwrap();
    let train: Vec<&SuiteEntry> = suite.split(Split::Train).collect();
    let test: Vec<&SuiteEntry> = suite.split(Split::Test).collect();
    let data = SuiteData::load_data(dir.path(), &train, 4, None).unwrap();
    let few = SuiteData::load_data(dir.path(), &test, 4, Some(cfg.suite.finetune_fraction)).unwrap();

    let base = pretrain(cfg.model.clone(), cfg.train.clone(), &data, cfg.to_json(), &mut MetricsLog::new(5)).unwrap();
    let before = base.params.digest(|_| true);
    let train_cfg = TrainConfig { steps: 10, lr: cfg.finetune.lr, ..base.train.clone() };
    let (tuned, report) = finetune(&base, cfg.finetune.lora, train_cfg, &few, cfg.to_json(), &mut MetricsLog::new(5)).unwrap();
    assert_eq!(base.params.digest(|_| true), before);
    assert_eq!(report.adapter_params, 5 * 2 * 16 * cfg.finetune.lora.rank);
    assert_eq!(tuned.params.trainable_count(), report.adapter_params);
}
