//! Run configuration: one merged view of every component's settings.
//!
//! Files and overrides use flat dotted keys (`"train.lr": 0.001`) that
//! mirror the nested structure below. Every artifact embeds the resolved
//! config as JSON.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::lora::LoraConfig;
use crate::memory::MemoryConfig;
use crate::model::ModelConfig;
use crate::tasks::{self, Dynamics, Family, TaskSpec, DEFAULT_EPSILONS, DEFAULT_GRID, NUM_ACTIONS};
use crate::training::TrainConfig;

pub const SEED_ENV: &str = "DTMEM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::config("profile", format!("unknown profile `{s}` (desk, paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub family: Family,
    pub base_seed: u64,
    pub train_tasks: usize,
    pub test_tasks: usize,
    pub grid_size: usize,
    /// Probability that a move is replaced by a random one; 0 gives
    /// deterministic dynamics.
    pub slip: f64,
    pub episodes: usize,
    pub epsilons: Vec<f64>,
    /// Dataset seed of task `i` is `data_seed + i`.
    pub data_seed: u64,
    /// Share of a TEST task's episodes used for fine-tuning.
    pub finetune_fraction: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            family: Family::GridNav,
            base_seed: 0,
            train_tasks: 10,
            test_tasks: 2,
            grid_size: DEFAULT_GRID,
            slip: 0.2,
            episodes: 200,
            epsilons: DEFAULT_EPSILONS.to_vec(),
            data_seed: 1000,
            finetune_fraction: 0.1,
        }
    }
}

impl SuiteConfig {
    pub fn dynamics(&self) -> Dynamics {
        if self.slip > 0.0 {
            Dynamics::Slippery(self.slip)
        } else {
            Dynamics::Standard
        }
    }

    pub fn tasks(&self) -> Vec<TaskSpec> {
        tasks::suite_with(
            self.family,
            self.base_seed,
            self.train_tasks,
            self.test_tasks,
            self.grid_size,
            self.dynamics(),
        )
    }

    pub fn data_seed_of(&self, index: usize) -> u64 {
        self.data_seed.wrapping_add(index as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lora: LoraConfig,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub slots: Vec<usize>,
    pub steps: usize,
}

/// Where a resolved config came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_file: Option<String>,
    pub overrides: Vec<String>,
    pub env_seed: Option<u64>,
    pub version: String,
    pub git_commit: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub provenance: Provenance,
}

impl RunConfig {
    pub fn desk() -> Self {
        let suite = SuiteConfig::default();
        let mut cfg = RunConfig {
            profile: Profile::Desk,
            model: ModelConfig {
                backbone: BackboneConfig {
                    layers: 2,
                    d_model: 64,
                    heads: 4,
                    context: 12,
                    dropout: 0.0,
                    action_vocab: NUM_ACTIONS,
                    state_dim: 0,
                    max_timestep: 0,
                },
                memory: MemoryConfig { slots: 64, rounds: 1 },
                heads_skip: false,
                lora: None,
            },
            suite,
            train: TrainConfig {
                steps: 6000,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig {
                lora: LoraConfig::default(),
                steps: 2000,
                lr: 3e-3,
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig {
                slots: vec![4, 16, 64],
                steps: 5000,
            },
            provenance: Provenance::default(),
        };
        cfg.sync();
        cfg
    }

    /// Model and optimiser settings of the published configuration.
    pub fn paper() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.profile = Profile::Paper;
        let b = &mut cfg.model.backbone;
        b.layers = 4;
        b.d_model = 512;
        b.heads = 8;
        b.context = 28;
        b.dropout = 0.1;
        cfg.model.memory.slots = 1290;
        cfg.train.lr = 1e-4;
        cfg.train.batch = 64;
        cfg.finetune.lr = 1e-4;
        cfg
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    /// Keeps fields that follow from the suite consistent with it.
    fn sync(&mut self) {
        let g = self.suite.grid_size;
        self.model.backbone.state_dim = tasks::state_dim(g);
        self.model.backbone.max_timestep = 4 * g * g;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let s = &self.suite;
        if s.grid_size < 2 {
            return Err(Error::config("suite.grid_size", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&s.slip) {
            return Err(Error::config("suite.slip", "must lie in [0, 1]"));
        }
        if s.train_tasks == 0 {
            return Err(Error::config("suite.train_tasks", "must be at least 1"));
        }
        if s.episodes == 0 || s.epsilons.is_empty() {
            return Err(Error::config("suite.episodes", "need at least one episode and one epsilon"));
        }
        if let Some(e) = s.epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::config("suite.epsilons", format!("{e} outside [0, 1]")));
        }
        if !(s.finetune_fraction > 0.0 && s.finetune_fraction <= 1.0) {
            return Err(Error::config("suite.finetune_fraction", "must lie in (0, 1]"));
        }
        if self.sweep.slots.len() < 2 || self.sweep.slots.contains(&0) {
            return Err(Error::config("sweep.slots", "need at least two positive slot counts"));
        }
        Ok(())
    }

    /// Everything except provenance, as `dotted.key → value`.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("provenance");
        }
        let mut out = BTreeMap::new();
        flatten("", &v, &mut out);
        out
    }

    /// Sets one dotted key. `raw` is read as JSON when it parses, as a
    /// bare string otherwise.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        self.set_value(key, value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        if key == "profile" {
            let p: Profile = serde_json::from_value(value).map_err(|e| Error::config(key, e.to_string()))?;
            let provenance = std::mem::take(&mut self.provenance);
            *self = RunConfig::for_profile(p);
            self.provenance = provenance;
            return Ok(());
        }
        if key == "provenance" || key.starts_with("provenance.") {
            return Err(Error::config(key, "provenance is not configurable"));
        }
        let mut tree = serde_json::to_value(&*self)?;
        let slot = key
            .split('.')
            .try_fold(&mut tree, |node, part| node.get_mut(part))
            .ok_or_else(|| Error::config(key, "unknown key"))?;
        // `null` options accept any shape; otherwise the kind must match.
        if !slot.is_null() && !value.is_null() && kind(slot) != kind(&value) && !(slot.is_f64() && value.is_number()) {
            return Err(Error::config(key, format!("expected {}, got {value}", kind(slot))));
        }
        *slot = value;
        let mut next: RunConfig = serde_json::from_value(tree).map_err(|e| Error::config(key, e.to_string()))?;
        next.sync();
        *self = next;
        Ok(())
    }

    /// Applies a JSON file of dotted keys. Nested objects are accepted
    /// and flattened. A `profile` key is applied first.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let v: Value = serde_json::from_str(&text)?;
        if !v.is_object() {
            return Err(Error::config("config", format!("{} is not a JSON object", path.display())));
        }
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        if let Some(p) = flat.remove("profile") {
            self.set_value("profile", p)?;
        }
        for (k, val) in flat {
            self.set_value(&k, val)?;
        }
        self.provenance.config_file = Some(path.display().to_string());
        Ok(())
    }

    /// Profile, then file, then `key=value` overrides, then `DTMEM_SEED`.
    pub fn resolve(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::for_profile(profile);
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
            cfg.set(k.trim(), v.trim())?;
            cfg.provenance.overrides.push(o.clone());
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            let seed = s
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{s}` is not an unsigned integer")))?;
            cfg.train.seed = seed;
            cfg.provenance.env_seed = Some(seed);
        }
        cfg.provenance.version = env!("CARGO_PKG_VERSION").to_owned();
        cfg.provenance.git_commit = git_commit();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_owned(), v.clone());
        }
    }
}

/// Nested JSON object from dotted keys.
pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (k, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = k.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted keys do not collide with leaves");
        }
        node.insert(parts[parts.len() - 1].to_owned(), v.clone());
    }
    Value::Object(root)
}

fn git_commit() -> Option<String> {
    let out = Command::new("git").args(["rev-parse", "--short", "HEAD"]).output().ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
        .filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_profile_is_valid_and_small() {
        let c = RunConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.model.backbone.state_dim, 51);
        let p = c.model.init_params(0).unwrap();
        assert!(p.count("") < 500_000);
    }

    #[test]
    fn paper_profile_values() {
        let c = RunConfig::paper();
        c.validate().unwrap();
        let b = &c.model.backbone;
        assert_eq!((b.layers, b.d_model, b.heads, b.context), (4, 512, 8, 28));
        assert_eq!(c.model.memory.slots, 1290);
        assert_eq!(c.train.lr, 1e-4);
    }

    #[test]
    fn flat_round_trip() {
        let c = RunConfig::desk();
        let flat = c.to_flat();
        assert_eq!(flat["train.lr"], serde_json::json!(1e-3));
        assert_eq!(flat["model.memory.slots"], serde_json::json!(64));
        let mut back: RunConfig = serde_json::from_value(unflatten(&flat)).unwrap();
        back.provenance = c.provenance.clone();
        assert_eq!(back, c);
    }

    #[test]
    fn set_dotted_keys() {
        let mut c = RunConfig::desk();
        c.set("train.lr", "0.01").unwrap();
        c.set("model.memory.slots", "16").unwrap();
        c.set("suite.family", "GRID_KEYDOOR").unwrap();
        c.set("suite.grid_size", "5").unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.memory.slots, 16);
        assert_eq!(c.suite.family, Family::GridKeyDoor);
        assert_eq!(c.model.backbone.state_dim, 27);
        c.set("train.lr", "1").unwrap();
        assert_eq!(c.train.lr, 1.0);
    }

    #[test]
    fn bad_keys_name_the_field() {
        let mut c = RunConfig::desk();
        let field = |e: Error| match e {
            Error::Config { field, .. } => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(c.set("train.nope", "1").unwrap_err()), "train.nope");
        assert_eq!(field(c.set("train.lr", "\"fast\"").unwrap_err()), "train.lr");
        assert_eq!(field(c.set("model.memory.slots", "-3").unwrap_err()), "model.memory.slots");
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"profile": "paper", "train.steps": 7, "eval": {"runs": 4}}"#).unwrap();
        let c = RunConfig::resolve(Profile::Desk, Some(&f), &["train.steps=9".into()]).unwrap();
        assert_eq!(c.profile, Profile::Paper);
        assert_eq!(c.train.steps, 9);
        assert_eq!(c.eval.runs, 4);
        assert_eq!(c.provenance.overrides, vec!["train.steps=9".to_owned()]);
        assert!(c.provenance.config_file.is_some());
    }

    #[test]
    fn validation_names_field() {
        let mut c = RunConfig::desk();
        c.suite.slip = 2.0;
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "suite.slip"));
    }
}
