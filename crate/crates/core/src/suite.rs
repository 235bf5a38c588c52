//! On-disk task suite: one dataset per task plus `suite.json`, which holds
//! the task specs and their normalization anchors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::TaskAnchors;
use crate::tasks::{generate_dataset, Split, TaskSpec};
use crate::training::TaskData;
use crate::trajectory::read_dataset;

pub const SUITE_FILE: &str = "suite.json";
pub const SUITE_FORMAT_VERSION: u32 = 1;

/// Random-policy anchors of task `i` use seed `data_seed + i + ANCHOR_SEED_OFFSET`.
const ANCHOR_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub spec: TaskSpec,
    pub anchors: TaskAnchors,
    /// Dataset file name, relative to the suite directory.
    pub dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteData {
    pub format_version: u32,
    pub entries: Vec<SuiteEntry>,
    pub run_config: Value,
}

impl SuiteData {
    /// Generates every dataset of the configured suite into `dir`.
    pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let run_config = cfg.to_json();
        let s = &cfg.suite;
        let mut entries = Vec::new();
        for (i, spec) in s.tasks().into_iter().enumerate() {
            let dataset = format!("{}.jsonl", spec.task_id);
            let seed = s.data_seed_of(i);
            let m = generate_dataset(&spec, s.episodes, &s.epsilons, seed, &dir.join(&dataset), run_config.clone())?;
            let anchors = TaskAnchors::compute(&spec, m.mean_return, m.max_return, seed.wrapping_add(ANCHOR_SEED_OFFSET))?;
            entries.push(SuiteEntry { spec, anchors, dataset });
        }
        let suite = SuiteData {
            format_version: SUITE_FORMAT_VERSION,
            entries,
            run_config,
        };
        fs::write(dir.join(SUITE_FILE), serde_json::to_string_pretty(&suite)?)?;
        Ok(suite)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SUITE_FILE);
        if !path.exists() {
            return Err(Error::MissingData(vec![format!("{} (run gen-data first)", path.display())]));
        }
        let suite: SuiteData = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if suite.format_version != SUITE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "suite format version {} (expected {SUITE_FORMAT_VERSION})",
                suite.format_version
            )));
        }
        Ok(suite)
    }

    pub fn entry(&self, task_id: &str) -> Result<&SuiteEntry> {
        self.entries
            .iter()
            .find(|e| e.spec.task_id == task_id)
            .ok_or_else(|| Error::MissingData(vec![task_id.to_owned()]))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SuiteEntry> {
        self.entries.iter().filter(move |e| e.spec.split == split)
    }

    /// Selected entries, or all when `ids` is empty. Unknown ids are
    /// reported together.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&SuiteEntry>> {
        if ids.is_empty() {
            return Ok(self.entries.iter().collect());
        }
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| self.entries.iter().all(|e| &e.spec.task_id != *id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(missing));
        }
        Ok(ids.iter().filter_map(|id| self.entry(id).ok()).collect())
    }

    /// Segmented datasets of `entries`, optionally only the leading
    /// `fraction` of each one's episodes. Fails up front listing every task
    /// whose dataset file is absent.
    pub fn load_data(dir: &Path, entries: &[&SuiteEntry], k: usize, fraction: Option<f64>) -> Result<Vec<TaskData>> {
        let paths: Vec<PathBuf> = entries.iter().map(|e| dir.join(&e.dataset)).collect();
        let missing: Vec<String> = entries
            .iter()
            .zip(&paths)
            .filter(|(_, p)| !p.exists())
            .map(|(e, _)| e.spec.task_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(missing));
        }
        entries
            .iter()
            .zip(&paths)
            .map(|(e, p)| {
                let mut trajs = read_dataset(p)?;
                if let Some(f) = fraction {
                    trajs.truncate(subset_size(trajs.len(), f));
                }
                TaskData::new(&e.spec.task_id, &trajs, k)
            })
            .collect()
    }

    pub fn eval_tasks(entries: &[&SuiteEntry]) -> Vec<(TaskSpec, TaskAnchors)> {
        entries.iter().map(|e| (e.spec.clone(), e.anchors.clone())).collect()
    }
}

/// Episodes kept out of `available` for a `fraction` subset; at least one.
/// Episodes are generated i.i.d., so the leading ones are a random sample.
pub fn subset_size(available: usize, fraction: f64) -> usize {
    ((available as f64 * fraction).round() as usize).clamp(1, available.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::desk();
        c.suite.grid_size = 4;
        c.suite.episodes = 5;
        c.suite.train_tasks = 2;
        c.suite.test_tasks = 1;
        c
    }

    #[test]
    fn generate_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let made = SuiteData::generate(&small(), dir.path()).unwrap();
        let back = SuiteData::load(dir.path()).unwrap();
        assert_eq!(made, back);
        assert_eq!(back.split(Split::Test).count(), 1);
        let all: Vec<&SuiteEntry> = back.entries.iter().collect();
        let data = SuiteData::load_data(dir.path(), &all, 4, Some(0.4)).unwrap();
        assert_eq!(data.len(), 3);
        assert_eq!((subset_size(5, 0.4), subset_size(200, 0.1), subset_size(3, 0.01)), (2, 20, 1));
    }

    #[test]
    fn missing_datasets_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let suite = SuiteData::generate(&small(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(&suite.entries[0].dataset)).unwrap();
        fs::remove_file(dir.path().join(&suite.entries[2].dataset)).unwrap();
        let all: Vec<&SuiteEntry> = suite.entries.iter().collect();
        match SuiteData::load_data(dir.path(), &all, 4, None) {
            Err(Error::MissingData(ids)) => assert_eq!(ids, vec!["nav-00".to_owned(), "nav-02".to_owned()]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(suite.select(&["nav-09".into()]), Err(Error::MissingData(_))));
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        SuiteData::generate(&small(), a.path()).unwrap();
        SuiteData::generate(&small(), b.path()).unwrap();
        for f in ["nav-00.jsonl", "nav-02.manifest.json", SUITE_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
