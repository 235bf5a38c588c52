//! Episodes, return-to-go annotation, fixed-length segmentation and the
//! JSON-Lines dataset format.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One episode. `states`, `actions` and `rewards` all have the episode
/// length `H ≥ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.actions.len();
        if h == 0 {
            return Err(Error::contract("trajectory is empty"));
        }
        if self.states.len() != h || self.rewards.len() != h {
            return Err(Error::contract(format!(
                "trajectory length mismatch: {} states, {} actions, {} rewards",
                self.states.len(),
                h,
                self.rewards.len()
            )));
        }
        Ok(())
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// Undiscounted suffix sums, accumulated from the end of the episode:
/// `out[t] = rewards[t] + out[t + 1]`.
pub fn return_to_go(traj: &Trajectory) -> Result<Vec<f64>> {
    traj.validate()?;
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for t in (0..traj.len()).rev() {
        acc = traj.rewards[t] + acc;
        out[t] = acc;
    }
    Ok(out)
}

/// `K` consecutive timesteps of an episode. Positions flagged in `pad_mask`
/// are right-padding and carry zero state, action 0, zero reward and rtg.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub rtg: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<u32>,
    pub rewards: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.pad_mask.iter().filter(|p| !**p).count()
    }
}

/// Cuts an episode into non-overlapping windows of `k` steps. Return-to-go
/// is computed over the whole episode before cutting; the final window is
/// right-padded.
pub fn segment(traj: &Trajectory, k: usize) -> Result<Vec<Segment>> {
    if k == 0 {
        return Err(Error::contract("segment length K must be at least 1"));
    }
    let rtg = return_to_go(traj)?;
    let dim = traj.state_dim();
    let mut out = Vec::with_capacity(traj.len().div_ceil(k));
    for start in (0..traj.len()).step_by(k) {
        let end = (start + k).min(traj.len());
        let pad = k - (end - start);
        let mut seg = Segment {
            rtg: rtg[start..end].to_vec(),
            states: traj.states[start..end].to_vec(),
            actions: traj.actions[start..end].to_vec(),
            rewards: traj.rewards[start..end].to_vec(),
            timesteps: (start..end).collect(),
            pad_mask: vec![false; end - start],
        };
        seg.rtg.extend(std::iter::repeat(0.0).take(pad));
        seg.states.extend(std::iter::repeat(vec![0.0; dim]).take(pad));
        seg.actions.extend(std::iter::repeat(0).take(pad));
        seg.rewards.extend(std::iter::repeat(0.0).take(pad));
        seg.timesteps.extend(std::iter::repeat(0).take(pad));
        seg.pad_mask.extend(std::iter::repeat(true).take(pad));
        out.push(seg);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub task_id: String,
    pub episodes: usize,
    pub source_policy: String,
    pub files: Vec<String>,
    pub mean_return: f64,
    pub max_return: f64,
    /// Configuration of the run that produced the dataset.
    #[serde(default)]
    pub run_config: Value,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{}: dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// `data/foo.jsonl` → `data/foo.manifest.json`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    let stem = dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dataset.with_file_name(format!("{stem}.manifest.json"))
}

/// Writes one episode per line plus a sibling manifest.
pub fn write_dataset(
    trajs: &[Trajectory],
    path: &Path,
    task_id: &str,
    source_policy: &str,
    run_config: Value,
) -> Result<DatasetManifest> {
    for t in trajs {
        t.validate()?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;

    let returns: Vec<f64> = trajs.iter().map(Trajectory::total_return).collect();
    let (mean_return, max_return) = if returns.is_empty() {
        (0.0, 0.0)
    } else {
        (
            returns.iter().sum::<f64>() / returns.len() as f64,
            returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        task_id: task_id.to_owned(),
        episodes: trajs.len(),
        source_policy: source_policy.to_owned(),
        files: vec![path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default()],
        mean_return,
        max_return,
        run_config,
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads a JSON-Lines dataset. When the sibling manifest exists its format
/// version and episode count are checked.
pub fn read_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let manifest = {
        let mp = manifest_path(path);
        if mp.exists() {
            Some(DatasetManifest::load(&mp)?)
        } else {
            None
        }
    };
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg,
        };
        let t: Trajectory = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        t.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(t);
    }
    if let Some(m) = manifest {
        if m.episodes != out.len() {
            return Err(Error::Format(format!(
                "{}: manifest lists {} episodes, file holds {}",
                path.display(),
                m.episodes,
                out.len()
            )));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    fn traj(rewards: Vec<f64>) -> Trajectory {
        let h = rewards.len();
        Trajectory {
            task_id: "t".into(),
            states: (0..h).map(|i| vec![i as f64, 1.0]).collect(),
            actions: (0..h).map(|i| (i % 4) as u32).collect(),
            rewards,
        }
    }

    #[test]
    fn rtg_examples() {
        assert_eq!(return_to_go(&traj(vec![0.0; 3])).unwrap(), vec![0.0; 3]);
        assert_eq!(return_to_go(&traj(vec![1.0, 2.0, 3.0])).unwrap(), vec![6.0, 5.0, 3.0]);
    }

    #[test]
    fn rtg_of_empty_is_contract_error() {
        assert!(matches!(return_to_go(&traj(vec![])), Err(Error::Contract(_))));
    }

    #[test]
    fn rtg_recurrence_oracle_on_random_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let rewards: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rtg = return_to_go(&traj(rewards.clone())).unwrap();
        let right_fold = rewards.iter().rev().fold(0.0, |acc, r| r + acc);
        assert_eq!(rtg[0], right_fold);
        assert!((rtg[0] - rewards.iter().sum::<f64>()).abs() < 1e-12);
        for t in 0..49 {
            assert_eq!(rtg[t], rewards[t] + rtg[t + 1]);
        }
    }

    #[test]
    fn segmentation_examples() {
        let s = segment(&traj(vec![1.0; 28]), 28).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].valid_count(), 28);

        let s = segment(&traj(vec![1.0; 30]), 28).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].pad_mask.iter().filter(|p| **p).count(), 26);
        assert_eq!(s[1].timesteps[..2], [28, 29]);
        assert_eq!(s[1].states[5], vec![0.0, 0.0]);

        let t = traj(vec![0.5, -1.0, 2.0, 0.25, 1.0]);
        let s = segment(&t, 28).unwrap();
        let rtg = return_to_go(&t).unwrap();
        assert_eq!(s[0].rtg[..5], rtg[..]);
        assert!(s[0].rtg[5..].iter().all(|r| *r == 0.0));
    }

    #[test]
    fn zero_k_rejected() {
        assert!(matches!(segment(&traj(vec![1.0]), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn dataset_roundtrip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        let m = write_dataset(&[], &p, "t0", "bfs", Value::Null).unwrap();
        assert_eq!(m.episodes, 0);
        assert!(read_dataset(&p).unwrap().is_empty());

        let p = dir.path().join("one.jsonl");
        let t = traj(vec![0.1, 0.2, -0.3]);
        write_dataset(std::slice::from_ref(&t), &p, "t0", "bfs", Value::Null).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), vec![t]);
    }

    #[test]
    fn hundred_random_trajectories_reserialize_to_identical_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let trajs: Vec<Trajectory> = (0..100)
            .map(|_| {
                let h = rng.gen_range(1..40);
                Trajectory {
                    task_id: "rand".into(),
                    states: (0..h).map(|_| (0..5).map(|_| rng.gen::<f64>() * 1e3 - 5e2).collect()).collect(),
                    actions: (0..h).map(|_| rng.gen_range(0..4)).collect(),
                    rewards: (0..h).map(|_| rng.gen::<f64>() - 0.5).collect(),
                }
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_dataset(&trajs, &a, "rand", "random", Value::Null).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, trajs);
        write_dataset(&back, &b, "rand", "random", Value::Null).unwrap();
        let h = |p: &Path| Sha256::digest(fs::read(p).unwrap());
        assert_eq!(h(&a), h(&b));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let good = serde_json::to_string(&traj(vec![1.0])).unwrap();
        fs::write(&p, format!("{good}\n{{\"task_id\": 3}}\n")).unwrap();
        match read_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.jsonl");
        write_dataset(&[traj(vec![1.0])], &p, "t", "bfs", Value::Null).unwrap();
        let mp = manifest_path(&p);
        let text = fs::read_to_string(&mp)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        fs::write(&mp, text).unwrap();
        assert!(matches!(read_dataset(&p), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn rtg_differences_recover_dyadic_rewards(ints in prop::collection::vec(-512i32..512, 1..80)) {
            // multiples of 1/64 keep every partial sum exactly representable
            let rewards: Vec<f64> = ints.iter().map(|&i| f64::from(i) / 64.0).collect();
            let rtg = return_to_go(&traj(rewards.clone())).unwrap();
            for t in 0..rewards.len() - 1 {
                prop_assert_eq!(rtg[t] - rtg[t + 1], rewards[t]);
            }
            prop_assert_eq!(*rtg.last().unwrap(), *rewards.last().unwrap());
        }

        #[test]
        fn segments_reassemble_episode(h in 1usize..70, k in 1usize..20, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = traj((0..h).map(|_| rng.gen_range(0.0..1.0)).collect());
            let segs = segment(&t, k).unwrap();
            let mut states = Vec::new();
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            for s in &segs {
                prop_assert_eq!(s.len(), k);
                for i in (0..k).filter(|&i| !s.pad_mask[i]) {
                    states.push(s.states[i].clone());
                    actions.push(s.actions[i]);
                    rewards.push(s.rewards[i]);
                }
                // non-negative rewards: rtg non-increasing over valid positions
                let valid: Vec<f64> = (0..k).filter(|&i| !s.pad_mask[i]).map(|i| s.rtg[i]).collect();
                prop_assert!(valid.windows(2).all(|w| w[0] >= w[1]));
            }
            prop_assert_eq!(states, t.states);
            prop_assert_eq!(actions, t.actions);
            prop_assert_eq!(rewards, t.rewards);
        }
    }
}
