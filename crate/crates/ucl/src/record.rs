//! The persisted outcome of an experiment and its JSON schema.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use ucl_core::config::RunConfig;
use ucl_core::eval::AccuracyMatrix;

use crate::error::{IoContext, Result, UclError};

pub const RECORD_SCHEMA_VERSION: u32 = 1;
pub const RECORD_SCHEMA: &str = include_str!("../schema/run_record.v1.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub seed: u64,
    pub status: TrialStatus,
    pub error: Option<String>,
    /// Paths are relative to the record directory.
    pub manifest: Option<String>,
    /// Partial when the trial aborted part-way.
    pub accuracy_matrix: Option<AccuracyMatrix>,
    pub average_accuracy: Option<f64>,
    pub forgetting: Option<f64>,
    pub epoch_losses: Vec<Vec<f64>>,
    /// `[task, path]` for every task boundary checkpoint written.
    pub checkpoints: Vec<(usize, String)>,
    pub resumed_from_task: Option<usize>,
    pub wall_clock_seconds: f64,
}

impl TrialRecord {
    pub fn is_completed(&self) -> bool {
        self.status == TrialStatus::Completed
    }

    pub fn final_checkpoint(&self) -> Option<&str> {
        self.checkpoints.iter().max_by_key(|(t, _)| *t).map(|(_, p)| p.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over the trials.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt(), n: values.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub completed_trials: usize,
    pub aborted_trials: usize,
    pub average_accuracy: Option<MeanStd>,
    pub forgetting: Option<MeanStd>,
}

impl Summary {
    pub fn of(trials: &[TrialRecord]) -> Self {
        let done: Vec<&TrialRecord> = trials.iter().filter(|t| t.is_completed()).collect();
        let acc: Vec<f64> = done.iter().filter_map(|t| t.average_accuracy).collect();
        let fgt: Vec<f64> = done.iter().filter_map(|t| t.forgetting).collect();
        Self {
            completed_trials: done.len(),
            aborted_trials: trials.len() - done.len(),
            average_accuracy: MeanStd::of(&acc),
            forgetting: MeanStd::of(&fgt),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    pub ucl_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub started_unix_seconds: u64,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            ucl_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            started_unix_seconds: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    /// Set on records produced by a few-shot sweep.
    pub few_shot_cap: Option<usize>,
    pub trials: Vec<TrialRecord>,
    pub summary: Summary,
    pub environment: Environment,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn any_aborted(&self) -> bool {
        self.trials.iter().any(|t| !t.is_completed())
    }

    /// The record with timing and environment fields cleared: what a rerun
    /// of the same config must reproduce exactly.
    pub fn deterministic_view(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        r.environment =
            Environment { ucl_version: String::new(), os: String::new(), arch: String::new(), threads: 0, started_unix_seconds: 0 };
        for t in &mut r.trials {
            t.wall_clock_seconds = 0.0;
            t.resumed_from_task = None;
        }
        r
    }
}

fn validator() -> &'static jsonschema::Validator {
    static V: OnceLock<jsonschema::Validator> = OnceLock::new();
    V.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(RECORD_SCHEMA).expect("bundled schema is JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    })
}

/// Checks a JSON document against the record schema.
pub fn validate_record_json(value: &serde_json::Value) -> Result<()> {
    let errors: Vec<String> = validator().iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(UclError::Schema(errors.join("; ")))
    }
}

pub fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let value = serde_json::to_value(record)?;
    validate_record_json(&value)?;
    fs::write(path, serde_json::to_vec_pretty(&value)?).at(path)
}

pub fn read_record(path: &Path) -> Result<RunRecord> {
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path).at(path)?)?;
    validate_record_json(&value)?;
    Ok(serde_json::from_value(value)?)
}

/// `record.json` inside `dir`, or `dir` itself when it names a file.
pub fn read_record_dir(dir: &Path) -> Result<RunRecord> {
    if dir.is_file() {
        read_record(dir)
    } else {
        read_record(&dir.join("record.json"))
    }
}

/// One CSV for all trials: a `seed` column ahead of the matrix columns.
pub fn trials_csv(record: &RunRecord) -> String {
    let t = record.config.num_tasks;
    let mut s = String::from("seed,tau");
    for i in 0..t {
        s.push_str(&format!(",task_{i}"));
    }
    s.push('\n');
    for trial in &record.trials {
        let Some(m) = &trial.accuracy_matrix else { continue };
        for tau in 0..m.num_tasks {
            s.push_str(&format!("{},{tau}", trial.seed));
            for i in 0..m.num_tasks {
                s.push(',');
                if let Some(a) = m.get(tau, i) {
                    s.push_str(&a.to_string());
                }
            }
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample() -> RunRecord {
        let trial = TrialRecord {
            seed: 0,
            status: TrialStatus::Completed,
            error: None,
            manifest: Some("trial_0/manifest.json".into()),
            accuracy_matrix: Some(AccuracyMatrix::from_rows(&[vec![0.9], vec![0.8, 0.7]]).unwrap()),
            average_accuracy: Some(0.75),
            forgetting: Some(0.1),
            epoch_losses: vec![vec![-0.5], vec![-0.6]],
            checkpoints: vec![(0, "trial_0/checkpoints/task_0.ckpt".into()), (1, "trial_0/checkpoints/task_1.ckpt".into())],
            resumed_from_task: None,
            wall_clock_seconds: 1.5,
        };
        let trials = vec![trial.clone(), TrialRecord { seed: 1, average_accuracy: Some(0.85), forgetting: Some(0.3), ..trial }];
        RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            config: RunConfig { num_tasks: 2, ..RunConfig::default() },
            few_shot_cap: None,
            summary: Summary::of(&trials),
            trials,
            environment: Environment::current(),
            wall_clock_seconds: 3.0,
        }
    }

    #[test]
    fn summary_uses_population_std() {
        let r = sample();
        let a = r.summary.average_accuracy.unwrap();
        assert!((a.mean - 0.8).abs() < 1e-12 && (a.std - 0.05).abs() < 1e-12);
        assert_eq!(r.summary.forgetting.unwrap().n, 2);
        assert_eq!(MeanStd::of(&[]), None);
    }

    #[test]
    fn round_trip_through_schema() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("record.json");
        let r = sample();
        write_record(&p, &r).unwrap();
        assert_eq!(read_record_dir(dir.path()).unwrap(), r);
    }

    #[test]
    fn schema_rejects_drift() {
        let good = serde_json::to_value(sample()).unwrap();
        validate_record_json(&good).unwrap();
        let mut v = good.clone();
        v["schema_version"] = 2.into();
        assert!(validate_record_json(&v).is_err());
        let mut v = good.clone();
        v["trials"][0]["status"] = "paused".into();
        assert!(validate_record_json(&v).is_err());
        let mut v = good.clone();
        v["trials"][0]["extra"] = 1.into();
        assert!(validate_record_json(&v).is_err());
        let mut v = good;
        v["summary"].as_object_mut().unwrap().remove("forgetting");
        assert!(validate_record_json(&v).is_err());
    }

    #[test]
    fn csv_has_a_seed_column() {
        let csv = trials_csv(&sample());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seed,tau,task_0,task_1");
        assert_eq!(lines[1], "0,0,0.9,");
        assert_eq!(lines.len(), 5);
    }
}
