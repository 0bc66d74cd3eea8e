//! Experiment orchestration and persistence.
//!
//! Output layout under the run directory:
//!
//! ```text
//! record.json
//! accuracy_matrix.csv          all trials, with a seed column
//! config.toml                  the resolved config
//! trial_<seed>/manifest.json
//! trial_<seed>/accuracy_matrix.csv
//! trial_<seed>/checkpoints/task_<τ>.ckpt
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use ucl_core::config::RunConfig;
use ucl_core::data::{DatasetId, ImageSet};
use ucl_core::eval::{evaluate_task, AccuracyMatrix};
use ucl_core::experiment::{run_trial, Corpus, TrialObserver, TrialStart};
use ucl_core::rng::{keyed_rng, PROBE};
use ucl_core::strategies::Learner;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Progress};
use crate::config_file::config_to_toml;
use crate::datasets::{load_corpus, load_ood_eval_set, resolve_data_root};
use crate::error::{IoContext, Result, UclError};
use crate::manifest::{write_manifest, StreamManifest};
use crate::record::{
    read_record_dir, trials_csv, write_record, Environment, MeanStd, RunRecord, Summary, TrialRecord, TrialStatus, RECORD_SCHEMA_VERSION,
};

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Continue each trial from its newest checkpoint in the output directory.
    pub resume: bool,
    /// Stop every trial after this task, as an interrupted run would.
    pub interrupt_after: Option<usize>,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { resume: true, interrupt_after: None, verbose: false }
    }
}

pub fn default_output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.as_ref().map_or_else(|| Path::new("runs").join(&cfg.name), PathBuf::from)
}

pub fn trial_dir_name(seed: u64) -> String {
    format!("trial_{seed}")
}

pub fn checkpoint_rel(seed: u64, task: usize) -> String {
    format!("{}/checkpoints/task_{task}.ckpt", trial_dir_name(seed))
}

struct Persist<'a> {
    root: &'a Path,
    seed: u64,
    checkpoints: Vec<(usize, String)>,
    matrix: Option<AccuracyMatrix>,
    epoch_losses: Vec<Vec<f64>>,
    interrupt_after: Option<usize>,
    verbose: bool,
    error: Option<UclError>,
}

impl TrialObserver for Persist<'_> {
    fn epoch_finished(&mut self, task: usize, epoch: usize, mean_loss: f64) {
        if self.verbose {
            eprintln!("seed {} task {task} epoch {epoch}: loss {mean_loss:.4}", self.seed);
        }
    }

    fn task_finished(
        &mut self,
        task: usize,
        learner: &Learner,
        matrix: &AccuracyMatrix,
        epoch_losses: &[Vec<f64>],
    ) -> ucl_core::Result<()> {
        let rel = checkpoint_rel(self.seed, task);
        let progress = Progress { matrix: matrix.clone(), epoch_losses: epoch_losses.to_vec(), completed: task + 1 };
        if let Err(e) = save_checkpoint(&self.root.join(&rel), learner, self.seed, &progress) {
            let msg = e.to_string();
            self.error = Some(e);
            return Err(ucl_core::Error::Missing(format!("checkpoint for task {task}: {msg}")));
        }
        self.checkpoints.retain(|(t, _)| *t != task);
        self.checkpoints.push((task, rel));
        self.matrix = Some(matrix.clone());
        self.epoch_losses = epoch_losses.to_vec();
        if self.verbose {
            eprintln!("seed {} task {task} done", self.seed);
        }
        if self.interrupt_after == Some(task) {
            return Err(ucl_core::Error::Interrupted(task));
        }
        Ok(())
    }
}

type ResumePoint = (Checkpoint, Vec<(usize, String)>);

/// Newest loadable checkpoint of a trial, with every older one that exists.
fn find_resume_point(root: &Path, cfg: &RunConfig, seed: u64) -> Result<Option<ResumePoint>> {
    let dir = root.join(trial_dir_name(seed)).join("checkpoints");
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut tasks: Vec<usize> = fs::read_dir(&dir)
        .at(&dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("task_")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .collect();
    tasks.sort_unstable();
    let Some(&last) = tasks.last() else { return Ok(None) };
    let ck = load_checkpoint(&root.join(checkpoint_rel(seed, last)))?;
    if ck.trial_seed != seed || ck.bundle.config() != &cfg.arch_for_trial(seed) {
        return Err(UclError::Usage(format!(
            "{} holds checkpoints from a different configuration; use a fresh output directory",
            dir.display()
        )));
    }
    let existing = tasks.into_iter().filter(|&t| t <= last).map(|t| (t, checkpoint_rel(seed, t))).collect();
    Ok(Some((ck, existing)))
}

fn run_one_trial(cfg: &RunConfig, corpus: &Corpus, root: &Path, seed: u64, opts: &RunOptions) -> TrialRecord {
    let started = Instant::now();
    let trial_dir = root.join(trial_dir_name(seed));
    let mut persist = Persist {
        root,
        seed,
        checkpoints: Vec::new(),
        matrix: None,
        epoch_losses: Vec::new(),
        interrupt_after: opts.interrupt_after,
        verbose: opts.verbose,
        error: None,
    };
    let mut manifest = None;
    let mut resumed_from_task = None;
    let outcome = (|| -> Result<ucl_core::experiment::TrialOutcome> {
        fs::create_dir_all(&trial_dir).at(&trial_dir)?;
        let stream = corpus.stream(cfg, seed)?;
        let mpath = trial_dir.join("manifest.json");
        write_manifest(&mpath, &StreamManifest::new(stream, seed, corpus.train.num_classes))?;
        manifest = Some(format!("{}/manifest.json", trial_dir_name(seed)));
        let start = match opts.resume.then(|| find_resume_point(root, cfg, seed)).transpose()?.flatten() {
            Some((ck, existing)) => {
                resumed_from_task = Some(ck.task);
                persist.checkpoints = existing;
                persist.matrix = Some(ck.progress.matrix.clone());
                persist.epoch_losses = ck.progress.epoch_losses.clone();
                let (matrix, epoch_losses, completed) =
                    (ck.progress.matrix.clone(), ck.progress.epoch_losses.clone(), ck.progress.completed);
                TrialStart::Resume { learner: Box::new(ck.into_learner(cfg)?), matrix, epoch_losses, completed }
            }
            None => TrialStart::Fresh,
        };
        match run_trial(cfg, corpus, seed, start, &mut persist) {
            Ok(o) => Ok(o),
            Err(e) => Err(persist.error.take().unwrap_or(UclError::Core(e))),
        }
    })();
    let (status, error, matrix, average_accuracy, forgetting, epoch_losses) = match outcome {
        Ok(o) => (TrialStatus::Completed, None, Some(o.matrix), Some(o.average_accuracy), o.forgetting, o.epoch_losses),
        Err(e) => (TrialStatus::Aborted, Some(e.to_string()), persist.matrix.clone(), None, None, persist.epoch_losses.clone()),
    };
    if let Some(m) = &matrix {
        let p = trial_dir.join("accuracy_matrix.csv");
        if let Err(e) = fs::write(&p, m.to_csv()) {
            eprintln!("warning: {}: {e}", p.display());
        }
    }
    persist.checkpoints.sort_unstable();
    TrialRecord {
        seed,
        status,
        error,
        manifest,
        accuracy_matrix: matrix,
        average_accuracy,
        forgetting,
        epoch_losses,
        checkpoints: persist.checkpoints,
        resumed_from_task,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    }
}

/// Runs every trial of `cfg` on an already loaded corpus and writes the
/// record. Aborted trials are recorded, not raised.
pub fn run_experiment_on(cfg: &RunConfig, corpus: &Corpus, out: &Path, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let environment = Environment::current();
    fs::create_dir_all(out).at(out)?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config_to_toml(cfg)?).at(&cfg_path)?;
    let trials: Vec<TrialRecord> = cfg.trial_seeds().into_iter().map(|s| run_one_trial(cfg, corpus, out, s, opts)).collect();
    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        config: cfg.clone(),
        few_shot_cap: None,
        summary: Summary::of(&trials),
        trials,
        environment,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    persist_record(out, &record)?;
    Ok(record)
}

fn persist_record(out: &Path, record: &RunRecord) -> Result<()> {
    write_record(&out.join("record.json"), record)?;
    let csv = out.join("accuracy_matrix.csv");
    fs::write(&csv, trials_csv(record)).at(&csv)
}

pub fn run_experiment(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    run_experiment_on(cfg, &corpus, out, opts)
}

/// One experiment per per-task cap, each in `out/cap_<n>`.
pub fn run_fewshot_sweep(cfg: &RunConfig, caps: &[usize], out: &Path, opts: &RunOptions) -> Result<Vec<RunRecord>> {
    if caps.is_empty() {
        return Err(UclError::Usage("few-shot sweep needs at least one cap".into()));
    }
    cfg.validate()?;
    let corpus = load_corpus(cfg)?;
    let mut records = Vec::with_capacity(caps.len());
    for &cap in caps {
        let c = RunConfig { per_task_cap: Some(cap), ..cfg.clone() };
        let dir = out.join(format!("cap_{cap}"));
        let mut r = run_experiment_on(&c, &corpus, &dir, opts)?;
        r.few_shot_cap = Some(cap);
        persist_record(&dir, &r)?;
        records.push(r);
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    pub dataset: DatasetId,
    pub trial_seed: u64,
    pub accuracy: f64,
    pub bank_size: usize,
    pub query_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodTable {
    pub rows: Vec<OodRow>,
    pub summary: Vec<(DatasetId, MeanStd)>,
}

impl OodTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,trial_seed,accuracy,bank_size,query_size\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.dataset, r.trial_seed, r.accuracy, r.bank_size, r.query_size));
        }
        s
    }
}

/// A fixed-seed subset of at most `n` examples, in index order.
pub fn subsample(set: &ImageSet, n: Option<usize>) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..set.len()).collect();
    if let Some(n) = n.filter(|&n| n < set.len()) {
        ids.shuffle(&mut keyed_rng(0, &[PROBE, set.len() as u64]));
        ids.truncate(n);
        ids.sort_unstable();
    }
    ids
}

/// Final checkpoint of a completed trial.
pub fn final_checkpoint_path(dir: &Path, trial: &TrialRecord) -> Result<PathBuf> {
    let rel = trial.final_checkpoint().ok_or_else(|| UclError::MissingCheckpoint(dir.join(checkpoint_rel(trial.seed, 0))))?;
    let p = dir.join(rel);
    if !p.is_file() {
        return Err(UclError::MissingCheckpoint(p));
    }
    Ok(p)
}

/// KNN accuracy of each trial's frozen final encoder on other datasets: the
/// bank is the dataset's training split, queries its test split. `limit`
/// caps both.
pub fn run_ood_eval(dir: &Path, datasets: &[DatasetId], data_root: Option<&Path>, limit: Option<usize>) -> Result<OodTable> {
    let record = read_record_dir(dir)?;
    let root = match data_root {
        Some(r) => Some(r.to_path_buf()),
        None => resolve_data_root(record.config.data_root.as_deref()).ok(),
    };
    let arch = &record.config.arch;
    let mut sets = Vec::new();
    for &d in datasets {
        let set = load_ood_eval_set(d, root.as_deref(), arch.input_channels, arch.input_size)?;
        let bank = subsample(&set.train, limit);
        let queries = subsample(&set.test, limit);
        sets.push((set, bank, queries));
    }
    let mut rows = Vec::new();
    for trial in record.trials.iter().filter(|t| t.is_completed()) {
        let ck = load_checkpoint(&final_checkpoint_path(dir, trial)?)?;
        for (set, bank, queries) in &sets {
            let accuracy = evaluate_task(&ck.bundle, &set.train, bank, &set.test, queries, &ck.normalization, &record.config.knn)?;
            rows.push(OodRow { dataset: set.dataset, trial_seed: trial.seed, accuracy, bank_size: bank.len(), query_size: queries.len() });
        }
    }
    if rows.is_empty() {
        return Err(UclError::Incomplete("no completed trial to evaluate".into()));
    }
    let summary = datasets
        .iter()
        .filter_map(|&d| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.dataset == d).map(|r| r.accuracy).collect();
            MeanStd::of(&acc).map(|m| (d, m))
        })
        .collect();
    let table = OodTable { rows, summary };
    let (json, csv) = (dir.join("ood.json"), dir.join("ood.csv"));
    fs::write(&json, serde_json::to_vec_pretty(&table)?).at(&json)?;
    fs::write(&csv, table.to_csv()).at(&csv)?;
    Ok(table)
}
