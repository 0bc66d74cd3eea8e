//! Post-hoc analyses over the checkpoints of finished runs. Each writes a
//! JSON report that `plot` turns into figures.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ucl_core::analysis::{
    cka_report, feature_map_export, filter_normalized_direction, l2_param_distance, loss_landscape_grid, ChannelSelection, CkaReport,
    FeatureTiles, LandscapeGrid, LinearProbe,
};
use ucl_core::data::TaskStream;
use ucl_core::experiment::Corpus;
use ucl_core::rng::{keyed_rng, PROBE};

use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::datasets::load_corpus;
use crate::error::{IoContext, Result, UclError};
use crate::manifest::read_manifest;
use crate::record::{read_record_dir, RunRecord, TrialRecord};
use crate::runner::subsample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Cka,
    L2,
    Landscape,
    Features,
}

impl AnalysisKind {
    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Cka => "cka",
            AnalysisKind::L2 => "l2",
            AnalysisKind::Landscape => "landscape",
            AnalysisKind::Features => "features",
        }
    }
}

impl std::str::FromStr for AnalysisKind {
    type Err = UclError;

    fn from_str(s: &str) -> Result<Self> {
        [AnalysisKind::Cka, AnalysisKind::L2, AnalysisKind::Landscape, AnalysisKind::Features]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UclError::Usage(format!("unknown analysis kind `{s}`")))
    }
}

#[derive(Clone, Debug)]
pub struct AnalyzeOptions {
    /// Trial seed; the first completed trial by default.
    pub trial: Option<u64>,
    /// Task checkpoint; the final one by default.
    pub task: Option<usize>,
    /// Cap on probe-set images (CKA, landscape batch).
    pub probe_size: Option<usize>,
    pub resolution: usize,
    pub extent: f64,
    pub probe_seed: u64,
    pub block: usize,
    pub channels: usize,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self { trial: None, task: None, probe_size: Some(512), resolution: 11, extent: 1.0, probe_seed: 0, block: 1, channels: 16 }
    }
}

/// One record opened for analysis.
pub struct Subject {
    pub dir: PathBuf,
    pub label: String,
    pub record: RunRecord,
    pub trial: TrialRecord,
}

impl Subject {
    pub fn open(dir: &Path, trial: Option<u64>) -> Result<Self> {
        let record = read_record_dir(dir)?;
        let trial = record
            .trials
            .iter()
            .find(|t| trial.map_or(t.is_completed(), |s| t.seed == s))
            .cloned()
            .ok_or_else(|| UclError::Incomplete(format!("{}: no matching completed trial", dir.display())))?;
        let label = dir.file_name().map_or_else(|| record.config.name.clone(), |n| n.to_string_lossy().into_owned());
        Ok(Self { dir: dir.to_path_buf(), label, record, trial })
    }

    pub fn checkpoint(&self, task: Option<usize>) -> Result<Checkpoint> {
        let rel = match task {
            Some(t) => self.trial.checkpoints.iter().find(|(k, _)| *k == t).map(|(_, p)| p.as_str()),
            None => self.trial.final_checkpoint(),
        }
        .ok_or_else(|| UclError::MissingCheckpoint(self.dir.join(format!("task {task:?} of trial {}", self.trial.seed))))?;
        load_checkpoint(&self.dir.join(rel))
    }

    pub fn tasks(&self) -> Vec<usize> {
        self.trial.checkpoints.iter().map(|(t, _)| *t).collect()
    }

    pub fn stream(&self) -> Result<TaskStream> {
        let rel = self.trial.manifest.as_ref().ok_or_else(|| UclError::Incomplete("trial has no manifest".into()))?;
        Ok(read_manifest(&self.dir.join(rel))?.stream)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        load_corpus(&self.record.config)
    }
}

/// Probe images: the union of the stream's task test sets.
fn probe_ids(subject: &Subject, corpus: &Corpus, cap: Option<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
    let stream = subject.stream()?;
    stream.validate(&corpus.train.labels, &corpus.test.labels)?;
    let classes: Vec<u32> = stream.tasks.iter().flat_map(|t| t.class_ids.iter().copied()).collect();
    let mut ids: Vec<usize> = stream.tasks.iter().flat_map(|t| t.test_ids.iter().copied()).collect();
    ids.sort_unstable();
    let picked = subsample(&corpus.test.subset(&ids), cap);
    let ids: Vec<usize> = picked.into_iter().map(|i| ids[i]).collect();
    let labels = ids
        .iter()
        .map(|&i| classes.iter().position(|&c| c == corpus.test.labels[i]).expect("probe ids come from stream classes"))
        .collect();
    Ok((ids, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaComparison {
    pub a: String,
    pub a_task: usize,
    pub b: String,
    pub b_task: usize,
    pub report: CkaReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct L2Series {
    pub label: String,
    /// `[task, distance]`.
    pub distances: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeEntry {
    pub label: String,
    pub task: usize,
    pub probe_seed: u64,
    pub grid: LandscapeGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub label: String,
    pub task: usize,
    pub block: usize,
    pub tiles: FeatureTiles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisReport {
    Cka { comparisons: Vec<CkaComparison> },
    L2 { series: Vec<L2Series> },
    Landscape { entries: Vec<LandscapeEntry> },
    Features { entries: Vec<FeatureEntry> },
}

/// CKA between two records' checkpoints, or between the first and chosen
/// checkpoint of a single record.
fn cka(subjects: &[Subject], opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let a = &subjects[0];
    let corpus = a.corpus()?;
    let (ids, _) = probe_ids(a, &corpus, opts.probe_size)?;
    let (ca, b_subject, cb) = match subjects.get(1) {
        Some(b) => (a.checkpoint(opts.task)?, b, b.checkpoint(opts.task)?),
        None => {
            let first = *a.tasks().iter().min().ok_or_else(|| UclError::Incomplete("no checkpoints".into()))?;
            (a.checkpoint(Some(first))?, a, a.checkpoint(opts.task)?)
        }
    };
    let blocks: Vec<usize> = (0..ca.bundle.num_blocks()).collect();
    let report = cka_report(&ca.bundle, &cb.bundle, &corpus.test, &ids, &ca.normalization, &blocks, 64)?;
    Ok(AnalysisReport::Cka {
        comparisons: vec![CkaComparison { a: a.label.clone(), a_task: ca.task, b: b_subject.label.clone(), b_task: cb.task, report }],
    })
}

/// Per-task distance between two records, or drift from the first
/// checkpoint within one record.
fn l2(subjects: &[Subject]) -> Result<AnalysisReport> {
    let a = &subjects[0];
    let series = match subjects.get(1) {
        Some(b) => {
            let common: Vec<usize> = a.tasks().into_iter().filter(|t| b.tasks().contains(t)).collect();
            let mut d = Vec::new();
            for t in common {
                d.push((t, l2_param_distance(&a.checkpoint(Some(t))?.bundle, &b.checkpoint(Some(t))?.bundle)?));
            }
            L2Series { label: format!("{} vs {}", a.label, b.label), distances: d }
        }
        None => {
            let mut tasks = a.tasks();
            tasks.sort_unstable();
            let first = tasks.first().copied().ok_or_else(|| UclError::Incomplete("no checkpoints".into()))?;
            let base = a.checkpoint(Some(first))?;
            let mut d = Vec::new();
            for t in tasks {
                d.push((t, l2_param_distance(&base.bundle, &a.checkpoint(Some(t))?.bundle)?));
            }
            L2Series { label: format!("{} drift from task {first}", a.label), distances: d }
        }
    };
    if series.distances.is_empty() {
        return Err(UclError::Incomplete("no common task checkpoints".into()));
    }
    Ok(AnalysisReport::L2 { series: vec![series] })
}

/// Loss of a frozen random linear classifier over backbone features along
/// two filter-normalized directions. The classifier seed is shared so
/// records are comparable.
fn landscape(subjects: &[Subject], opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let mut entries = Vec::new();
    for s in subjects {
        let corpus = s.corpus()?;
        let (ids, labels) = probe_ids(s, &corpus, opts.probe_size.map(|n| n.min(256)))?;
        let mut ck = s.checkpoint(opts.task)?;
        let classes = labels.iter().max().map_or(1, |m| m + 1);
        let probe = LinearProbe::random(ck.bundle.feature_dim(), classes, opts.probe_seed);
        let x = ck.normalization.batch(&corpus.test, &ids);
        let d1 = filter_normalized_direction(&ck.bundle, &mut keyed_rng(opts.probe_seed, &[PROBE, 1]));
        let d2 = filter_normalized_direction(&ck.bundle, &mut keyed_rng(opts.probe_seed, &[PROBE, 2]));
        let grid = loss_landscape_grid(&mut ck.bundle, |m| probe.loss(m, &x, &labels), &d1, &d2, opts.extent, opts.resolution)?;
        entries.push(LandscapeEntry { label: s.label.clone(), task: ck.task, probe_seed: opts.probe_seed, grid });
    }
    Ok(AnalysisReport::Landscape { entries })
}

/// Activation maps of the first probe image.
fn features(subjects: &[Subject], opts: &AnalyzeOptions) -> Result<AnalysisReport> {
    let mut entries = Vec::new();
    for s in subjects {
        let corpus = s.corpus()?;
        let (ids, _) = probe_ids(s, &corpus, Some(1))?;
        let ck = s.checkpoint(opts.task)?;
        let img = ck.normalization.apply(&corpus.test.image(ids[0]));
        let tiles = feature_map_export(&ck.bundle, &img, opts.block, opts.channels, ChannelSelection::First)?;
        entries.push(FeatureEntry { label: s.label.clone(), task: ck.task, block: opts.block, tiles });
    }
    Ok(AnalysisReport::Features { entries })
}

pub fn analysis_path(dir: &Path, kind: AnalysisKind) -> PathBuf {
    dir.join(format!("{}.json", kind.name()))
}

/// Runs an analysis over one or two record directories and writes
/// `<out>/<kind>.json`.
pub fn analyze(records: &[PathBuf], kind: AnalysisKind, opts: &AnalyzeOptions, out: &Path) -> Result<AnalysisReport> {
    if records.is_empty() || records.len() > 2 {
        return Err(UclError::Usage(format!("analyze takes one or two records, got {}", records.len())));
    }
    let subjects = records.iter().map(|d| Subject::open(d, opts.trial)).collect::<Result<Vec<_>>>()?;
    let report = match kind {
        AnalysisKind::Cka => cka(&subjects, opts)?,
        AnalysisKind::L2 => l2(&subjects)?,
        AnalysisKind::Landscape => landscape(&subjects, opts)?,
        AnalysisKind::Features => features(&subjects, opts)?,
    };
    fs::create_dir_all(out).at(out)?;
    let p = analysis_path(out, kind);
    fs::write(&p, serde_json::to_vec_pretty(&report)?).at(&p)?;
    Ok(report)
}

pub fn read_analysis(path: &Path) -> Result<AnalysisReport> {
    Ok(serde_json::from_slice(&fs::read(path).at(path)?)?)
}
