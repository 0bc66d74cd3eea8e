//! The per-trial continual-learning loop: train each task, then score every
//! task seen so far.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{build_split_stream, supervised_augment, two_view_augment, ImageSet, Normalization, SplitSpec, TaskStream};
use crate::error::{shape_err, Error, Result};
use crate::eval::{average_accuracy, average_forgetting, evaluate_task, AccuracyMatrix};
use crate::models::EncoderBundle;
use crate::rng::{keyed_rng, AUGMENT, REPLAY, SHUFFLE};
use crate::strategies::{Learner, Objective, SclBatch, StepStats, StrategyState, UclBatch};
use crate::tensor::Tensor;

/// Train and test splits of the corpus a stream is cut from.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: ImageSet,
    pub test: ImageSet,
    pub normalization: Normalization,
}

impl Corpus {
    /// Uses the dataset's reference statistics when it has them, otherwise
    /// statistics of the training split.
    pub fn new(cfg: &RunConfig, train: ImageSet, test: ImageSet) -> Result<Self> {
        for set in [&train, &test] {
            if set.channels != cfg.arch.input_channels || set.height != cfg.arch.input_size || set.width != cfg.arch.input_size {
                return Err(shape_err!(
                    "{}x{}x{} images for a {}x{}x{} encoder",
                    set.channels,
                    set.height,
                    set.width,
                    cfg.arch.input_channels,
                    cfg.arch.input_size,
                    cfg.arch.input_size
                ));
            }
        }
        let normalization = cfg.dataset.normalization().unwrap_or_else(|| Normalization::from_images(&train));
        Ok(Self { train, test, normalization })
    }

    pub fn stream(&self, cfg: &RunConfig, trial_seed: u64) -> Result<TaskStream> {
        let spec = SplitSpec {
            num_tasks: cfg.num_tasks,
            classes_per_task: cfg.classes_per_task,
            seed: cfg.class_order_seed(trial_seed),
            per_task_cap: cfg.per_task_cap,
        };
        build_split_stream(cfg.dataset, self.train.num_classes, &self.train.labels, &self.test.labels, &spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub seed: u64,
    pub stream: TaskStream,
    pub matrix: AccuracyMatrix,
    pub average_accuracy: f64,
    /// `None` with fewer than two tasks or when only the final row exists.
    pub forgetting: Option<f64>,
    /// Mean training loss per epoch, per task.
    pub epoch_losses: Vec<Vec<f64>>,
}

/// Hooks called as a trial progresses.
pub trait TrialObserver {
    fn epoch_finished(&mut self, _task: usize, _epoch: usize, _mean_loss: f64) {}

    /// Called after task `task` is trained and its row evaluated.
    fn task_finished(&mut self, _task: usize, _learner: &Learner, _matrix: &AccuracyMatrix, _epoch_losses: &[Vec<f64>]) -> Result<()> {
        Ok(())
    }
}

impl TrialObserver for () {}

/// Where a trial starts.
pub enum TrialStart {
    Fresh,
    /// Continue after `completed` tasks with a restored learner.
    Resume {
        learner: Box<Learner>,
        matrix: AccuracyMatrix,
        epoch_losses: Vec<Vec<f64>>,
        completed: usize,
    },
}

pub fn build_learner(cfg: &RunConfig, trial_seed: u64, normalization: &Normalization) -> Result<Learner> {
    let bundle = EncoderBundle::new(&cfg.arch_for_trial(trial_seed))?;
    Learner::new(bundle, cfg.optimizer, cfg.objective(), &cfg.strategy, normalization.clone(), cfg.augment.clone())
}

/// Where each class sits: `(task, local label)`.
fn class_slots(stream: &TaskStream, num_classes: usize) -> Vec<Option<(usize, usize)>> {
    let mut slots = alloc::vec![None; num_classes];
    for t in &stream.tasks {
        for (local, &c) in t.class_ids.iter().enumerate() {
            slots[c as usize] = Some((t.task_id, local));
        }
    }
    slots
}

struct Phase<'a> {
    cfg: &'a RunConfig,
    corpus: &'a Corpus,
    seed: u64,
    slots: &'a [Option<(usize, usize)>],
}

impl Phase<'_> {
    fn ucl_batch(&self, task: usize, epoch: usize, ids: &[usize]) -> Result<UclBatch> {
        let mut v1 = Vec::with_capacity(ids.len());
        let mut v2 = Vec::with_capacity(ids.len());
        let mut images = Vec::with_capacity(ids.len());
        for &i in ids {
            let img = self.corpus.train.image(i);
            let mut rng = keyed_rng(self.seed, &[AUGMENT, task as u64, epoch as u64, i as u64]);
            let pair = two_view_augment(&img, i, &self.cfg.augment, &self.corpus.normalization, &mut rng)?;
            v1.push(pair.view1);
            v2.push(pair.view2);
            images.push(img);
        }
        Ok(UclBatch { view1: Tensor::stack(&v1)?, view2: Tensor::stack(&v2)?, images })
    }

    fn scl_batch(&self, task: usize, epoch: usize, ids: &[usize]) -> Result<SclBatch> {
        let mut inputs = Vec::with_capacity(ids.len());
        let mut labels = Vec::with_capacity(ids.len());
        let mut task_ids = Vec::with_capacity(ids.len());
        let mut images = Vec::with_capacity(ids.len());
        for &i in ids {
            let img = self.corpus.train.image(i);
            let mut rng = keyed_rng(self.seed, &[AUGMENT, task as u64, epoch as u64, i as u64]);
            inputs.push(supervised_augment(&img, &self.cfg.supervised_augment, &self.corpus.normalization, &mut rng)?);
            let (t, local) =
                self.slots[self.corpus.train.labels[i] as usize].ok_or_else(|| Error::Config(format!("example {i} belongs to no task")))?;
            labels.push(local);
            task_ids.push(t);
            images.push(img);
        }
        Ok(SclBatch { inputs: Tensor::stack(&inputs)?, labels, task_ids, images })
    }

    /// Trains on `ids` for the configured epochs; returns mean loss per epoch.
    fn train(&self, learner: &mut Learner, task: usize, ids: &[usize], observer: &mut dyn TrialObserver) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.epochs);
        let mut order = ids.to_vec();
        for epoch in 0..self.cfg.epochs {
            order.copy_from_slice(ids);
            order.shuffle(&mut keyed_rng(self.seed, &[SHUFFLE, task as u64, epoch as u64]));
            let (mut sum, mut count) = (0.0, 0usize);
            for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                let mut rng = keyed_rng(self.seed, &[REPLAY, task as u64, epoch as u64, step as u64]);
                let stats: StepStats = match learner.objective {
                    Objective::Supervised => learner.step_scl(&self.scl_batch(task, epoch, chunk)?, &mut rng)?,
                    Objective::Ssl(_) => learner.step_ucl(&self.ucl_batch(task, epoch, chunk)?, task, &mut rng)?,
                };
                if !stats.loss.is_finite() {
                    return Err(Error::Degenerate(format!("non-finite loss at task {task}, epoch {epoch}, step {step}")));
                }
                sum += stats.loss;
                count += 1;
            }
            let mean = if count > 0 { sum / count as f64 } else { 0.0 };
            observer.epoch_finished(task, epoch, mean);
            losses.push(mean);
        }
        Ok(losses)
    }

    fn evaluate_row(&self, learner: &Learner, stream: &TaskStream, tau: usize, matrix: &mut AccuracyMatrix) -> Result<()> {
        for task in &stream.tasks[..=tau] {
            let acc = evaluate_task(
                &learner.bundle,
                &self.corpus.train,
                &task.train_ids,
                &self.corpus.test,
                &task.test_ids,
                &self.corpus.normalization,
                &self.cfg.knn,
            )?;
            matrix.set(tau, task.task_id, acc)?;
        }
        Ok(())
    }
}

/// Runs one trial end to end.
pub fn run_trial(cfg: &RunConfig, corpus: &Corpus, seed: u64, start: TrialStart, observer: &mut dyn TrialObserver) -> Result<TrialOutcome> {
    cfg.validate()?;
    let stream = corpus.stream(cfg, seed)?;
    let slots = class_slots(&stream, corpus.train.num_classes);
    let phase = Phase { cfg, corpus, seed, slots: &slots };
    let t = stream.num_tasks();
    let (mut learner, mut matrix, mut epoch_losses, completed) = match start {
        TrialStart::Fresh => (build_learner(cfg, seed, &corpus.normalization)?, AccuracyMatrix::new(t), Vec::new(), 0),
        TrialStart::Resume { learner, matrix, epoch_losses, completed } => (*learner, matrix, epoch_losses, completed),
    };
    if matches!(learner.state, StrategyState::Multitask) {
        if completed == 0 {
            let union: Vec<usize> = {
                let mut all: Vec<usize> = stream.tasks.iter().flat_map(|s| s.train_ids.iter().copied()).collect();
                all.sort_unstable();
                all
            };
            learner.begin_task(0);
            epoch_losses.push(phase.train(&mut learner, 0, &union, observer)?);
            learner.end_task(0)?;
            phase.evaluate_row(&learner, &stream, t - 1, &mut matrix)?;
            observer.task_finished(t - 1, &learner, &matrix, &epoch_losses)?;
        }
    } else {
        for task in completed..t {
            learner.begin_task(task);
            epoch_losses.push(phase.train(&mut learner, task, &stream.tasks[task].train_ids, observer)?);
            learner.end_task(task)?;
            phase.evaluate_row(&learner, &stream, task, &mut matrix)?;
            observer.task_finished(task, &learner, &matrix, &epoch_losses)?;
        }
    }
    let average_accuracy = average_accuracy(&matrix, t - 1)?;
    let forgetting = if t >= 2 && matrix.is_complete() { Some(average_forgetting(&matrix)?) } else { None };
    Ok(TrialOutcome { seed, stream, matrix, average_accuracy, forgetting, epoch_losses })
}
