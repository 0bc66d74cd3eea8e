//! Continual-learning strategies over a shared encoder: finetune, synaptic
//! intelligence, dark experience replay, LUMP mixup replay and multitask.

mod buffer;
mod si;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::{two_view_augment, AugConfig, Image, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::losses::SslObjective;
use crate::models::{EncoderBundle, Mode};
use crate::optim::{Sgd, SgdConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use buffer::{reservoir_slot, BufferItem, ReplayBuffer};
pub use si::SiState;

/// How LUMP draws its interpolation coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// `λ ~ Beta(α, α)` per batch.
    Beta(f64),
    /// A constant `λ`.
    Fixed(f64),
}

impl Mixing {
    pub fn validate(self) -> Result<()> {
        match self {
            Mixing::Beta(a) if a > 0.0 && a.is_finite() => Ok(()),
            Mixing::Fixed(l) if (0.0..=1.0).contains(&l) => Ok(()),
            other => Err(Error::Config(format!("invalid mixing {other:?}"))),
        }
    }

    pub fn draw<R: Rng>(self, rng: &mut R) -> Result<f64> {
        match self {
            Mixing::Beta(a) => {
                let beta = Beta::new(a, a).map_err(|e| Error::Config(format!("beta({a}): {e}")))?;
                Ok(beta.sample(rng))
            }
            Mixing::Fixed(l) => Ok(l),
        }
    }
}

/// Which output DER caches for self-supervised replay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerTarget {
    #[default]
    Projector,
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Finetune,
    Si {
        c: f64,
        xi: f64,
    },
    Der {
        alpha: f64,
        buffer_size: usize,
        #[serde(default)]
        target: DerTarget,
    },
    Lump {
        mixing: Mixing,
        buffer_size: usize,
    },
    Multitask,
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::Finetune => "finetune",
            StrategyConfig::Si { .. } => "si",
            StrategyConfig::Der { .. } => "der",
            StrategyConfig::Lump { .. } => "lump",
            StrategyConfig::Multitask => "multitask",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyConfig::Si { c, xi } if !(c >= 0.0) || !(xi > 0.0) => Err(Error::Config("SI needs c ≥ 0 and ξ > 0".into())),
            StrategyConfig::Der { alpha, .. } if !(alpha >= 0.0) => Err(Error::Config("DER alpha must be ≥ 0".into())),
            StrategyConfig::Lump { mixing, .. } => mixing.validate(),
            _ => Ok(()),
        }
    }
}

/// The training signal: a self-supervised objective or task-sliced
/// cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    Ssl(SslObjective),
    Supervised,
}

/// Two augmented views of a batch plus the raw images they came from.
#[derive(Clone, Debug)]
pub struct UclBatch {
    pub view1: Tensor,
    pub view2: Tensor,
    pub images: Vec<Image>,
}

/// Augmented inputs with task-local labels.
#[derive(Clone, Debug)]
pub struct SclBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
    pub images: Vec<Image>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub objective: f64,
    pub regularizer: f64,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum StrategyState {
    Finetune,
    Si(SiState),
    Der { alpha: f64, target: DerTarget, buffer: ReplayBuffer<BufferItem> },
    Lump { mixing: Mixing, buffer: ReplayBuffer<BufferItem> },
    Multitask,
}

impl StrategyState {
    pub fn buffer(&self) -> Option<&ReplayBuffer<BufferItem>> {
        match self {
            StrategyState::Der { buffer, .. } | StrategyState::Lump { buffer, .. } => Some(buffer),
            _ => None,
        }
    }

    pub fn buffer_mut(&mut self) -> Option<&mut ReplayBuffer<BufferItem>> {
        match self {
            StrategyState::Der { buffer, .. } | StrategyState::Lump { buffer, .. } => Some(buffer),
            _ => None,
        }
    }
}

/// `λ·x + (1 − λ)·m`.
pub fn lump_mix(current: &Tensor, memory: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange(format!("mixing coefficient {lambda}")));
    }
    current.zip_with(memory, |x, m| lambda * x + (1.0 - lambda) * m)
}

/// Cross-entropy of each example against its own task's logit slice,
/// averaged over the batch.
pub fn supervised_loss(bundle: &EncoderBundle, g: &mut Graph, features: Var, labels: &[usize], task_ids: &[usize]) -> Result<Var> {
    let cpt = bundle.classes_per_task().ok_or(Error::NoClassifier)?;
    let n = labels.len();
    if task_ids.len() != n || g.shape(features)[0] != n || n == 0 {
        return Err(shape_err!("{} labels, {} task ids, features {:?}", n, task_ids.len(), g.shape(features)));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= cpt) {
        return Err(Error::OutOfRange(format!("label {l} outside the {cpt}-class task slice")));
    }
    let groups = group_rows(task_ids);
    if groups.len() == 1 {
        let logits = bundle.classify(g, features, task_ids[0])?;
        return g.cross_entropy(logits, labels);
    }
    let full = bundle.classify_all(g, features)?;
    let mut total: Option<Var> = None;
    for (task, rows) in groups {
        let sub = g.gather_rows(full, &rows)?;
        let logits = g.slice_cols(sub, task * cpt, cpt)?;
        let local: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
        let ce = g.cross_entropy(logits, &local)?;
        let part = g.scale(ce, rows.len() as f64 / n as f64);
        total = Some(match total {
            Some(t) => g.add(t, part)?,
            None => part,
        });
    }
    Ok(total.expect("non-empty batch"))
}

fn group_rows(task_ids: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in task_ids.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    groups
}

/// `mean_b ‖cached_b − current_b‖²`.
pub fn der_ucl_term(g: &mut Graph, current: Var, cached: &Tensor) -> Result<Var> {
    let n = g.shape(current)[0].max(1) as f64;
    let c = g.input(cached.clone());
    let d = g.sub(current, c)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n))
}

/// `mean_b ‖softmax(p_b) − softmax(logits_b)‖²`, each restricted to the
/// example's task slice of the full-width logits.
pub fn der_scl_term(g: &mut Graph, logits: Var, cached: &Tensor, task_ids: &[usize], classes_per_task: usize) -> Result<Var> {
    let n = task_ids.len();
    if g.shape(logits) != cached.shape() || g.shape(logits)[0] != n || n == 0 {
        return Err(shape_err!("logits {:?}, cached {:?}, {} tasks", g.shape(logits), cached.shape(), n));
    }
    let mut total: Option<Var> = None;
    for (task, rows) in group_rows(task_ids) {
        let start = task * classes_per_task;
        let sub = g.gather_rows(logits, &rows)?;
        let cur = g.slice_cols(sub, start, classes_per_task)?;
        let cur = g.softmax_rows(cur)?;
        let mut tgt = Graph::new();
        let tv = tgt.input(cached.gather(&rows));
        let tv = tgt.slice_cols(tv, start, classes_per_task)?;
        let target = g.input(softmax_rows(tgt.value(tv)));
        let d = g.sub(cur, target)?;
        let sq = g.mul(d, d)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let s = total.expect("non-empty batch");
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Encoder, optimizer and strategy state for one continual-learning run.
pub struct Learner {
    pub bundle: EncoderBundle,
    pub optimizer: Sgd,
    pub objective: Objective,
    pub state: StrategyState,
    pub norm: Normalization,
    pub aug: AugConfig,
}

struct Pass {
    objective: f64,
    regularizer: f64,
    grads: Vec<Option<Tensor>>,
    updates: Vec<(ParamId, Tensor)>,
}

fn finish(g: &mut Graph, objective: Var, extra: Option<(Var, f64)>) -> Result<Pass> {
    let obj = g.value(objective).item();
    let (loss, reg) = match extra {
        Some((term, weight)) => {
            let w = g.scale(term, weight);
            let reg = g.value(w).item();
            (g.add(objective, w)?, reg)
        }
        None => (objective, 0.0),
    };
    let grads = g.backward(loss)?.into_param_grads();
    Ok(Pass { objective: obj, regularizer: reg, grads, updates: g.take_buffer_updates() })
}

fn flat_grads(store: &ParamStore, grads: &[Option<Tensor>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(store.trainable_count());
    for id in store.trainable_ids() {
        match grads.get(id.index()).and_then(|g| g.as_ref()) {
            Some(g) => out.extend_from_slice(g.data()),
            None => out.extend(core::iter::repeat_n(0.0, store.get(id).len())),
        }
    }
    out
}

impl Learner {
    pub fn new(
        bundle: EncoderBundle,
        sgd: SgdConfig,
        objective: Objective,
        strategy: &StrategyConfig,
        norm: Normalization,
        aug: AugConfig,
    ) -> Result<Self> {
        strategy.validate()?;
        if objective == Objective::Supervised {
            if !bundle.has_classifier() {
                return Err(Error::NoClassifier);
            }
            if matches!(strategy, StrategyConfig::Lump { .. }) {
                return Err(Error::Config("LUMP mixes self-supervised views and has no supervised form".into()));
            }
        }
        let state = match *strategy {
            StrategyConfig::Finetune => StrategyState::Finetune,
            StrategyConfig::Si { c, xi } => StrategyState::Si(SiState::new(c, xi, &bundle.parameter_vector().values)?),
            StrategyConfig::Der { alpha, buffer_size, target } => {
                StrategyState::Der { alpha, target, buffer: ReplayBuffer::new(buffer_size) }
            }
            StrategyConfig::Lump { mixing, buffer_size } => StrategyState::Lump { mixing, buffer: ReplayBuffer::new(buffer_size) },
            StrategyConfig::Multitask => StrategyState::Multitask,
        };
        Ok(Self { bundle, optimizer: Sgd::new(sgd), objective, state, norm, aug })
    }

    /// Fresh optimizer state at each task boundary.
    pub fn begin_task(&mut self, _task_id: usize) {
        self.optimizer.reset();
    }

    pub fn end_task(&mut self, _task_id: usize) -> Result<()> {
        if let StrategyState::Si(si) = &mut self.state {
            si.consolidate(&self.bundle.parameter_vector().values)?;
        }
        Ok(())
    }

    /// Normalized un-augmented batch.
    pub fn clean_batch<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
        let views: Vec<Tensor> = images.into_iter().map(|img| self.norm.apply(img)).collect();
        Tensor::stack(&views)
    }

    fn update(&mut self, mut pass: Pass) -> Result<StepStats> {
        let mut regularizer = pass.regularizer;
        let si_before = match &self.state {
            StrategyState::Si(si) => {
                let theta = self.bundle.parameter_vector().values;
                regularizer += si.penalty(&theta)?;
                let pen = si.penalty_grad(&theta)?;
                let store = &self.bundle.store;
                let mut offset = 0;
                for id in store.trainable_ids() {
                    let n = store.get(id).len();
                    if let Some(g) = pass.grads.get_mut(id.index()).and_then(|g| g.as_mut()) {
                        for (a, b) in g.data_mut().iter_mut().zip(&pen[offset..offset + n]) {
                            *a += b;
                        }
                    }
                    offset += n;
                }
                Some(theta)
            }
            _ => None,
        };
        self.optimizer.step(&mut self.bundle.store, &pass.grads);
        self.bundle.apply_buffer_updates(pass.updates);
        if let (Some(before), StrategyState::Si(si)) = (si_before, &mut self.state) {
            let after = self.bundle.parameter_vector().values;
            let delta: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            si.accumulate(&flat_grads(&self.bundle.store, &pass.grads), &delta)?;
        }
        Ok(StepStats { loss: pass.objective + regularizer, objective: pass.objective, regularizer, lambda: None })
    }

    fn ssl(&self) -> Result<SslObjective> {
        match self.objective {
            Objective::Ssl(o) => Ok(o),
            Objective::Supervised => Err(Error::Config("self-supervised step on a supervised learner".into())),
        }
    }

    /// One self-supervised update under the configured strategy.
    pub fn step_ucl<R: Rng>(&mut self, batch: &UclBatch, task_id: usize, rng: &mut R) -> Result<StepStats> {
        match &self.state {
            StrategyState::Der { .. } => self.der_step_ucl(batch, task_id, rng),
            StrategyState::Lump { .. } => self.lump_step(batch, task_id, rng),
            _ => self.finetune_step_ucl(batch),
        }
    }

    /// One supervised update under the configured strategy.
    pub fn step_scl<R: Rng>(&mut self, batch: &SclBatch, rng: &mut R) -> Result<StepStats> {
        match &self.state {
            StrategyState::Der { .. } => self.der_step_scl(batch, rng),
            _ => self.finetune_step_scl(batch),
        }
    }

    fn ssl_pass(&self, view1: &Tensor, view2: &Tensor, replay: Option<(&Tensor, &Tensor, f64, DerTarget)>) -> Result<Pass> {
        let objective = self.ssl()?;
        let mut g = self.bundle.graph();
        let v1 = g.input(view1.clone());
        let v2 = g.input(view2.clone());
        let terms = objective.evaluate(&self.bundle, &mut g, v1, v2)?;
        let extra = match replay {
            Some((inputs, cached, alpha, target)) => {
                let x = g.input(inputs.clone());
                let out = self.der_output(&mut g, x, target)?;
                Some((der_ucl_term(&mut g, out, cached)?, alpha))
            }
            None => None,
        };
        finish(&mut g, terms.loss, extra)
    }

    fn der_output(&self, g: &mut Graph, x: Var, target: DerTarget) -> Result<Var> {
        let f = self.bundle.backbone(g, x, Mode::Eval)?;
        match target {
            DerTarget::Projector => self.bundle.project(g, f, Mode::Eval),
            DerTarget::Backbone => Ok(f),
        }
    }

    pub fn finetune_step_ucl(&mut self, batch: &UclBatch) -> Result<StepStats> {
        let pass = self.ssl_pass(&batch.view1, &batch.view2, None)?;
        self.update(pass)
    }

    pub fn der_step_ucl<R: Rng>(&mut self, batch: &UclBatch, task_id: usize, rng: &mut R) -> Result<StepStats> {
        let StrategyState::Der { alpha, target, buffer } = &self.state else {
            return Err(Error::Config("DER step without DER state".into()));
        };
        let (alpha, target) = (*alpha, *target);
        let clean = self.clean_batch(&batch.images)?;
        let cached = {
            let mut g = self.bundle.graph();
            let x = g.input(clean);
            let out = self.der_output(&mut g, x, target)?;
            g.value(out).clone()
        };
        let replay = if alpha > 0.0 && !buffer.is_empty() {
            let picks = buffer.uniform_sample(batch.images.len(), rng)?;
            let inputs = self.clean_batch(picks.iter().map(|it| &it.image))?;
            let targets = Tensor::stack(&picks.iter().map(|it| it.target.clone().expect("cached target")).collect::<Vec<_>>())?;
            Some((inputs, targets))
        } else {
            None
        };
        let pass = self.ssl_pass(&batch.view1, &batch.view2, replay.as_ref().map(|(i, t)| (i, t, alpha, target)))?;
        let stats = self.update(pass)?;
        self.insert_batch(&batch.images, None, task_id, Some(&cached), rng);
        Ok(stats)
    }

    pub fn lump_step<R: Rng>(&mut self, batch: &UclBatch, task_id: usize, rng: &mut R) -> Result<StepStats> {
        let StrategyState::Lump { mixing, buffer } = &self.state else {
            return Err(Error::Config("LUMP step without LUMP state".into()));
        };
        let mut lambda = None;
        let pass = if task_id > 0 && !buffer.is_empty() {
            let lam = mixing.draw(rng)?;
            let picks = buffer.uniform_sample(batch.images.len(), rng)?;
            let mut m1 = Vec::with_capacity(picks.len());
            let mut m2 = Vec::with_capacity(picks.len());
            for item in picks {
                let pair = two_view_augment(&item.image, 0, &self.aug, &self.norm, rng)?;
                m1.push(pair.view1);
                m2.push(pair.view2);
            }
            let x1 = lump_mix(&batch.view1, &Tensor::stack(&m1)?, lam)?;
            let x2 = lump_mix(&batch.view2, &Tensor::stack(&m2)?, lam)?;
            lambda = Some(lam);
            self.ssl_pass(&x1, &x2, None)?
        } else {
            self.ssl_pass(&batch.view1, &batch.view2, None)?
        };
        let mut stats = self.update(pass)?;
        stats.lambda = lambda;
        self.insert_batch(&batch.images, None, task_id, None, rng);
        Ok(stats)
    }

    fn insert_batch<R: Rng>(&mut self, images: &[Image], labels: Option<&[usize]>, task_id: usize, cached: Option<&Tensor>, rng: &mut R) {
        self.insert_items(images, labels, &alloc::vec![task_id; images.len()], cached, rng);
    }

    fn insert_items<R: Rng>(
        &mut self,
        images: &[Image],
        labels: Option<&[usize]>,
        task_ids: &[usize],
        cached: Option<&Tensor>,
        rng: &mut R,
    ) {
        let Some(buffer) = self.state.buffer_mut() else { return };
        for (i, img) in images.iter().enumerate() {
            let item = BufferItem {
                image: img.clone(),
                task_id: task_ids[i],
                label: labels.map(|l| l[i]),
                target: cached.map(|c| Tensor::from_vec(&c.shape()[1..], c.row(i).to_vec()).expect("row of a batch")),
            };
            buffer.reservoir_insert(item, rng);
        }
    }

    fn scl_pass(&self, batch: &SclBatch, replay: Option<(&Tensor, &Tensor, &[usize], f64)>) -> Result<Pass> {
        let mut g = self.bundle.graph();
        let x = g.input(batch.inputs.clone());
        let f = self.bundle.backbone(&mut g, x, Mode::Train)?;
        let ce = supervised_loss(&self.bundle, &mut g, f, &batch.labels, &batch.task_ids)?;
        let extra = match replay {
            Some((inputs, cached, tasks, alpha)) => {
                let x = g.input(inputs.clone());
                let f = self.bundle.backbone(&mut g, x, Mode::Eval)?;
                let logits = self.bundle.classify_all(&mut g, f)?;
                let cpt = self.bundle.classes_per_task().ok_or(Error::NoClassifier)?;
                Some((der_scl_term(&mut g, logits, cached, tasks, cpt)?, alpha))
            }
            None => None,
        };
        finish(&mut g, ce, extra)
    }

    pub fn finetune_step_scl(&mut self, batch: &SclBatch) -> Result<StepStats> {
        let pass = self.scl_pass(batch, None)?;
        self.update(pass)
    }

    pub fn der_step_scl<R: Rng>(&mut self, batch: &SclBatch, rng: &mut R) -> Result<StepStats> {
        let StrategyState::Der { alpha, buffer, .. } = &self.state else {
            return Err(Error::Config("DER step without DER state".into()));
        };
        let alpha = *alpha;
        let clean = self.clean_batch(&batch.images)?;
        let cached = {
            let mut g = self.bundle.graph();
            let x = g.input(clean);
            let f = self.bundle.backbone(&mut g, x, Mode::Eval)?;
            let logits = self.bundle.classify_all(&mut g, f)?;
            g.value(logits).clone()
        };
        let replay = if alpha > 0.0 && !buffer.is_empty() {
            let picks = buffer.uniform_sample(batch.images.len(), rng)?;
            let inputs = self.clean_batch(picks.iter().map(|it| &it.image))?;
            let targets = Tensor::stack(&picks.iter().map(|it| it.target.clone().expect("cached logits")).collect::<Vec<_>>())?;
            let tasks: Vec<usize> = picks.iter().map(|it| it.task_id).collect();
            Some((inputs, targets, tasks))
        } else {
            None
        };
        let pass = self.scl_pass(batch, replay.as_ref().map(|(i, t, k)| (i, t, k.as_slice(), alpha)))?;
        let stats = self.update(pass)?;
        self.insert_items(&batch.images, Some(&batch.labels), &batch.task_ids, Some(&cached), rng);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn lump_mix_cases() {
        let x = t(&[1, 2], &[1.0, 1.0]);
        let m = t(&[1, 2], &[0.0, 0.0]);
        assert_eq!(lump_mix(&x, &m, 1.0).unwrap(), x);
        assert_eq!(lump_mix(&x, &m, 0.0).unwrap(), m);
        assert!((lump_mix(&x, &m, 0.4).unwrap().data()[0] - 0.4).abs() < 1e-15);
        assert!(lump_mix(&x, &t(&[2, 1], &[0.0, 0.0]), 0.5).is_err());
        assert!(lump_mix(&x, &m, 1.5).is_err());
    }

    #[test]
    fn der_scl_hand_case() {
        let mut g = Graph::new();
        let cur = g.input(t(&[1, 2], &[libm::log(3.0), 0.0]));
        let term = der_scl_term(&mut g, cur, &t(&[1, 2], &[0.0, 0.0]), &[0], 2).unwrap();
        assert!((g.value(term).item() - 0.125).abs() < 1e-15);
        let same = g.input(t(&[1, 2], &[0.3, -0.2]));
        let term = der_scl_term(&mut g, same, &t(&[1, 2], &[0.3, -0.2]), &[0], 2).unwrap();
        assert_eq!(g.value(term).item(), 0.0);
    }

    #[test]
    fn der_ucl_hand_case() {
        let mut g = Graph::new();
        let cur = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let term = der_ucl_term(&mut g, cur, &t(&[2, 2], &[0.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((g.value(term).item() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn mixing_validation() {
        assert!(Mixing::Beta(0.0).validate().is_err());
        assert!(Mixing::Fixed(1.2).validate().is_err());
        let mut rng = crate::rng::keyed_rng(0, &[]);
        let l = Mixing::Beta(0.4).draw(&mut rng).unwrap();
        assert!((0.0..=1.0).contains(&l));
    }
}
