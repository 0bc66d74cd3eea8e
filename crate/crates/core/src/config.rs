//! Run configuration with defaults from the reference hyperparameters.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{AugConfig, DatasetId, SupervisedAugConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::KnnConfig;
use crate::losses::SslObjective;
use crate::models::{ArchConfig, BackboneConfig, ClassifierConfig, PredictorConfig};
use crate::optim::SgdConfig;
use crate::strategies::{Mixing, Objective, StrategyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    UclSimsiam,
    UclBarlow,
    Scl,
}

impl Paradigm {
    pub fn name(self) -> &'static str {
        match self {
            Paradigm::UclSimsiam => "ucl_simsiam",
            Paradigm::UclBarlow => "ucl_barlow",
            Paradigm::Scl => "scl",
        }
    }

    pub fn is_supervised(self) -> bool {
        self == Paradigm::Scl
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub dataset: DatasetId,
    pub data_root: Option<String>,
    pub paradigm: Paradigm,
    pub strategy: StrategyConfig,
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub per_task_cap: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_seed: u64,
    pub trials: usize,
    /// Use `base_seed` for the class order of every trial instead of the
    /// trial seed.
    pub shared_class_order: bool,
    pub barlow_lambda: f64,
    pub optimizer: SgdConfig,
    pub arch: ArchConfig,
    pub augment: AugConfig,
    pub supervised_augment: SupervisedAugConfig,
    pub knn: KnnConfig,
    pub synthetic: SyntheticConfig,
    pub ood: Vec<DatasetId>,
    /// Where records and checkpoints go; the runner falls back to
    /// `runs/<name>`.
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: String::from("run"),
            dataset: DatasetId::Cifar10,
            data_root: None,
            paradigm: Paradigm::UclSimsiam,
            strategy: StrategyConfig::Finetune,
            num_tasks: 5,
            classes_per_task: 2,
            per_task_cap: None,
            epochs: 200,
            batch_size: 256,
            base_seed: 0,
            trials: 3,
            shared_class_order: false,
            barlow_lambda: 0.005,
            optimizer: SgdConfig::default(),
            arch: ArchConfig::default(),
            augment: AugConfig::default(),
            supervised_augment: SupervisedAugConfig::default(),
            knn: KnnConfig::default(),
            synthetic: SyntheticConfig::default(),
            ood: Vec::new(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Seeds of every trial: `base_seed + {0, 1, …}`.
    pub fn trial_seeds(&self) -> Vec<u64> {
        (0..self.trials as u64).map(|i| self.base_seed + i).collect()
    }

    pub fn class_order_seed(&self, trial_seed: u64) -> u64 {
        if self.shared_class_order {
            self.base_seed
        } else {
            trial_seed
        }
    }

    pub fn objective(&self) -> Objective {
        match self.paradigm {
            Paradigm::UclSimsiam => Objective::Ssl(SslObjective::simsiam()),
            Paradigm::UclBarlow => Objective::Ssl(SslObjective::barlow(self.barlow_lambda)),
            Paradigm::Scl => Objective::Supervised,
        }
    }

    /// Architecture for a trial: heads follow the paradigm and the weights
    /// are initialized from the trial seed.
    pub fn arch_for_trial(&self, trial_seed: u64) -> ArchConfig {
        let mut arch = self.arch.clone();
        arch.init_seed = trial_seed;
        match self.paradigm {
            Paradigm::UclSimsiam => {
                if arch.predictor.is_none() {
                    arch.predictor = Some(PredictorConfig { hidden: (arch.projector.out / 4).max(1) });
                }
                arch.classifier = None;
            }
            Paradigm::UclBarlow => {
                arch.predictor = None;
                arch.classifier = None;
            }
            Paradigm::Scl => {
                arch.predictor = None;
                arch.classifier = Some(ClassifierConfig { num_tasks: self.num_tasks, classes_per_task: self.classes_per_task });
            }
        }
        arch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.strategy.validate()?;
        self.arch_for_trial(self.base_seed).validate()?;
        if self.paradigm.is_supervised() && matches!(self.strategy, StrategyConfig::Lump { .. }) {
            return bad("lump is defined for the self-supervised paradigms only".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return bad("num_tasks and classes_per_task must be positive".into());
        }
        if let Some(n) = self.dataset.num_classes() {
            let requested = self.num_tasks * self.classes_per_task;
            if requested > n {
                return Err(Error::ClassBudget { requested, available: n });
            }
        }
        if self.per_task_cap == Some(0) {
            return bad("per_task_cap must be positive".into());
        }
        if self.augment.size != self.arch.input_size || self.supervised_augment.size != self.arch.input_size {
            return bad(format!(
                "augmentation sizes {}/{} differ from input size {}",
                self.augment.size, self.supervised_augment.size, self.arch.input_size
            ));
        }
        if !(self.knn.temperature > 0.0) || self.knn.k == 0 {
            return bad("knn needs k > 0 and a positive temperature".into());
        }
        if self.dataset == DatasetId::Synthetic {
            let s = &self.synthetic;
            if s.size != self.arch.input_size || s.channels != self.arch.input_channels {
                return bad("synthetic image shape must match the encoder input".into());
            }
            if self.num_tasks * self.classes_per_task > s.num_classes {
                return Err(Error::ClassBudget { requested: self.num_tasks * self.classes_per_task, available: s.num_classes });
            }
        }
        Ok(())
    }

    /// Reference setting for a dataset, paradigm and strategy.
    pub fn reference(dataset: DatasetId, paradigm: Paradigm, strategy: &str) -> Result<Self> {
        let (tasks, cpt, size, si_c, der_alpha, lump, buffer) = match dataset {
            DatasetId::Cifar10 => (5, 2, 32, 100.0, 0.1, 0.1, 200),
            DatasetId::Cifar100 => (20, 5, 32, 0.1, 0.1, 0.1, 200),
            DatasetId::TinyImagenet => (20, 5, 64, 0.01, 0.01, 0.4, 256),
            other => return Err(Error::Config(format!("no reference setting for {other}"))),
        };
        let strategy = match strategy {
            "finetune" => StrategyConfig::Finetune,
            "si" => StrategyConfig::Si { c: si_c, xi: 1.0 },
            "der" => StrategyConfig::Der { alpha: der_alpha, buffer_size: buffer, target: Default::default() },
            "lump" => StrategyConfig::Lump { mixing: Mixing::Beta(lump), buffer_size: buffer },
            "multitask" => StrategyConfig::Multitask,
            other => return Err(Error::Config(format!("unknown strategy `{other}`"))),
        };
        let (epochs, batch_size) = if paradigm.is_supervised() { (50, 32) } else { (200, 256) };
        let cfg = Self {
            name: format!("{}_{}_{}", dataset, paradigm.name(), strategy.name()),
            dataset,
            paradigm,
            strategy,
            num_tasks: tasks,
            classes_per_task: cpt,
            epochs,
            batch_size,
            arch: ArchConfig { backbone: BackboneConfig::Resnet18 { base_width: 64 }, input_size: size, ..ArchConfig::default() },
            augment: AugConfig::for_size(size),
            supervised_augment: SupervisedAugConfig { size, ..SupervisedAugConfig::default() },
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_settings_validate() {
        for d in [DatasetId::Cifar10, DatasetId::Cifar100, DatasetId::TinyImagenet] {
            for p in [Paradigm::UclSimsiam, Paradigm::UclBarlow] {
                for s in ["finetune", "si", "der", "lump", "multitask"] {
                    RunConfig::reference(d, p, s).unwrap();
                }
            }
            assert!(RunConfig::reference(d, Paradigm::Scl, "lump").is_err());
        }
        let c = RunConfig::reference(DatasetId::TinyImagenet, Paradigm::UclSimsiam, "lump").unwrap();
        assert_eq!(c.strategy, StrategyConfig::Lump { mixing: Mixing::Beta(0.4), buffer_size: 256 });
        assert_eq!((c.arch.input_size, c.num_tasks, c.classes_per_task), (64, 20, 5));
    }

    #[test]
    fn heads_follow_paradigm() {
        let mut c = RunConfig { paradigm: Paradigm::Scl, ..RunConfig::default() };
        let a = c.arch_for_trial(4);
        assert_eq!(a.init_seed, 4);
        assert!(a.predictor.is_none() && a.classifier.is_some());
        c.paradigm = Paradigm::UclBarlow;
        assert!(c.arch_for_trial(0).predictor.is_none());
    }
}
