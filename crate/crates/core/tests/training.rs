use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ucl_core::config::{Paradigm, RunConfig};
use ucl_core::data::{synthetic_blobs, two_view_augment, AugConfig, DatasetId, Image, Normalization, SupervisedAugConfig, SyntheticConfig};
use ucl_core::eval::KnnConfig;
use ucl_core::experiment::{build_learner, run_trial, Corpus, TrialStart};
use ucl_core::models::{ArchConfig, BackboneConfig, ProjectorConfig};
use ucl_core::optim::SgdConfig;
use ucl_core::strategies::{Learner, Mixing, SclBatch, StrategyConfig, UclBatch};
use ucl_core::Tensor;

const SIZE: usize = 8;

fn desk(paradigm: Paradigm, strategy: StrategyConfig) -> RunConfig {
    RunConfig {
        dataset: DatasetId::Synthetic,
        paradigm,
        strategy,
        num_tasks: 3,
        classes_per_task: 2,
        epochs: 1,
        batch_size: 8,
        trials: 1,
        arch: ArchConfig {
            backbone: BackboneConfig::TinyConv { width: 2 },
            input_size: SIZE,
            projector: ProjectorConfig { layers: 2, hidden: 8, out: 8, final_norm: true },
            ..ArchConfig::default()
        },
        augment: AugConfig::for_size(SIZE),
        supervised_augment: SupervisedAugConfig { size: SIZE, padding: 1, flip_p: 0.5 },
        knn: KnnConfig { k: 20, ..KnnConfig::default() },
        synthetic: SyntheticConfig { train_per_class: 8, test_per_class: 4, size: SIZE, ..SyntheticConfig::default() },
        optimizer: SgdConfig { lr: 0.05, ..SgdConfig::default() },
        ..RunConfig::default()
    }
}

fn corpus(cfg: &RunConfig) -> Corpus {
    let (tr, te) = synthetic_blobs(&cfg.synthetic).unwrap();
    Corpus::new(cfg, tr, te).unwrap()
}

fn images(rng: &mut ChaCha8Rng, n: usize) -> Vec<Image> {
    (0..n).map(|_| Image::new(3, SIZE, SIZE, (0..3 * SIZE * SIZE).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()).collect()
}

fn ucl_batch(learner: &Learner, rng: &mut ChaCha8Rng) -> UclBatch {
    let imgs = images(rng, 6);
    let (mut v1, mut v2) = (Vec::new(), Vec::new());
    for (i, img) in imgs.iter().enumerate() {
        let p = two_view_augment(img, i, &learner.aug, &learner.norm, rng).unwrap();
        v1.push(p.view1);
        v2.push(p.view2);
    }
    UclBatch { view1: Tensor::stack(&v1).unwrap(), view2: Tensor::stack(&v2).unwrap(), images: imgs }
}

fn scl_batch(learner: &Learner, task: usize, rng: &mut ChaCha8Rng) -> SclBatch {
    let imgs = images(rng, 6);
    let inputs = learner.clean_batch(&imgs).unwrap();
    let labels = (0..6).map(|i| i % 2).collect();
    SclBatch { inputs, labels, task_ids: vec![task; 6], images: imgs }
}

/// Runs ten steps of two learners on shared batches and step rngs: six on
/// task 0, then four on task 1. Returns whether every parameter and running
/// statistic stayed bit-identical after each step.
fn same_trajectory(paradigm: Paradigm, a: StrategyConfig, b: StrategyConfig) -> bool {
    let norm = Normalization::identity(3);
    let mut la = build_learner(&desk(paradigm, a), 5, &norm).unwrap();
    let mut lb = build_learner(&desk(paradigm, b), 5, &norm).unwrap();
    let mut data = ChaCha8Rng::seed_from_u64(11);
    for step in 0..10u64 {
        let task = if step < 6 { 0 } else { 1 };
        if step == 6 {
            for l in [&mut la, &mut lb] {
                l.end_task(0).unwrap();
                l.begin_task(1);
            }
        }
        let seed = 1000 + step;
        match paradigm {
            Paradigm::Scl => {
                let batch = scl_batch(&la, task, &mut data);
                la.step_scl(&batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                lb.step_scl(&batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            }
            _ => {
                let batch = ucl_batch(&la, &mut data);
                la.step_ucl(&batch, task, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                lb.step_ucl(&batch, task, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            }
        }
        let bits =
            |l: &Learner| l.bundle.store.entries().iter().flat_map(|e| e.value.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        if bits(&la) != bits(&lb) {
            return false;
        }
    }
    true
}

#[test]
fn degenerate_strategies_reduce_to_finetune() {
    let ft = StrategyConfig::Finetune;
    let der0 = StrategyConfig::Der { alpha: 0.0, buffer_size: 8, target: Default::default() };
    assert!(same_trajectory(Paradigm::UclSimsiam, ft.clone(), der0.clone()));
    assert!(same_trajectory(Paradigm::Scl, ft.clone(), der0));
    let lump1 = StrategyConfig::Lump { mixing: Mixing::Fixed(1.0), buffer_size: 8 };
    assert!(same_trajectory(Paradigm::UclSimsiam, ft.clone(), lump1));
    let empty = StrategyConfig::Lump { mixing: Mixing::Beta(0.4), buffer_size: 0 };
    assert!(same_trajectory(Paradigm::UclBarlow, ft.clone(), empty));
    assert!(same_trajectory(Paradigm::UclSimsiam, ft.clone(), StrategyConfig::Si { c: 0.0, xi: 1.0 }));
}

#[test]
fn non_degenerate_strategies_diverge() {
    let ft = StrategyConfig::Finetune;
    let der = StrategyConfig::Der { alpha: 0.5, buffer_size: 8, target: Default::default() };
    assert!(!same_trajectory(Paradigm::UclSimsiam, ft.clone(), der));
    let lump = StrategyConfig::Lump { mixing: Mixing::Fixed(0.5), buffer_size: 8 };
    assert!(!same_trajectory(Paradigm::UclSimsiam, ft, lump));
}

#[test]
fn trial_is_deterministic_and_complete() {
    let cfg = desk(Paradigm::UclSimsiam, StrategyConfig::Lump { mixing: Mixing::Beta(0.1), buffer_size: 16 });
    let c = corpus(&cfg);
    let a = run_trial(&cfg, &c, 3, TrialStart::Fresh, &mut ()).unwrap();
    let b = run_trial(&cfg, &c, 3, TrialStart::Fresh, &mut ()).unwrap();
    assert_eq!(a, b);
    assert!(a.matrix.is_complete());
    assert!(a.forgetting.unwrap() >= 0.0);
    assert_eq!(a.epoch_losses.len(), 3);
    let other = run_trial(&cfg, &c, 4, TrialStart::Fresh, &mut ()).unwrap();
    assert_ne!(other.stream, a.stream);
}

#[test]
fn single_task_has_no_forgetting() {
    let cfg = RunConfig { num_tasks: 1, ..desk(Paradigm::UclBarlow, StrategyConfig::Finetune) };
    let out = run_trial(&cfg, &corpus(&cfg), 0, TrialStart::Fresh, &mut ()).unwrap();
    assert_eq!(out.forgetting, None);
    assert_eq!(out.average_accuracy, out.matrix.get(0, 0).unwrap());
}

#[test]
fn multitask_fills_only_the_last_row() {
    let cfg = desk(Paradigm::UclSimsiam, StrategyConfig::Multitask);
    let out = run_trial(&cfg, &corpus(&cfg), 0, TrialStart::Fresh, &mut ()).unwrap();
    assert!(out.matrix.row_complete(2));
    assert!(!out.matrix.row_complete(0));
    assert_eq!(out.forgetting, None);
}

#[test]
fn supervised_der_and_si_trials_run() {
    for s in [StrategyConfig::Der { alpha: 0.3, buffer_size: 8, target: Default::default() }, StrategyConfig::Si { c: 1.0, xi: 1.0 }] {
        let cfg = desk(Paradigm::Scl, s);
        let out = run_trial(&cfg, &corpus(&cfg), 1, TrialStart::Fresh, &mut ()).unwrap();
        assert!(out.matrix.is_complete());
    }
    let lump = desk(Paradigm::Scl, StrategyConfig::Lump { mixing: Mixing::Beta(0.1), buffer_size: 8 });
    assert!(lump.validate().is_err());
}
