mod common;

use std::fs;

use common::tiny;
use ucl::checkpoint::load_checkpoint;
use ucl::manifest::read_manifest;
use ucl::record::{read_record_dir, TrialStatus};
use ucl::runner::{run_experiment, run_fewshot_sweep, run_ood_eval, RunOptions};
use ucl::UclError;
use ucl_core::data::DatasetId;
use ucl_core::strategies::{Mixing, StrategyConfig};

fn fresh() -> RunOptions {
    RunOptions { resume: false, ..RunOptions::default() }
}

#[test]
fn two_task_run_writes_the_whole_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyConfig::Finetune, 2, 2);
    let r = run_experiment(&cfg, dir.path(), &fresh()).unwrap();
    assert_eq!(r.trials.len(), 2);
    assert!(!r.any_aborted());
    for t in &r.trials {
        let m = t.accuracy_matrix.as_ref().unwrap();
        assert_eq!(m.num_tasks, 2);
        assert!(m.is_complete());
        assert!(t.forgetting.is_some());
        assert_eq!(t.checkpoints.len(), 2);
        for (task, rel) in &t.checkpoints {
            let ck = load_checkpoint(&dir.path().join(rel)).unwrap();
            assert_eq!((ck.task, ck.trial_seed), (*task, t.seed));
        }
        let man = read_manifest(&dir.path().join(t.manifest.as_ref().unwrap())).unwrap();
        assert_eq!(man.stream.tasks.len(), 2);
    }
    assert_eq!(read_record_dir(dir.path()).unwrap(), r);
    for f in ["record.json", "accuracy_matrix.csv", "config.toml", "trial_0/accuracy_matrix.csv", "trial_1/manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(dir.path().join("accuracy_matrix.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
}

#[test]
fn single_task_has_no_forgetting() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_experiment(&tiny(StrategyConfig::Finetune, 1, 1), dir.path(), &fresh()).unwrap();
    assert_eq!(r.trials[0].forgetting, None);
    assert!(r.summary.forgetting.is_none());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("record.json")).unwrap()).unwrap();
    assert!(json["trials"][0]["forgetting"].is_null());
}

#[test]
fn reruns_are_identical_apart_from_timing() {
    let cfg = tiny(StrategyConfig::Lump { mixing: Mixing::Beta(0.4), buffer_size: 6 }, 2, 1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&cfg, a.path(), &fresh()).unwrap();
    let rb = run_experiment(&cfg, b.path(), &fresh()).unwrap();
    assert_eq!(ra.deterministic_view(), rb.deterministic_view());
    let ca = fs::read(a.path().join("trial_0/checkpoints/task_1.ckpt")).unwrap();
    let cb = fs::read(b.path().join("trial_0/checkpoints/task_1.ckpt")).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let cfg = tiny(StrategyConfig::Der { alpha: 0.1, buffer_size: 6, target: Default::default() }, 3, 1);
    let (full, cut) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let reference = run_experiment(&cfg, full.path(), &fresh()).unwrap();

    let stopped = run_experiment(&cfg, cut.path(), &RunOptions { interrupt_after: Some(0), ..fresh() }).unwrap();
    let t = &stopped.trials[0];
    assert_eq!(t.status, TrialStatus::Aborted);
    assert!(t.error.as_ref().unwrap().contains("stopped after task 0"));
    assert_eq!(t.checkpoints.len(), 1);
    assert!(stopped.any_aborted());

    let resumed = run_experiment(&cfg, cut.path(), &RunOptions::default()).unwrap();
    assert_eq!(resumed.trials[0].resumed_from_task, Some(0));
    assert_eq!(resumed.deterministic_view(), reference.deterministic_view());
    let a = fs::read(full.path().join("trial_0/checkpoints/task_2.ckpt")).unwrap();
    let b = fs::read(cut.path().join("trial_0/checkpoints/task_2.ckpt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_refuses_foreign_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyConfig::Finetune, 2, 1);
    run_experiment(&cfg, dir.path(), &fresh()).unwrap();
    let mut other = cfg.clone();
    other.arch.projector.out = 4;
    let r = run_experiment(&other, dir.path(), &RunOptions::default()).unwrap();
    assert!(r.any_aborted());
    assert!(r.trials[0].error.as_ref().unwrap().contains("different configuration"));
}

#[test]
fn fewshot_sweep_writes_one_record_per_cap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyConfig::Finetune, 2, 1);
    let rs = run_fewshot_sweep(&cfg, &[4, 8], dir.path(), &fresh()).unwrap();
    assert_eq!(rs.len(), 2);
    for (r, cap) in rs.iter().zip([4, 8]) {
        assert_eq!(r.few_shot_cap, Some(cap));
        assert_eq!(r.config.per_task_cap, Some(cap));
        let disk = read_record_dir(&dir.path().join(format!("cap_{cap}"))).unwrap();
        assert_eq!(&disk, r);
        let man = read_manifest(&dir.path().join(format!("cap_{cap}")).join(r.trials[0].manifest.as_ref().unwrap())).unwrap();
        assert!(man.stream.tasks.iter().all(|t| t.train_ids.len() == cap));
    }
    assert!(matches!(run_fewshot_sweep(&cfg, &[], dir.path(), &fresh()), Err(UclError::Usage(_))));
}

#[test]
fn ood_eval_of_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyConfig::Finetune, 2, 2);
    run_experiment(&cfg, dir.path(), &fresh()).unwrap();
    let t = run_ood_eval(dir.path(), &[DatasetId::Synthetic], None, Some(24)).unwrap();
    assert_eq!(t.rows.len(), 2);
    for r in &t.rows {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert_eq!((r.bank_size, r.query_size), (24, 24));
    }
    assert_eq!(t.summary[0].1.n, 2);
    assert!(dir.path().join("ood.json").is_file() && dir.path().join("ood.csv").is_file());
    assert_eq!(run_ood_eval(dir.path(), &[DatasetId::Synthetic], None, Some(24)).unwrap(), t);

    let err = run_ood_eval(dir.path(), &[DatasetId::Mnist], Some(&dir.path().join("nowhere")), None);
    assert!(err.is_err());

    fs::remove_file(dir.path().join("trial_1/checkpoints/task_1.ckpt")).unwrap();
    assert!(matches!(run_ood_eval(dir.path(), &[DatasetId::Synthetic], None, None), Err(UclError::MissingCheckpoint(_))));
}
