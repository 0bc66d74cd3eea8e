mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny;
use ucl::config_file::{config_to_toml, load_config};
use ucl::record::read_record_dir;
use ucl_core::config::{Paradigm, RunConfig};
use ucl_core::data::DatasetId;
use ucl_core::strategies::StrategyConfig;

fn ucl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucl")).args(args).output().unwrap()
}

fn write_cfg(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.cfg");
    std::fs::write(&p, config_to_toml(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_analyze_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(StrategyConfig::Finetune, 2, 2));
    let out = dir.path().join("run");
    let o = ucl(&["train", "--config", s(&cfg), "--seed", "7", "--out", s(&out), "--set", "epochs=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_record_dir(&out).unwrap();
    assert_eq!(r.trials.iter().map(|t| t.seed).collect::<Vec<_>>(), vec![7]);
    assert_eq!(r.config.epochs, 2);
    assert!(out.join("trial_7/checkpoints/task_1.ckpt").is_file());

    let o = ucl(&["eval", "--record", s(&out)]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("trial 7: accuracy"));
    let o = ucl(&["eval", "--record", s(&out), "--ood", "synthetic", "--limit", "12"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("ood.csv").is_file());

    let o = ucl(&["analyze", "--records", s(&out), "--kind", "l2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ucl(&["plot", "--records", s(&out), "--kind", "l2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("figures/l2.png").is_file() && out.join("figures/l2.csv").is_file());
    let o = ucl(&["plot", "--records", s(&out), "--kind", "accuracy"]);
    assert!(o.status.success());
}

#[test]
fn aborted_trial_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(StrategyConfig::Finetune, 2, 1));
    let out = dir.path().join("run");
    assert!(ucl(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    // Resuming into checkpoints of a different architecture aborts the trial.
    let o = ucl(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "arch.projector.out=4"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("aborted"));
    assert!(read_record_dir(&out).unwrap().any_aborted());
    let o = ucl(&["eval", "--record", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    // A fresh start discards the old checkpoints.
    let o = ucl(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "arch.projector.out=4", "--fresh"]);
    assert!(o.status.success());
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &tiny(StrategyConfig::Finetune, 2, 1));
    let out = dir.path().join("run");
    assert_eq!(ucl(&["train", "--config", s(&cfg), "--out", s(&out), "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(ucl(&["train", "--config", s(&dir.path().join("missing.cfg"))]).status.code(), Some(1));
    let mut c = tiny(StrategyConfig::Finetune, 2, 1);
    c.dataset = DatasetId::Cifar10;
    c.data_root = Some(s(&dir.path().join("empty")).to_string());
    let cfg = write_cfg(dir.path(), &c);
    assert_eq!(ucl(&["train", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(ucl(&["eval", "--record", s(&dir.path().join("nope"))]).status.code(), Some(1));
    assert!(!ucl(&["analyze", "--records", "a", "b", "c", "--kind", "cka"]).status.success());
    assert!(!ucl(&["train"]).status.success());
}

#[test]
fn reference_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper");
    let mut n = 0;
    for d in [DatasetId::Cifar10, DatasetId::Cifar100, DatasetId::TinyImagenet] {
        for p in [Paradigm::UclSimsiam, Paradigm::UclBarlow, Paradigm::Scl] {
            for st in ["finetune", "si", "der", "lump", "multitask"] {
                let Ok(expected) = RunConfig::reference(d, p, st) else { continue };
                let path = dir.join(format!("{}.cfg", expected.name));
                assert_eq!(load_config(&path, &[]).unwrap(), expected, "{}", path.display());
                n += 1;
            }
        }
    }
    assert_eq!(n, 42);
    assert_eq!(std::fs::read_dir(&dir).unwrap().count(), 42);
    let o = ucl(&["config", "cifar100", "ucl_barlow", "der"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), std::fs::read_to_string(dir.join("cifar100_ucl_barlow_der.cfg")).unwrap());
}

#[test]
fn desk_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk_ucl_finetune", "desk_ucl_lump", "desk_scl_finetune"] {
        let c = load_config(&dir.join(format!("{name}.cfg")), &[]).unwrap();
        assert_eq!((c.dataset, c.num_tasks, c.epochs, c.trials), (DatasetId::Synthetic, 3, 10, 3));
        assert_eq!(c.synthetic.train_per_class * c.classes_per_task, 200);
    }
}
