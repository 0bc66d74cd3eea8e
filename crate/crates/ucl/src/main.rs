use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ucl::analyze::{analyze, AnalysisKind, AnalyzeOptions};
use ucl::config_file::{config_to_toml, load_config, parse_override};
use ucl::plots::emit_plots;
use ucl::record::{read_record_dir, RunRecord};
use ucl::runner::{default_output_dir, run_experiment, run_fewshot_sweep, run_ood_eval, RunOptions};
use ucl::{Result, UclError};
use ucl_core::config::{Paradigm, RunConfig};
use ucl_core::data::DatasetId;

/// Exit status when every command step succeeded but a trial aborted.
const ABORTED: u8 = 3;

#[derive(Parser)]
#[command(name = "ucl", version, about = "Unsupervised continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cka,
    L2,
    Landscape,
    Features,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate every trial of a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run a single trial with this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. `--set optimizer.lr=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Per-task training caps for a few-shot sweep, comma separated.
        #[arg(long, value_delimiter = ',')]
        few_shot: Vec<usize>,
        /// Ignore checkpoints already in the output directory.
        #[arg(long)]
        fresh: bool,
        #[arg(short, long)]
        verbose: bool,
    },
    /// Summarize a record, or probe its final encoders on other datasets.
    Eval {
        #[arg(long)]
        record: PathBuf,
        /// Dataset ids, comma separated; defaults to the config's `ood` list.
        #[arg(long, value_delimiter = ',')]
        ood: Vec<String>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Cap on bank and query images per dataset.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Representation analyses over one or two records.
    Analyze {
        #[arg(long, num_args = 1..=2, required = true)]
        records: Vec<PathBuf>,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Defaults to `<first record>/analysis`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trial: Option<u64>,
        #[arg(long)]
        task: Option<usize>,
        #[arg(long, default_value_t = 512)]
        probe_size: usize,
        #[arg(long, default_value_t = 11)]
        resolution: usize,
        #[arg(long, default_value_t = 1.0)]
        extent: f64,
        #[arg(long, default_value_t = 0)]
        probe_seed: u64,
        #[arg(long, default_value_t = 1)]
        block: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
    },
    /// Figures (PNG and CSV): accuracy, fewshot, cka, l2, landscape, features.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        kind: String,
        /// Defaults to `<first record>/figures`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the reference config for a dataset, paradigm and strategy.
    Config { dataset: String, paradigm: String, strategy: String },
}

fn report(r: &RunRecord) {
    for t in &r.trials {
        match (&t.error, t.average_accuracy) {
            (Some(e), _) => eprintln!("trial {}: aborted: {e}", t.seed),
            (None, Some(a)) => {
                let f = t.forgetting.map_or("n/a".to_string(), |f| format!("{f:.4}"));
                println!("trial {}: accuracy {a:.4}, forgetting {f}", t.seed);
            }
            _ => {}
        }
    }
    if let Some(a) = r.summary.average_accuracy {
        println!("accuracy {:.4} ± {:.4} over {} trials", a.mean, a.std, a.n);
    }
    if let Some(f) = r.summary.forgetting {
        println!("forgetting {:.4} ± {:.4}", f.mean, f.std);
    }
}

fn parse_paradigm(s: &str) -> Result<Paradigm> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| UclError::Usage(format!("unknown paradigm `{s}`")))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { config, seed, out, overrides, few_shot, fresh, verbose } => {
            let overrides = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
            let mut cfg: RunConfig = load_config(&config, &overrides)?;
            if let Some(s) = seed {
                cfg.base_seed = s;
                cfg.trials = 1;
            }
            if let Some(o) = &out {
                cfg.out_dir = Some(o.display().to_string());
            }
            let dir = default_output_dir(&cfg);
            let opts = RunOptions { resume: !fresh, verbose, ..RunOptions::default() };
            let records = if few_shot.is_empty() {
                vec![run_experiment(&cfg, &dir, &opts)?]
            } else {
                run_fewshot_sweep(&cfg, &few_shot, &dir, &opts)?
            };
            for r in &records {
                if let Some(c) = r.few_shot_cap {
                    println!("cap {c}:");
                }
                report(r);
            }
            println!("wrote {}", dir.display());
            Ok(records.iter().all(|r| !r.any_aborted()))
        }
        Cmd::Eval { record, ood, data_root, limit } => {
            let r = read_record_dir(&record)?;
            let ids: Vec<DatasetId> =
                if ood.is_empty() { r.config.ood.clone() } else { ood.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>()? };
            if ids.is_empty() {
                report(&r);
                return Ok(!r.any_aborted());
            }
            let table = run_ood_eval(&record, &ids, data_root.as_deref(), limit)?;
            for (d, m) in &table.summary {
                println!("{d}: {:.4} ± {:.4} over {} trials", m.mean, m.std, m.n);
            }
            Ok(true)
        }
        Cmd::Analyze { records, kind, out, trial, task, probe_size, resolution, extent, probe_seed, block, channels } => {
            let kind = match kind {
                Kind::Cka => AnalysisKind::Cka,
                Kind::L2 => AnalysisKind::L2,
                Kind::Landscape => AnalysisKind::Landscape,
                Kind::Features => AnalysisKind::Features,
            };
            let opts = AnalyzeOptions { trial, task, probe_size: Some(probe_size), resolution, extent, probe_seed, block, channels };
            let out = out.unwrap_or_else(|| records[0].join("analysis"));
            analyze(&records, kind, &opts, &out)?;
            println!("wrote {}", ucl::analyze::analysis_path(&out, kind).display());
            Ok(true)
        }
        Cmd::Plot { records, kind, out } => {
            let out = out.unwrap_or_else(|| records[0].join("figures"));
            for f in emit_plots(&records, &kind, &out)? {
                println!("wrote {}", f.display());
            }
            Ok(true)
        }
        Cmd::Config { dataset, paradigm, strategy } => {
            let cfg = RunConfig::reference(dataset.parse()?, parse_paradigm(&paradigm)?, &strategy)?;
            print!("{}", config_to_toml(&cfg)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(ABORTED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
