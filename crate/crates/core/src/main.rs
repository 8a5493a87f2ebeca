use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prunekit::config::RunConfig;
use prunekit::controller::{PolicyKind, Termination};
use prunekit::data::DatasetSpec;
use prunekit::experiment::{
    self, fixed_rate_csv, fixed_rate_run, methods_csv, oneshot_compare, oneshot_sweep, rewind_csv, rewinding_sweep, Baseline,
    FixedCriterion,
};
use prunekit::model::{export_compact, load_checkpoint, save_checkpoint, total_accounting};
use prunekit::report::build_report;
use prunekit::train::evaluate_top1;
use prunekit::{Error, ModelState};

const EXIT_VALIDATION: u8 = 1;
const EXIT_BUDGET: u8 = 2;
const EXIT_FAILED: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Adaptive activation-based structured filter pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the adaptive pruning loop.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute a run's per-round numbers from its checkpoints.
    Report {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Write a physically smaller copy of a checkpoint without pruned filters.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1 accuracy of a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `blobs[:k=v,...]`, `cifar10:DIR` or a JSON dataset spec file.
        #[arg(long)]
        dataset: String,
    },
    /// Ablation and baseline sweeps.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Percent of filters pruned per layer; overrides prune_rate_pct.
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    AttentionFunctionSweep,
    FixedRateIap,
    FixedRateIlp,
    Oneshot,
    RewindingSweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } | Error::Checkpoint(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            })
        }
    }
}

fn dispatch(cmd: Command) -> prunekit::Result<u8> {
    match cmd {
        Command::Run { config, seed } => run(&config, seed),
        Command::Report { dir, format } => {
            let report = build_report(&dir)?;
            match format {
                Format::Csv => print!("{}", report.to_csv()),
                Format::Json => println!("{}", report.to_json()),
            }
            for d in &report.discrepancies {
                eprintln!("discrepancy: {d}");
            }
            Ok(if report.discrepancies.is_empty() { 0 } else { EXIT_VALIDATION })
        }
        Command::Export { ckpt, out } => {
            let model = load_checkpoint(&ckpt)?;
            let compact = export_compact(&model)?;
            save_checkpoint(&compact, &out)?;
            let dense = total_accounting(&ModelState::zeros(model.arch.clone())?);
            let after = total_accounting(&compact);
            println!(
                "params {} -> {} (-{:.4}%)",
                dense.total_params,
                after.total_params,
                after.params_reduction_pct(&dense)
            );
            println!(
                "flops {} -> {} (-{:.4}%)",
                dense.total_flops,
                after.total_flops,
                after.flops_reduction_pct(&dense)
            );
            println!(
                "stored weights {} -> {}",
                model.stored_param_count(),
                compact.stored_param_count()
            );
            Ok(0)
        }
        Command::Eval { ckpt, dataset } => {
            let model = load_checkpoint(&ckpt)?;
            let spec: DatasetSpec = dataset.parse()?;
            let splits = spec.load()?;
            let acc = evaluate_top1(&model, &splits.test)?;
            println!("accuracy {acc:.4} on {} test samples", splits.test.len());
            Ok(0)
        }
        Command::Ablate {
            config,
            mode,
            rate,
            seed,
        } => ablate(&config, mode, rate, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> prunekit::Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_root(cfg: &RunConfig) -> PathBuf {
    std::env::var_os("PRUNEKIT_OUT")
        .map(PathBuf::from)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn fresh_dir(root: &Path, label: &str) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{label}_{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    dir
}

fn run(config: &Path, seed: Option<u64>) -> prunekit::Result<u8> {
    let cfg = load_config(config, seed)?;
    let dir = fresh_dir(&output_root(&cfg), &format!("run_seed{}", cfg.seed));
    let out = experiment::run_experiment(&cfg, &dir)?;
    let r = &out.report;
    println!("run dir {}", dir.display());
    println!(
        "status {:?} after {} rounds; final round {} acc {:.4} (loss {:.3}) params -{:.2}% flops -{:.2}%",
        r.status, r.rounds_run, r.final_round, r.final_accuracy, r.final_acc_loss, r.params_reduction_pct, r.flops_reduction_pct
    );
    Ok(match r.status {
        Termination::Converged => 0,
        Termination::BudgetExhausted => EXIT_BUDGET,
        Termination::Failed => EXIT_FAILED,
    })
}

fn ablate(config: &Path, mode: Mode, rate: Option<f64>, seed: Option<u64>) -> prunekit::Result<u8> {
    let cfg = load_config(config, seed)?;
    let rate_pct = rate.or(cfg.prune_rate_pct);
    let fraction = |default: f64| -> prunekit::Result<f64> {
        match rate_pct {
            Some(r) if (0.0..=100.0).contains(&r) => Ok(r / 100.0),
            Some(_) => Err(Error::Validation {
                keys: vec!["prune_rate_pct".into()],
            }),
            None if default > 0.0 => Ok(default),
            None => Err(Error::Validation {
                keys: vec!["prune_rate_pct".into()],
            }),
        }
    };
    let (name, csv) = match mode {
        Mode::AttentionFunctionSweep => {
            let f = fraction(0.5)?;
            let baseline = Baseline::train(&cfg)?;
            ("methods.csv", methods_csv(&oneshot_sweep(&baseline, f)?))
        }
        Mode::Oneshot => {
            let f = fraction(0.5)?;
            let baseline = Baseline::train(&cfg)?;
            ("oneshot.csv", methods_csv(&oneshot_compare(&baseline, f)?))
        }
        Mode::FixedRateIap | Mode::FixedRateIlp => {
            let f = fraction(0.0)?;
            let criterion = match mode {
                Mode::FixedRateIap => FixedCriterion::Attention,
                _ => FixedCriterion::L1Norm,
            };
            let stop = match cfg.policy.kind {
                PolicyKind::AccuracyGuaranteed => cfg.policy.target,
                _ => f64::INFINITY,
            };
            let baseline = Baseline::train(&cfg)?;
            let rows = fixed_rate_run(&baseline, criterion, f, stop, 100.0, cfg.controller.max_rounds)?;
            ("fixed_rate.csv", fixed_rate_csv(&rows))
        }
        Mode::RewindingSweep => {
            let f = fraction(0.1)?;
            let fractions: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
            ("rewinding.csv", rewind_csv(&rewinding_sweep(&cfg, &fractions, f)?))
        }
    };
    let dir = fresh_dir(&output_root(&cfg), "ablate");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(0)
}
