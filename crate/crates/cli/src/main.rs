//! `nora`: dataset generation, training, evaluation, SNR sweeps, and
//! gradient checking for the message-passing estimators in `nora-core`.
//!
//! Exit codes: 0 success, 1 domain error (one `error: ...` line on stderr),
//! 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nora_core::metrics::{evaluate, rows_to_csv, sweep_snr, Estimator};
use nora_core::pilots::{assemble_expanded_pilot, build_lds_graph, gen_zc_bank, ExpandedPilot};
use nora_core::scenario::{
    generate_dataset, generate_dataset_mixed, read_dataset, write_dataset, Dataset,
};
use nora_core::training::{grad_check, train, TrainConfig, GRAD_TOL};
use nora_core::unfolded::{load_checkpoint, save_checkpoint, WeightSet};
use nora_core::SystemConfig;

#[derive(Parser)]
#[command(name = "nora", version, about = "Grant-free random access link-level toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// System config file (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; subcommands that can stream default to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file of simulated random-access slots.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Samples per SNR point (or total with --mixed-snr).
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// SNR points in dB, comma separated.
        #[arg(long, default_value = "10", value_delimiter = ',')]
        snr: Vec<f64>,
        /// Draw each sample's SNR uniformly from the list instead of
        /// generating per-SNR blocks.
        #[arg(long)]
        mixed_snr: bool,
    },
    /// Train unfolded weights on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 200)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Samples held out from the end of the dataset.
        #[arg(long, default_value_t = 1000)]
        holdout: usize,
        /// Use plain SGD instead of Adam.
        #[arg(long)]
        sgd: bool,
        /// Training log CSV path; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate estimators on an existing dataset file.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset file produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated subset of mp-bsbl,dnn,bomp,ga-mmse.
        #[arg(long, default_value = "mp-bsbl,bomp,ga-mmse", value_delimiter = ',')]
        estimators: Vec<String>,
        /// Checkpoint with trained weights; required for the dnn estimator.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Generate fresh test sets across SNR points and evaluate estimators.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "0,5,10,15", value_delimiter = ',')]
        snr: Vec<f64>,
        /// Test samples per SNR point.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value = "mp-bsbl,bomp,ga-mmse", value_delimiter = ',')]
        estimators: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

enum CliError {
    Usage(String),
    Domain(nora_core::Error),
}

impl From<nora_core::Error> for CliError {
    fn from(e: nora_core::Error) -> Self {
        CliError::Domain(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn load_cfg(path: &Path) -> CliResult<(SystemConfig, ExpandedPilot)> {
    let cfg = SystemConfig::from_file(path)?;
    let bank = gen_zc_bank(cfg.lt, cfg.k)?;
    let graph = build_lds_graph(cfg.n, cfg.k, cfg.dc, cfg.graph_seed)?;
    let pilot = assemble_expanded_pilot(&bank, &graph);
    Ok((cfg, pilot))
}

fn load_weights(
    checkpoint: &Option<PathBuf>,
    cfg: &SystemConfig,
) -> CliResult<Option<WeightSet>> {
    match checkpoint {
        Some(p) => Ok(Some(load_checkpoint(p, cfg)?.0)),
        None => Ok(None),
    }
}

fn pick_estimators<'a>(
    names: &[String],
    weights: &'a Option<WeightSet>,
) -> CliResult<Vec<Estimator<'a>>> {
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        out.push(match name.as_str() {
            "mp-bsbl" => Estimator::MpBsbl,
            "bomp" => Estimator::Bomp,
            "ga-mmse" => Estimator::GaMmse,
            "dnn" => match weights {
                Some(ws) => Estimator::Dnn(ws),
                None => {
                    return Err(CliError::Usage(
                        "the dnn estimator needs --checkpoint".into(),
                    ))
                }
            },
            other => {
                return Err(CliError::Usage(format!(
                    "unknown estimator {:?}; expected mp-bsbl, dnn, bomp, or ga-mmse",
                    other
                )))
            }
        });
    }
    Ok(out)
}

fn emit(out: &Option<PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Domain(e.into())),
        None => {
            print!("{}", text);
            Ok(())
        }
    }
}

fn read_verified_dataset(path: &Path, cfg: &SystemConfig) -> CliResult<Dataset> {
    let ds = read_dataset(path)?;
    ds.verify_against(cfg)?;
    Ok(ds)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen {
            common,
            count,
            snr,
            mixed_snr,
        } => {
            let (cfg, pilot) = load_cfg(&common.config)?;
            if snr.is_empty() {
                return Err(CliError::Usage("--snr needs at least one value".into()));
            }
            let out = common
                .out
                .ok_or_else(|| CliError::Usage("gen needs --out for the dataset file".into()))?;
            let ds = if mixed_snr {
                generate_dataset_mixed(&cfg, &pilot, &snr, count, common.seed)
            } else {
                generate_dataset(&cfg, &pilot, &snr, count, common.seed)
            };
            write_dataset(&ds, &out)?;
            eprintln!(
                "wrote {} samples ({} SNR points) to {}",
                ds.samples.len(),
                snr.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            data,
            epochs,
            batch,
            lr,
            holdout,
            sgd,
            log,
        } => {
            let (cfg, pilot) = load_cfg(&common.config)?;
            let out = common
                .out
                .ok_or_else(|| CliError::Usage("train needs --out for the checkpoint".into()))?;
            let ds = read_verified_dataset(&data, &cfg)?;
            let mut tc = TrainConfig::new(epochs, batch, lr, holdout);
            tc.shuffle_seed = common.seed;
            tc.use_sgd = sgd;
            let (ws, report) = train(&ds, &pilot, &cfg, &tc)?;
            save_checkpoint(&out, &ws, None)?;
            let mut csv = String::from("epoch,loss,nmse_holdout,seconds\n");
            csv.push_str(&format!("0,,{},\n", report.init_nmse));
            for e in 0..report.epoch_loss.len() {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    e + 1,
                    report.epoch_loss[e],
                    report.epoch_nmse[e],
                    report.epoch_seconds[e]
                ));
            }
            emit(&log, &csv)?;
            eprintln!(
                "best epoch {} holdout nmse {:.6} (init {:.6}); checkpoint {}{}",
                report.best_epoch,
                report.best_nmse,
                report.init_nmse,
                out.display(),
                report
                    .note
                    .as_deref()
                    .map(|n| format!("; note: {}", n))
                    .unwrap_or_default()
            );
            Ok(())
        }
        Command::Eval {
            common,
            data,
            estimators,
            checkpoint,
        } => {
            let (cfg, pilot) = load_cfg(&common.config)?;
            let ds = read_verified_dataset(&data, &cfg)?;
            let weights = load_weights(&checkpoint, &cfg)?;
            let ests = pick_estimators(&estimators, &weights)?;
            let rows = evaluate(&cfg, &pilot, &ds.samples, &ests, common.seed)?;
            emit(&common.out, &rows_to_csv(&rows))
        }
        Command::Sweep {
            common,
            snr,
            count,
            estimators,
            checkpoint,
        } => {
            let (cfg, pilot) = load_cfg(&common.config)?;
            let weights = load_weights(&checkpoint, &cfg)?;
            let ests = pick_estimators(&estimators, &weights)?;
            let rows = sweep_snr(&cfg, &pilot, &snr, &ests, count, common.seed)?;
            emit(&common.out, &rows_to_csv(&rows))
        }
        Command::Gradcheck { common, trials } => {
            let (cfg, _) = load_cfg(&common.config)?;
            let max_rel = grad_check(&cfg, trials, common.seed)?;
            println!("max_rel_err={:e} tol={:e} trials={}", max_rel, GRAD_TOL, trials);
            if max_rel < GRAD_TOL {
                Ok(())
            } else {
                Err(CliError::Domain(nora_core::Error::Numerical(format!(
                    "gradient check failed: {:e} >= {:e}",
                    max_rel, GRAD_TOL
                ))))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: usage: {}", msg);
            ExitCode::from(2)
        }
        Err(CliError::Domain(e)) => {
            eprintln!("error: {}", e);
            ExitCode::from(1)
        }
    }
}
