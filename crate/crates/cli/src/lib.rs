//! The `unas` command line: search, eval, check-estimators and fit-latency.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use unas_core::checks::{run_suite, SuiteSize};
use unas_core::estimators::{EstimatorKind, Verdict};
use unas_core::search::{
    fit_device_surrogate, run_eval, run_search, write_metrics_csv, Checkpoint, SearchConfig,
};
use unas_core::space::{export_dot, CellArch, SearchSpace};
use unas_core::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "unas",
    version,
    about = "Architecture search with unbiased discrete gradient estimators"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a search and write metrics, architecture, DOT, report and checkpoints.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "unas-out")]
        out: PathBuf,
    },
    /// Retrain a fixed architecture from scratch and report validation error.
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare every estimator with the enumeration oracle on a problem suite.
    CheckEstimators {
        #[arg(long, default_value = "small")]
        suite: String,
    },
    /// Fit the linear latency surrogate for the configured device.
    FitLatency {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalAbort { .. }
        | Error::NonFiniteGradient { .. }
        | Error::NonFiniteLogits { .. } => EXIT_NUMERICAL,
        Error::Config(_)
        | Error::Parse(_)
        | Error::Io(_)
        | Error::SiteCount { .. }
        | Error::SiteArity { .. }
        | Error::BadChoice { .. }
        | Error::BadTemperature(_)
        | Error::TooFewChoices { .. }
        | Error::MissingRelaxation { .. }
        | Error::MissingSurrogate
        | Error::RankDeficient { .. }
        | Error::TooFewSamples { .. }
        | Error::SpaceTooLarge { .. } => EXIT_VALIDATION,
        _ => EXIT_FAILURE,
    }
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<SearchConfig, Error> {
    SearchConfig::from_toml(&read(path)?).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn write_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), Error> {
    fs::write(
        path,
        serde_json::to_string(c).map_err(|e| Error::Io(std::io::Error::other(e)))?,
    )?;
    Ok(())
}

/// Runs `cli`, returning what should go to stdout.
pub fn run(cli: Cli) -> Result<String, Error> {
    match cli.command {
        Command::Search { config, seed, out } => search(&config, seed, &out),
        Command::Eval { arch, config } => eval(&arch, &config),
        Command::CheckEstimators { suite } => check_estimators(suite.parse()?),
        Command::FitLatency { config } => fit_latency(&config),
    }
}

fn search(config: &Path, seed: Option<u64>, out: &Path) -> Result<String, Error> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out.join("checkpoints"))?;
    let outcome = match run_search(&cfg) {
        Ok(o) => o,
        Err(Error::NumericalAbort { step, checkpoint }) => {
            write_checkpoint(&out.join("abort-checkpoint.json"), &checkpoint)?;
            return Err(Error::NumericalAbort { step, checkpoint });
        }
        Err(e) => return Err(e),
    };
    write_metrics_csv(&outcome.metrics, fs::File::create(out.join("metrics.csv"))?)?;
    fs::write(
        out.join("arch.json"),
        outcome.space.to_json(&outcome.extraction.arch),
    )?;
    if let SearchSpace::Factorized(_) = &outcome.space {
        let cell = CellArch::from_flat(&outcome.extraction.arch);
        fs::write(
            out.join("cell.dot"),
            export_dot(&cell, outcome.space.op_names()),
        )?;
    }
    let report = outcome.report();
    fs::write(out.join("report.txt"), &report)?;
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "arch": outcome.space.to_map(&outcome.extraction.arch),
        "ties": outcome.extraction.ties,
        "final": outcome.final_metrics,
        "estimator": outcome.estimator_summary,
        "latency_target": outcome.latency_target,
    });
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    for c in &outcome.checkpoints {
        write_checkpoint(
            &out.join("checkpoints")
                .join(format!("step-{:06}.json", c.step)),
            c,
        )?;
    }
    Ok(format!("{report}\nwrote {}\n", out.display()))
}

fn eval(arch: &Path, config: &Path) -> Result<String, Error> {
    let cfg = load_config(config)?;
    let space = cfg.search_space();
    let a = space.arch_from_json(&read(arch)?).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", arch.display())),
        other => other,
    })?;
    let r = run_eval(&cfg, &a)?;
    let mut s = String::new();
    let _ = writeln!(s, "seed: {}", cfg.seed);
    let _ = writeln!(s, "steps: {}", r.steps);
    let _ = writeln!(s, "train_loss: {:.6}", r.train_loss);
    let _ = writeln!(s, "val_loss: {:.6}", r.val_loss);
    let _ = writeln!(s, "train_error: {:.6}", r.train_error);
    let _ = writeln!(s, "val_error: {:.6}", r.val_error);
    let _ = writeln!(s, "penalty: {:.6}", r.penalty);
    if let Some(l) = r.latency {
        let _ = writeln!(s, "latency: {l:.6}");
    }
    if let Some(v) = r.planted_value {
        let _ = writeln!(s, "planted_value: {v:.6}");
    }
    Ok(s)
}

fn check_estimators(size: SuiteSize) -> Result<String, Error> {
    let rows = run_suite(size)?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<22} {:<19} {:>8} {:>7} {:>9} {:>12} {:>8} {:>7}",
        "problem", "estimator", "samples", "max_z", "verdict", "variance", "vs_rf", "secs"
    );
    let mut unexpected = 0;
    for r in &rows {
        let _ = writeln!(
            s,
            "{:<22} {:<19} {:>8} {:>7.2} {:>9} {:>12.4e} {:>8.3} {:>7.2}",
            r.problem,
            r.estimator.to_string(),
            r.samples,
            r.max_z,
            r.verdict.to_string(),
            r.total_variance,
            r.variance_ratio,
            r.seconds
        );
        if r.estimator != EstimatorKind::GumbelSoftmax && r.verdict == Verdict::Biased {
            unexpected += 1;
        }
    }
    let _ = writeln!(
        s,
        "\n{} rows; {unexpected} unbiased-estimator rows flagged biased (|bias| > 3 SE); gs_only is expected to be biased",
        rows.len()
    );
    Ok(s)
}

fn fit_latency(config: &Path) -> Result<String, Error> {
    let cfg = load_config(config)?;
    let space = cfg.layerwise_spec()?;
    let (device, model, report) = fit_device_surrogate(&cfg)?;
    let mut s = String::new();
    let _ = writeln!(s, "device: {:?}, seed {}", device.kind, cfg.device_seed);
    let _ = writeln!(
        s,
        "samples: {} train, {} held out",
        report.n_train, report.n_test
    );
    let _ = writeln!(s, "r2_train: {:.12}", report.r2_train);
    let _ = writeln!(s, "r2_test: {:.12}", report.r2_test);
    let _ = writeln!(s, "rmse_test: {:.6e}", report.rmse_test);
    let _ = writeln!(s, "intercept: {:.9}", model.intercept);
    for (l, row) in model.coeffs.iter().enumerate() {
        let cells: Vec<String> = space
            .op_names
            .iter()
            .zip(row)
            .map(|(n, c)| format!("{n}={c:.9}"))
            .collect();
        let _ = writeln!(s, "layer{l}: {}", cells.join(" "));
    }
    Ok(s)
}
