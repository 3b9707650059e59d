//! `rdsig`: behavioral rate-distortion signatures from the command line.

mod commands;
mod config;
mod data;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rdsig_core::flags::Flags;
use serde::de::DeserializeOwned;

use crate::config::{FitGrouping, NormGrouping, RunConfig, LOCK_FILE};
use crate::output::OutDir;

/// Result of a successful command; flagged outputs exit with code 2.
pub struct Outcome {
    flagged: Vec<String>,
}

impl Outcome {
    pub fn clean() -> Self {
        Self {
            flagged: Vec::new(),
        }
    }

    pub fn note_flags(&mut self, what: &str, flags: &Flags) {
        if !flags.is_empty() {
            self.flagged.push(format!("{what}: {flags}"));
        }
    }
}

#[derive(Parser)]
#[command(name = "rdsig", version, about = "Rate-distortion signatures of behavioral confusion data")]
struct Cli {
    /// Labels file, one class name per line.
    #[arg(long, global = true)]
    labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config or lock file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample counts from synthetic rate-distortion observers.
    Synth {
        /// Synthetic design (JSON).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Aggregate trial or count CSVs into a canonical counts CSV.
    Ingest(InputArgs),
    /// Fit a cost matrix per unit and trace its frontier.
    Fit {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        trace: TraceArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Trace per-block frontiers under fitted cost matrices.
    Trace {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fits: FitsArg,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Signature table from fitted cost matrices.
    Signatures {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fits: FitsArg,
        #[command(flatten)]
        trace: TraceArgs,
        #[arg(long, value_enum)]
        normalization: Option<NormGrouping>,
    },
    /// Paired contrasts and regressions over a signature table.
    Compare {
        #[arg(long)]
        signatures: Option<PathBuf>,
        #[arg(long)]
        contrasts: Option<PathBuf>,
        /// exact, normal or auto.
        #[arg(long, value_parser = parse_enum::<rdsig_core::stats::WilcoxonMode>)]
        wilcoxon_mode: Option<rdsig_core::stats::WilcoxonMode>,
    },
    /// Severity slopes across ordered conditions of one experiment.
    Severity {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fits: FitsArg,
        #[arg(long)]
        experiment: Option<String>,
        /// Condition ordering, comma separated.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<String>>,
        /// Fit record whose cost matrix is used for every system.
        #[arg(long)]
        rho: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Also write a minimal SVG chart.
        #[arg(long)]
        svg: bool,
    },
    /// Goodness-of-fit diagnostics of fitted cost matrices.
    Report {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        fits: FitsArg,
        #[arg(long)]
        bins: Option<usize>,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Trial or counts CSV (repeatable).
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct FitsArg {
    /// Directory written by `rdsig fit`.
    #[arg(long)]
    fits: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// empirical or uniform.
    #[arg(long, value_parser = parse_enum::<rdsig_core::channel::PriorMode>)]
    prior_mode: Option<rdsig_core::channel::PriorMode>,
    #[arg(long)]
    grid_lo: Option<f64>,
    #[arg(long)]
    grid_hi: Option<f64>,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    ba_tol: Option<f64>,
    #[arg(long)]
    ba_max_iters: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    tau_sym: Option<f64>,
    #[arg(long)]
    tau_asym: Option<f64>,
    #[arg(long, value_enum)]
    grouping: Option<FitGrouping>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Skip Laplace standard errors.
    #[arg(long)]
    no_stderr: bool,
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl InputArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if !self.inputs.is_empty() {
            cfg.inputs = self.inputs;
        }
    }
}

impl FitsArg {
    fn apply(self, cfg: &mut RunConfig) {
        if self.fits.is_some() {
            cfg.fits = self.fits;
        }
    }
}

impl TraceArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.prior_mode, self.prior_mode);
        set(&mut cfg.grid.lo, self.grid_lo);
        set(&mut cfg.grid.hi, self.grid_hi);
        set(&mut cfg.grid.n, self.grid_n);
        set(&mut cfg.ba.tol, self.ba_tol);
        set(&mut cfg.ba.max_iters, self.ba_max_iters);
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Ingest(_) => "ingest",
            Command::Fit { .. } => "fit",
            Command::Trace { .. } => "trace",
            Command::Signatures { .. } => "signatures",
            Command::Compare { .. } => "compare",
            Command::Severity { .. } => "severity",
            Command::Report { .. } => "report",
        }
    }

    fn apply(self, cfg: &mut RunConfig) {
        match self {
            Command::Synth { spec } => {
                if spec.is_some() {
                    cfg.synth_spec = spec;
                }
            }
            Command::Ingest(input) => input.apply(cfg),
            Command::Fit { input, trace, fit } => {
                input.apply(cfg);
                trace.apply(cfg);
                set(&mut cfg.prior.tau_sym, fit.tau_sym);
                set(&mut cfg.prior.tau_asym, fit.tau_asym);
                set(&mut cfg.fit_grouping, fit.grouping);
                set(&mut cfg.optimizer.max_iters, fit.max_iters);
                if fit.no_stderr {
                    cfg.stderr = false;
                }
            }
            Command::Trace { input, fits, trace } => {
                input.apply(cfg);
                fits.apply(cfg);
                trace.apply(cfg);
            }
            Command::Signatures {
                input,
                fits,
                trace,
                normalization,
            } => {
                input.apply(cfg);
                fits.apply(cfg);
                trace.apply(cfg);
                set(&mut cfg.normalization, normalization);
            }
            Command::Compare {
                signatures,
                contrasts,
                wilcoxon_mode,
            } => {
                if signatures.is_some() {
                    cfg.signatures = signatures;
                }
                if contrasts.is_some() {
                    cfg.contrasts = contrasts;
                }
                set(&mut cfg.wilcoxon_mode, wilcoxon_mode);
            }
            Command::Severity {
                input,
                fits,
                experiment,
                levels,
                rho,
                alpha,
                svg,
            } => {
                input.apply(cfg);
                fits.apply(cfg);
                if experiment.is_some() {
                    cfg.experiment = experiment;
                }
                set(&mut cfg.levels, levels);
                if rho.is_some() {
                    cfg.rho = rho;
                }
                set(&mut cfg.alpha, alpha);
                cfg.svg |= svg;
            }
            Command::Report { input, fits, bins } => {
                input.apply(cfg);
                fits.apply(cfg);
                set(&mut cfg.bins, bins);
            }
        }
    }
}

fn dispatch(command: &str, cfg: &RunConfig, out: &mut OutDir) -> Result<Outcome> {
    match command {
        "synth" => commands::synth::run(cfg, out),
        "ingest" => commands::ingest::run(cfg, out),
        "fit" => commands::fit::run_fit(cfg, out),
        "trace" => commands::fit::run_trace(cfg, out),
        "signatures" => commands::signatures::run(cfg, out),
        "compare" => commands::compare::run(cfg, out),
        "severity" => commands::severity::run(cfg, out),
        "report" => commands::report::run(cfg, out),
        other => unreachable!("unknown command {other}"),
    }
}

fn execute(cli: Cli) -> Result<Outcome> {
    let command = cli.command.name();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, command)?,
        None => RunConfig::default(),
    };
    if cli.labels.is_some() {
        cfg.labels = cli.labels;
    }
    if cli.out.is_some() {
        cfg.output_dir = cli.out;
    }
    set(&mut cfg.seed, cli.seed);
    cli.command.apply(&mut cfg);
    cfg.validate()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .context("cannot start worker threads")?;
    let mut out = OutDir::create(cfg.output_dir()?)?;
    let result = pool.install(|| dispatch(command, &cfg, &mut out)).and_then(|outcome| {
        out.write(LOCK_FILE, cfg.lock_json(command)?)?;
        Ok(outcome)
    });
    if result.is_err() {
        out.discard();
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(outcome) if outcome.flagged.is_empty() => ExitCode::SUCCESS,
        Ok(outcome) => {
            for line in &outcome.flagged {
                eprintln!("flagged: {line}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
