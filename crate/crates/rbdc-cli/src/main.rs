//! `rbdc` — plan, train, couple, and verify recursive block-diagonal runs.
//!
//! Exit codes are part of the contract:
//!   0  success (and any verification passed)
//!   1  invalid input: flags, config file, or artifact format
//!   2  a verification ran and failed (or was refused)
//!   3  training aborted on a numeric failure

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rbdc_core::coupling::{EnsembleMode, PaddingMode};
use rbdc_core::protocol::SplitMode;

mod commands;
mod config;

use commands::{exit_code_for, PlanOverrides, EXIT_INVALID};

#[derive(Debug, Parser)]
#[command(name = "rbdc", version, about = "Recursive block-diagonal coupling runs, from budget to verified checkpoint")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split an epoch budget across recursion levels and price it in FLOPs
    Plan(PlanArgs),
    /// Run the recursive protocol end to end (steps = 0 trains the plain baseline)
    Train(TrainArgs),
    /// Couple two narrow checkpoints block-diagonally into one wide checkpoint
    Couple(CoupleArgs),
    /// Check a coupled checkpoint against its parents (structure + ensemble output)
    Verify(VerifyArgs),
    /// Print the per-level forward costs of a model as JSON
    Flops(FlopsArgs),
    /// Merge per-run curve CSVs into one table
    Report(ReportArgs),
}

/// How the epoch budget is distributed over the recursion.
#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SplitModeArg {
    /// Recursive epoch split: each level passes `1/(r+2)` of its budget down.
    EpochSplit,
    /// Equalize cost: level epochs follow the exact FLOPs-matching formula.
    FlopsSplit,
}

impl From<SplitModeArg> for SplitMode {
    fn from(value: SplitModeArg) -> SplitMode {
        match value {
            SplitModeArg::EpochSplit => SplitMode::EpochSplit,
            SplitModeArg::FlopsSplit => SplitMode::FlopsSplit,
        }
    }
}

/// What fills the off-diagonal blocks of a coupled weight matrix.
#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PaddingArg {
    /// Zeros: the wide model computes the exact ensemble at initialization.
    Zero,
    /// Small random values: breaks the symmetry, loses exact equivalence.
    Random,
}

impl From<PaddingArg> for PaddingMode {
    fn from(value: PaddingArg) -> PaddingMode {
        match value {
            PaddingArg::Zero => PaddingMode::Zero,
            PaddingArg::Random => PaddingMode::Random,
        }
    }
}

/// Which functional comparison `verify` runs.
#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum EnsembleModeArg {
    /// Wide logits must match the averaged parent logits within tolerance.
    Exact,
    /// Compare each parent's half of the split activations separately.
    SplitNormDebug,
    /// Joint normalization: report the deviation, check only the pre-norm concat.
    JointNorm,
}

impl From<EnsembleModeArg> for EnsembleMode {
    fn from(value: EnsembleModeArg) -> EnsembleMode {
        match value {
            EnsembleModeArg::Exact => EnsembleMode::Exact,
            EnsembleModeArg::SplitNormDebug => EnsembleMode::SplitNormDebug,
            EnsembleModeArg::JointNorm => EnsembleMode::JointNorm,
        }
    }
}

/// Flags shared by `plan` and `train`; each overrides the same-named key in
/// the config file's `plan` section.
#[derive(Debug, Args)]
struct PlanFlags {
    /// Run config file (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Wide-over-narrow epoch ratio r
    #[arg(long)]
    ratio: Option<f64>,
    /// Number of coupling steps (0 = plain baseline)
    #[arg(long)]
    steps: Option<usize>,
    /// Narrowest width to recurse into (alternative to --steps)
    #[arg(long)]
    min_size: Option<usize>,
    /// Budget split mode
    #[arg(long, value_enum)]
    mode: Option<SplitModeArg>,
    /// Off-diagonal padding for coupled weights
    #[arg(long, value_enum)]
    padding: Option<PaddingArg>,
    /// Total epoch budget in baseline-epoch units
    #[arg(long)]
    epochs: Option<f64>,
    /// Budget as a fraction of the baseline's training FLOPs
    #[arg(long, conflicts_with = "epochs")]
    alpha: Option<f64>,
    /// Budget as an absolute FLOPs figure
    #[arg(long, conflicts_with_all = ["epochs", "alpha"])]
    budget_flops: Option<f64>,
    /// Baseline run length the plan is normalized against
    #[arg(long)]
    baseline_epochs: Option<f64>,
    /// Train a single seed instead of the config's seed list
    #[arg(long)]
    seed: Option<u64>,
}

impl PlanFlags {
    fn overrides(&self) -> PlanOverrides {
        PlanOverrides {
            ratio: self.ratio,
            steps: self.steps,
            min_size: self.min_size,
            mode: self.mode.map(SplitMode::from),
            padding: self.padding.map(PaddingMode::from),
            epochs: self.epochs,
            alpha: self.alpha,
            budget_flops: self.budget_flops,
            baseline_epochs: self.baseline_epochs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    flags: PlanFlags,
    /// Write plan.json and plan.csv into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: PlanFlags,
    /// Output directory: seed-N/target.ckpt, seed-N/run_tree.json, curve.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CoupleArgs {
    /// First parent checkpoint (its outputs come first in every block)
    #[arg(long)]
    left: PathBuf,
    /// Second parent checkpoint
    #[arg(long)]
    right: PathBuf,
    /// Output directory: wide.ckpt and coupling_report.json
    #[arg(long)]
    out: PathBuf,
    /// Off-diagonal padding
    #[arg(long, value_enum, default_value_t = PaddingArg::Zero)]
    padding: PaddingArg,
    /// Seed for random padding (ignored for zero padding)
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Coupled checkpoint to verify
    #[arg(long)]
    wide: PathBuf,
    /// First parent checkpoint
    #[arg(long)]
    left: PathBuf,
    /// Second parent checkpoint
    #[arg(long)]
    right: PathBuf,
    /// Functional comparison mode
    #[arg(long, value_enum, default_value_t = EnsembleModeArg::Exact)]
    mode: EnsembleModeArg,
    /// Padding the coupling was built with (sets the off-diagonal audit)
    #[arg(long, value_enum, default_value_t = PaddingArg::Zero)]
    padding: PaddingArg,
    /// Number of random probe inputs
    #[arg(long, default_value_t = 128)]
    probes: usize,
    /// Seed for the probe inputs
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the full report JSON here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    /// Run config file (JSON); only the model section is required
    #[arg(long)]
    config: PathBuf,
    /// Number of halvings to price (defaults to the config's depth)
    #[arg(long)]
    steps: Option<usize>,
    /// Also price a full training run of this many epochs
    #[arg(long)]
    epochs: Option<f64>,
    /// Write the JSON table here as well as stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Curve CSVs produced by `train`
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Merged CSV path
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> rbdc_core::Result<i32> {
    match cli.command {
        Command::Plan(args) => commands::plan(&args.flags.config, &args.flags.overrides(), args.out.as_deref()),
        Command::Train(args) => commands::train(&args.flags.config, &args.flags.overrides(), &args.out),
        Command::Couple(args) => commands::couple(
            &args.left,
            &args.right,
            &args.out,
            args.padding.into(),
            args.seed,
        ),
        Command::Verify(args) => commands::verify(
            &args.wide,
            &args.left,
            &args.right,
            args.mode.into(),
            args.padding.into(),
            args.probes,
            args.seed,
            args.out.as_deref(),
        ),
        Command::Flops(args) => commands::flops(&args.config, args.steps, args.epochs, args.out.as_deref()),
        Command::Report(args) => commands::report(&args.inputs, &args.out),
    }
}

fn main() -> ExitCode {
    // Parse by hand so flag errors land on exit code 1 (invalid input)
    // instead of clap's default 2, which this tool reserves for failed
    // verification.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
