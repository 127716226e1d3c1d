//! `choppy`: ingest TREC runs, train the Cut Transformer, and evaluate it
//! against Fixed-k, Greedy-k and Oracle truncation.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use choppy_core::{Error, MetricKind};
use config::{ModelFlags, TrainFlags};

#[derive(Parser, Debug)]
#[command(
    name = "choppy",
    version,
    about = "Ranked list truncation with a Cut Transformer"
)]
struct Cli {
    /// TOML file with optional [model], [train], [synth] and [data] tables.
    /// Command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Only report warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Join a TREC run with qrels into a dataset cache.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset (plus matching run and qrels files).
    Synth(SynthArgs),
    /// Split a dataset into train and test sets by query.
    Split(SplitArgs),
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and/or baselines on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a d × heads grid.
    Ablate(AblateArgs),
    /// Emit per-position metric values and cut probabilities for queries.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// TREC run file (qid Q0 docid rank score tag).
    #[arg(long)]
    run: PathBuf,
    /// TREC qrels file (qid 0 docid relevance).
    #[arg(long)]
    qrels: PathBuf,
    /// Keep this many top results per query.
    #[arg(long)]
    top_n: Option<usize>,
    /// Use the number of judged relevant documents, rather than the number
    /// retrieved, as the F1 recall denominator.
    #[arg(long)]
    recall_from_qrels: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    list_len: Option<usize>,
    #[arg(long)]
    relevant_location: Option<f64>,
    #[arg(long)]
    nonrelevant_location: Option<f64>,
    /// Standard deviation of both score distributions.
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    min_relevant: Option<usize>,
    #[arg(long)]
    max_relevant: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Fraction of queries assigned to the training set.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset cache.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Metric to optimize.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Baseline {
    Fixed(usize),
    Greedy,
    Oracle,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Baseline policy: fixed:K, greedy or oracle. Repeatable.
    #[arg(long, value_parser = parse_baseline)]
    baseline: Vec<Baseline>,
    /// Dataset on which Greedy-k chooses its cutoff.
    #[arg(long)]
    train_dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    /// Expected architecture; rejected if it disagrees with the checkpoint.
    #[command(flatten)]
    model: ModelFlags,
    /// Output directory for the evaluation records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training dataset cache.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset each trained cell is evaluated on.
    #[arg(long)]
    test_dataset: PathBuf,
    /// Model dimensions to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
    grid_d: Vec<usize>,
    /// Head counts to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    grid_heads: Vec<usize>,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Query to explain; repeatable. Defaults to the first three queries.
    #[arg(long = "query-id")]
    query_ids: Vec<String>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<MetricKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    s.parse::<MetricKind>().map_err(|e| e.to_string())
}

fn parse_baseline(s: &str) -> Result<Baseline, String> {
    match s {
        "greedy" => Ok(Baseline::Greedy),
        "oracle" => Ok(Baseline::Oracle),
        _ => {
            let k = s.strip_prefix("fixed:").ok_or_else(|| {
                format!("unknown baseline '{s}'; expected fixed:K, greedy or oracle")
            })?;
            match k.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(Baseline::Fixed(k)),
                _ => Err(format!("fixed cutoff '{k}' must be a positive integer")),
            }
        }
    }
}

/// Why a command failed; decides the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad invocation or configuration.
    Usage(String),
    Core(Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::Config(_) | Error::InvalidArgument(_)) => 1,
            Failure::Core(Error::NonFinite(_)) => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_specs() {
        assert_eq!(parse_baseline("fixed:5"), Ok(Baseline::Fixed(5)));
        assert_eq!(parse_baseline("greedy"), Ok(Baseline::Greedy));
        assert_eq!(parse_baseline("oracle"), Ok(Baseline::Oracle));
        assert!(parse_baseline("fixed:0").is_err());
        assert!(parse_baseline("fixed:x").is_err());
        assert!(parse_baseline("bicut").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Failure::Usage("x".into()).exit_code(), 1);
        assert_eq!(Failure::from(Error::Config("x".into())).exit_code(), 1);
        assert_eq!(Failure::from(Error::Dataset("x".into())).exit_code(), 2);
        assert_eq!(Failure::from(Error::NonFinite("x".into())).exit_code(), 3);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
