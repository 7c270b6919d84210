//! `pipad` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 data validation, 4 capacity or other
//! hard failures.

mod analyze;
mod config;
mod data;
mod simulate;
mod tune;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pipad::error::Error;
use pipad::sim::ModelKind;

use config::{DatasetSpec, ExperimentConfig, OUTPUT_ROOT_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Core(Error),
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                Error::Argument(_) | Error::Config(_) => 2,
                e if e.is_data_error() => 3,
                _ => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "invalid data: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "pipad",
    version,
    about = "Overlap-aware multi-snapshot GNN kernels and a pipelined training simulator for dynamic graphs",
    after_help = format!("Runs without an explicit output directory go under ${OUTPUT_ROOT_ENV} (default ./{}).", config::DEFAULT_OUTPUT_ROOT)
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest a temporal edge list into snapshot files and sliced-CSR blobs,
    /// printing a storage comparison.
    Convert(data::ConvertArgs),
    /// Write a seeded synthetic snapshot sequence.
    Generate(data::GenerateArgs),
    /// Overlap, kernel-access and load-balance reports.
    Analyze {
        #[command(subcommand)]
        what: analyze::AnalyzeCommand,
    },
    /// Build or query the partition-size tuner.
    Tune {
        #[command(subcommand)]
        what: tune::TuneCommand,
    },
    /// Run the pipelined training simulation and write its reports.
    Simulate(simulate::SimulateArgs),
}

/// Dataset selection shared by the analysis, tuning and simulation commands.
/// Flags override the matching config fields.
#[derive(Args, Debug, Clone, Default)]
pub struct DatasetArgs {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Snapshot directory or temporal edge-list file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Vertex count (synthetic size, or edge-list override).
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Edges per synthetic snapshot.
    #[arg(long)]
    pub edges: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Share of edges replaced between consecutive synthetic snapshots.
    #[arg(long)]
    pub churn: Option<f64>,
    /// Feature dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Timestamp bucket width for edge lists.
    #[arg(long)]
    pub interval: Option<u64>,
    /// Snapshots an edge-list edge stays alive for.
    #[arg(long)]
    pub edge_life: Option<usize>,
    /// Single seed for data, weights and profiling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run name used for the default output directory.
    #[arg(long)]
    pub name: Option<String>,
}

impl DatasetArgs {
    pub fn experiment(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = &self.name {
            cfg.name = n.clone();
        }
        if let Some(path) = &self.input {
            cfg.dataset = if path.join("manifest.json").is_file() {
                DatasetSpec::SnapshotDir { path: path.clone() }
            } else {
                DatasetSpec::EdgeList {
                    path: path.clone(),
                    node_count: self.nodes,
                    interval: self.interval.unwrap_or(1),
                    edge_life: self.edge_life.unwrap_or(1),
                    steps: self.steps,
                    feature_dim: self.dim.unwrap_or(pipad::dtdg::SMALL_GRAPH_FEATURE_DIM),
                }
            };
        } else if self.nodes.is_some()
            || self.edges.is_some()
            || self.steps.is_some()
            || self.churn.is_some()
            || self.dim.is_some()
        {
            if !matches!(cfg.dataset, DatasetSpec::Synthetic { .. }) {
                cfg.dataset = DatasetSpec::default();
            }
            if let DatasetSpec::Synthetic {
                node_count,
                base_edges,
                steps,
                churn_rate,
                feature_dim,
            } = &mut cfg.dataset
            {
                *node_count = self.nodes.unwrap_or(*node_count);
                *base_edges = self.edges.unwrap_or(*base_edges);
                *steps = self.steps.unwrap_or(*steps);
                *churn_rate = self.churn.unwrap_or(*churn_rate);
                *feature_dim = self.dim.unwrap_or(*feature_dim);
            }
        }
        cfg.sim.seed = cfg.seed;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    MpnnLstm,
    Evolvegcn,
    Tgcn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::MpnnLstm => ModelKind::MpnnLstm,
            ModelArg::Evolvegcn => ModelKind::Evolvegcn,
            ModelArg::Tgcn => ModelKind::Tgcn,
        }
    }
}

/// Integer flag that must be at least 1.
pub fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Replaces `path` with `body`.
pub fn write_file(path: &Path, body: &str) -> CliResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Convert(a) => data::convert(&a),
        Command::Generate(a) => data::generate(&a),
        Command::Analyze { what } => analyze::run(&what),
        Command::Tune { what } => tune::run(&what),
        Command::Simulate(a) => simulate::run(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // help and version print and exit 0; real parse errors exit 2
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kinds() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(CliError::from(Error::Config("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::Validation("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(Error::Parse { line: 1, msg: "x".into() }).exit_code(), 3);
        assert_eq!(CliError::from(Error::Capacity("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(Error::Simulation("x".into())).exit_code(), 4);
    }

    #[test]
    fn positive_rejects_zero() {
        assert_eq!(positive("3"), Ok(3));
        assert!(positive("0").is_err());
        assert!(positive("x").is_err());
    }

    #[test]
    fn synthetic_flags_override_defaults() {
        let a = DatasetArgs {
            nodes: Some(50),
            churn: Some(0.2),
            seed: Some(9),
            ..DatasetArgs::default()
        };
        let cfg = a.experiment().unwrap();
        assert_eq!(cfg.sim.seed, 9);
        match cfg.dataset {
            DatasetSpec::Synthetic {
                node_count, churn_rate, ..
            } => assert_eq!((node_count, churn_rate), (50, 0.2)),
            _ => panic!("expected synthetic"),
        }
    }

    #[test]
    fn command_line_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
