use std::fs;
use std::path::{Path, PathBuf};

use pipad::dtdg::{
    generate_synthetic, ingest_temporal_edges, read_snapshot_dir, FeatureSource, GenerateParams, IngestOptions,
    SnapshotSequence, SMALL_GRAPH_FEATURE_DIM,
};
use pipad::kernel::ExecConfig;
use pipad::sim::SimConfig;
use pipad::tuner::{
    build_profile, synthetic_profile_corpus, MachineConstants, ProfileRequest, TunerProfile, DEFAULT_OR_TARGETS,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the directory runs are written under when no
/// explicit output directory is given.
pub const OUTPUT_ROOT_ENV: &str = "PIPAD_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "pipad-runs";

/// Where the snapshots of an experiment come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        node_count: usize,
        base_edges: usize,
        steps: usize,
        churn_rate: f64,
        feature_dim: usize,
    },
    /// A directory written by `convert` or `generate`.
    SnapshotDir { path: PathBuf },
    /// A `src dst timestamp [weight]` text file.
    EdgeList {
        path: PathBuf,
        /// Inferred from the largest vertex id when absent.
        #[serde(default)]
        node_count: Option<usize>,
        #[serde(default = "one_u64")]
        interval: u64,
        #[serde(default = "one_usize")]
        edge_life: usize,
        #[serde(default)]
        steps: Option<usize>,
        #[serde(default = "small_dim")]
        feature_dim: usize,
    },
}

fn one_u64() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn small_dim() -> usize {
    SMALL_GRAPH_FEATURE_DIM
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            node_count: 2000,
            base_edges: 20_000,
            steps: 20,
            churn_rate: 0.05,
            feature_dim: SMALL_GRAPH_FEATURE_DIM,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<SnapshotSequence, CliError> {
        Ok(match self {
            DatasetSpec::Synthetic {
                node_count,
                base_edges,
                steps,
                churn_rate,
                feature_dim,
            } => generate_synthetic(&GenerateParams {
                node_count: *node_count,
                base_edges: *base_edges,
                steps: *steps,
                churn_rate: *churn_rate,
                seed,
                feature_dim: *feature_dim,
            })?,
            DatasetSpec::SnapshotDir { path } => read_snapshot_dir(path)?,
            DatasetSpec::EdgeList {
                path,
                node_count,
                interval,
                edge_life,
                steps,
                feature_dim,
            } => {
                let nodes = match node_count {
                    Some(n) => *n,
                    None => infer_node_count(path)?,
                };
                let opts = IngestOptions {
                    interval: *interval,
                    edge_life: *edge_life,
                    steps: *steps,
                    features: FeatureSource::Random { seed },
                    feature_dim: *feature_dim,
                    ..IngestOptions::new(nodes)
                };
                ingest_temporal_edges(path, &opts)?
            }
        })
    }
}

/// One more than the largest vertex id in an edge-list file. Lines that do
/// not parse are skipped here; ingestion reports them properly.
pub fn infer_node_count(path: &Path) -> Result<usize, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut max = None;
    for line in text.lines() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with('%') {
            continue;
        }
        for field in t.split_whitespace().take(2) {
            if let Ok(v) = field.parse::<usize>() {
                max = Some(max.map_or(v, |m: usize| m.max(v)));
            }
        }
    }
    Ok(max.map_or(0, |m| m + 1))
}

/// Offline tuner table: either a stored file or a synthetic corpus to build
/// one from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSpec {
    pub path: Option<PathBuf>,
    pub node_count: usize,
    pub base_edges: usize,
    pub dims: Vec<usize>,
    pub or_targets: Vec<f64>,
    pub max_samples: usize,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec {
            path: None,
            node_count: 200,
            base_edges: 1500,
            dims: vec![8, 16, 32],
            or_targets: DEFAULT_OR_TARGETS.to_vec(),
            max_samples: 6,
        }
    }
}

impl ProfileSpec {
    pub fn build(
        &self,
        candidates: &[usize],
        exec: &ExecConfig,
        machine: MachineConstants,
        seed: u64,
    ) -> Result<TunerProfile, CliError> {
        let corpus = synthetic_profile_corpus(self.node_count, self.base_edges, &self.or_targets, candidates, seed)?;
        let req = ProfileRequest {
            candidates,
            dims: &self.dims,
            or_targets: &self.or_targets,
            seed,
            max_samples: self.max_samples,
            machine,
        };
        Ok(build_profile(&corpus, &req, exec)?)
    }
}

pub fn read_profile(path: &Path) -> Result<TunerProfile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(TunerProfile::from_json(&text)?)
}

/// Everything needed to reproduce a run. All randomness derives from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub sim: SimConfig,
    pub profile: ProfileSpec,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 0,
            dataset: DatasetSpec::default(),
            sim: SimConfig::default(),
            profile: ProfileSpec::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Output directory: explicit setting, else `<root>/<name>` where the
    /// root comes from the environment.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join(&self.name))
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}
