//! Discrete-event model of the partitioned training runtime.
//!
//! Three modeled resources (a host worker pool, one transfer channel and one
//! compute device) run events produced by a deterministic list scheduler.
//! GCN stages execute real kernel math and are timed from their access
//! counts; recurrent stages are cost templates.

mod engine;
mod report;
mod run;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ExecConfig, GcnWeights};
use crate::tuner::MachineConstants;

pub use engine::{Category, EpochSpan, Event, EventKind, Phase, Resource, Timeline};
pub use report::{
    check_run, AccessSummary, CategoryBreakdown, CheckReport, FrameLedger, ResourceUsage, SimReport, TransferLedger,
};
pub use run::{simulate, BufferHold, FrameDecision, PartitionRecord, SimOutput, Simulator, TransferItem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    MpnnLstm,
    Evolvegcn,
    Tgcn,
}

impl ModelKind {
    pub fn gcn_layers(self) -> usize {
        match self {
            ModelKind::Tgcn => 1,
            ModelKind::MpnnLstm | ModelKind::Evolvegcn => 2,
        }
    }

    /// Per-snapshot weights rule out sharing staged weight tiles.
    pub fn weight_reuse_allowed(self) -> bool {
        self != ModelKind::Evolvegcn
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::MpnnLstm => "mpnn_lstm",
            ModelKind::Evolvegcn => "evolvegcn",
            ModelKind::Tgcn => "tgcn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mpnn_lstm" => Ok(ModelKind::MpnnLstm),
            "evolvegcn" | "evolve_gcn" => Ok(ModelKind::Evolvegcn),
            "tgcn" | "t_gcn" => Ok(ModelKind::Tgcn),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected mpnn_lstm, evolvegcn or tgcn)"
            ))),
        }
    }
}

/// One stage of a snapshot's computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    WeightEvolution,
    Gcn { layer: usize },
    Recurrent,
}

/// Per-snapshot stage graph plus the stages chained along the timeline.
#[derive(Clone, Debug, PartialEq)]
pub struct StageDag {
    pub stages: Vec<StageKind>,
    /// Edges `(from, to)` between indices of `stages`.
    pub edges: Vec<(usize, usize)>,
    /// Stages that depend on the same stage of the previous snapshot.
    pub cross_snapshot: Vec<usize>,
}

impl StageDag {
    /// Checks acyclicity and that only recurrent or weight-evolution stages
    /// carry timeline edges.
    pub fn validate(&self) -> Result<()> {
        let n = self.stages.len();
        if self.edges.iter().any(|&(a, b)| a >= n || b >= n) {
            return Err(Error::Config("stage edge out of range".into()));
        }
        self.topo_order()?;
        for &s in &self.cross_snapshot {
            match self.stages.get(s) {
                Some(StageKind::Recurrent | StageKind::WeightEvolution) => {}
                _ => return Err(Error::Config(format!("stage {s} cannot depend on the previous snapshot"))),
            }
        }
        Ok(())
    }

    /// Kahn's order, lowest index first among ready stages.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let n = self.stages.len();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &(a, b) in &self.edges {
                if a == i {
                    indeg[b] -= 1;
                    if indeg[b] == 0 {
                        ready.insert(b);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("stage graph has a cycle".into()));
        }
        Ok(order)
    }

    pub fn predecessors(&self, stage: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.1 == stage).map(|e| e.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelTemplate {
    pub kind: ModelKind,
    pub hidden_dim: usize,
    /// Recurrent cell work per node and hidden unit.
    pub recurrent_coeff: f64,
    /// Weight-evolution work per weight entry.
    pub evolve_coeff: f64,
    /// Backward work as a multiple of forward work.
    pub backward_multiplier: f64,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        ModelTemplate {
            kind: ModelKind::MpnnLstm,
            hidden_dim: 32,
            recurrent_coeff: 4.0,
            evolve_coeff: 8.0,
            backward_multiplier: 2.0,
        }
    }
}

impl ModelTemplate {
    pub fn new(kind: ModelKind) -> Self {
        ModelTemplate {
            kind,
            ..ModelTemplate::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be at least 1".into()));
        }
        for (name, v) in [
            ("recurrent_coeff", self.recurrent_coeff),
            ("evolve_coeff", self.evolve_coeff),
            ("backward_multiplier", self.backward_multiplier),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        self.dag().validate()
    }

    pub fn dag(&self) -> StageDag {
        let layers = self.kind.gcn_layers();
        let mut stages = Vec::new();
        let mut edges = Vec::new();
        let mut cross = Vec::new();
        if self.kind == ModelKind::Evolvegcn {
            stages.push(StageKind::WeightEvolution);
            cross.push(0);
        }
        for layer in 0..layers {
            let idx = stages.len();
            if idx > 0 {
                edges.push((idx - 1, idx));
            }
            stages.push(StageKind::Gcn { layer });
        }
        if self.kind != ModelKind::Evolvegcn {
            let idx = stages.len();
            edges.push((idx - 1, idx));
            stages.push(StageKind::Recurrent);
            cross.push(idx);
        }
        StageDag {
            stages,
            edges,
            cross_snapshot: cross,
        }
    }

    /// `(f_in, f_out)` of every GCN layer.
    pub fn layer_dims(&self, feature_dim: usize) -> Vec<(usize, usize)> {
        (0..self.kind.gcn_layers())
            .map(|l| if l == 0 { (feature_dim, self.hidden_dim) } else { (self.hidden_dim, self.hidden_dim) })
            .collect()
    }

    /// Device bytes held for one snapshot's activations.
    pub fn activation_bytes(&self, node_count: usize, feature_dim: usize) -> u64 {
        let layers = self.kind.gcn_layers();
        let cols = feature_dim + self.hidden_dim * (2 * layers - 1) + self.hidden_dim;
        4 * (node_count * cols) as u64
    }

    /// Resident parameter bytes for the whole run.
    pub fn state_bytes(&self, feature_dim: usize) -> u64 {
        let h = self.hidden_dim;
        let gcn: usize = self.layer_dims(feature_dim).iter().map(|(i, o)| i * o + o).sum();
        let rnn = match self.kind {
            ModelKind::MpnnLstm => 4 * 2 * h * h,
            ModelKind::Tgcn => 3 * 2 * h * h,
            ModelKind::Evolvegcn => 4 * 2 * h * h * self.kind.gcn_layers(),
        };
        4 * (gcn + rnn) as u64
    }

    pub fn recurrent_work(&self, node_count: usize, snapshots: usize) -> f64 {
        self.recurrent_coeff * (node_count * self.hidden_dim * snapshots) as f64
    }

    pub fn evolution_work(&self, snapshots: usize) -> f64 {
        let h = self.hidden_dim as f64;
        self.evolve_coeff * h * h * (self.kind.gcn_layers() * snapshots) as f64
    }

    /// Forward work scaled up by the folded backward pass.
    pub fn train_work(&self, forward: f64) -> f64 {
        forward * (1.0 + self.backward_multiplier)
    }
}

/// GCN weights for every layer, shared or per snapshot depending on the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    shared: Vec<GcnWeights>,
    per_snapshot: Vec<Vec<GcnWeights>>,
}

impl ModelWeights {
    /// Deterministic weights; each (layer, snapshot) draws from its own stream.
    pub fn generate(model: &ModelTemplate, feature_dim: usize, len: usize, seed: u64) -> Self {
        let dims = model.layer_dims(feature_dim);
        let draw = |layer: usize, stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((layer as u64) << 32) | stream);
            let (i, o) = dims[layer];
            GcnWeights::random(i, o, &mut rng)
        };
        if model.kind.weight_reuse_allowed() {
            ModelWeights {
                shared: (0..dims.len()).map(|l| draw(l, u64::from(u32::MAX))).collect(),
                per_snapshot: Vec::new(),
            }
        } else {
            ModelWeights {
                shared: Vec::new(),
                per_snapshot: (0..dims.len()).map(|l| (0..len).map(|t| draw(l, t as u64)).collect()).collect(),
            }
        }
    }

    pub fn is_shared(&self) -> bool {
        self.per_snapshot.is_empty()
    }

    pub fn for_snapshot(&self, layer: usize, t: usize) -> &GcnWeights {
        if self.is_shared() {
            &self.shared[layer]
        } else {
            &self.per_snapshot[layer][t]
        }
    }

    pub(crate) fn shared(&self, layer: usize) -> Option<&GcnWeights> {
        self.shared.get(layer)
    }

    pub(crate) fn range(&self, layer: usize, ts: std::ops::Range<usize>) -> &[GcnWeights] {
        &self.per_snapshot[layer][ts]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceModel {
    pub host_workers: usize,
    /// Bytes one host worker prepares per time unit.
    pub host_bandwidth: f64,
    pub transfer_bandwidth: f64,
    pub transfer_latency: f64,
    /// Work units the device retires per time unit.
    pub compute_throughput: f64,
    pub device_memory: u64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel {
            host_workers: 4,
            host_bandwidth: 256.0,
            transfer_bandwidth: 16.0,
            transfer_latency: 1000.0,
            compute_throughput: 100.0,
            device_memory: 16 << 30,
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<()> {
        if self.host_workers == 0 || self.device_memory == 0 {
            return Err(Error::Config("host workers and device memory must be positive".into()));
        }
        // infinite bandwidth is a legal limit case
        for (name, v) in [
            ("host_bandwidth", self.host_bandwidth),
            ("transfer_bandwidth", self.transfer_bandwidth),
            ("compute_throughput", self.compute_throughput),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.transfer_latency >= 0.0 && self.transfer_latency.is_finite()) {
            return Err(Error::Config("transfer_latency must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn machine(&self) -> MachineConstants {
        MachineConstants {
            transfer_bandwidth: self.transfer_bandwidth,
            transfer_latency: self.transfer_latency,
        }
    }

    pub fn transfer_time(&self, bytes: u64) -> f64 {
        self.machine().transfer_time(bytes)
    }

    pub fn host_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.host_bandwidth
    }

    pub fn compute_time(&self, work: f64) -> f64 {
        work / self.compute_throughput
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Transfer and compute never overlap.
    Sync,
    /// Double buffered: a transfer may run while the previous partition computes.
    Async,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RunMode {
    Pipad,
    /// One snapshot at a time: COO adjacency, row-per-warp kernel, no reuse.
    Baseline { transfer: TransferMode },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub model: ModelTemplate,
    pub frame_size: usize,
    pub stride: usize,
    pub candidates: Vec<usize>,
    pub resources: ResourceModel,
    pub exec: ExecConfig,
    pub preparing_epochs: usize,
    pub training_epochs: usize,
    /// Cache layer-0 aggregations and consult them during training.
    pub reuse: bool,
    pub tuner: bool,
    /// Partition size used when the tuner is off.
    pub forced_s_per: Option<usize>,
    pub mode: RunMode,
    pub seed: u64,
    /// Host time of one tuner decision.
    pub decision_cost: f64,
    /// Execute the real GCN math, not only its counts.
    pub numerics: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            model: ModelTemplate::default(),
            frame_size: 16,
            stride: 1,
            candidates: crate::tuner::DEFAULT_CANDIDATES.to_vec(),
            resources: ResourceModel::default(),
            exec: ExecConfig::default(),
            preparing_epochs: 2,
            training_epochs: 2,
            reuse: true,
            tuner: true,
            forced_s_per: None,
            mode: RunMode::Pipad,
            seed: 0,
            decision_cost: 50.0,
            numerics: true,
        }
    }
}

impl SimConfig {
    /// The one-snapshot comparison run for this configuration.
    pub fn baseline(&self, transfer: TransferMode) -> SimConfig {
        SimConfig {
            mode: RunMode::Baseline { transfer },
            reuse: false,
            tuner: false,
            forced_s_per: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.resources.validate()?;
        self.exec.validate()?;
        if self.frame_size == 0 || self.stride == 0 {
            return Err(Error::Config("frame size and stride must be at least 1".into()));
        }
        if self.candidates.is_empty() || self.candidates.contains(&0) {
            return Err(Error::Config("candidates must be non-empty and positive".into()));
        }
        if self.forced_s_per == Some(0) {
            return Err(Error::Config("forced s_per must be at least 1".into()));
        }
        if self.mode == RunMode::Pipad && self.tuner && self.preparing_epochs == 0 {
            return Err(Error::Config("the tuner needs at least one preparing epoch".into()));
        }
        if !(self.decision_cost >= 0.0 && self.decision_cost.is_finite()) {
            return Err(Error::Config("decision cost must be finite and non-negative".into()));
        }
        Ok(())
    }
}
