use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::engine::{EventKind, EventSpec, Phase, Scheduler, Timeline};
use super::report::{build_report, check_run, memory_peak, SimReport, TransferLedger};
use super::{ModelWeights, RunMode, SimConfig, StageKind, TransferMode};
use crate::dtdg::{Frame, Partition, SnapshotSequence};
use crate::error::{Error, Result};
use crate::kernel::{
    aggregate_parallel, aggregate_reference, count_parallel_access, count_row_per_warp, count_update, update_naive,
    update_parallel, AccessStats, CoalescentFeatures, UpdateWeights,
};
use crate::matrix::Matrix;
use crate::overlap::{decompose_for_transfer, intersection_union, shipped_entries, DecompositionMemo, OverlapDecomposition};
use crate::reuse::{AggCacheKey, CacheCounters, CacheHit, FramePeaks, ReuseCache, Tier};
use crate::sliced::{storage_cost, Csr, SlicedCsr, StorageFormat};
use crate::tuner::{
    decide, memory_upper_bound, CandidateStats, FrameObservation, PartitionEstimate, TunerDecision, TunerProfile,
};

// input features never change, so every cached result shares one epoch
const FEATURE_EPOCH: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub frame_start: usize,
    pub s_per: usize,
    /// Planned device peak of the frame at this size.
    pub peak_bytes: u64,
    pub decision: Option<TunerDecision>,
}

/// One transfer event with its byte itemization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferItem {
    pub event: usize,
    pub epoch: usize,
    pub frame: Option<usize>,
    pub ledger: TransferLedger,
    /// Adjacency bytes recomputed from the shipped structures' shapes.
    pub structure_bytes: u64,
}

/// Event ids of one scheduled partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub frame: usize,
    pub index: usize,
    pub first_snapshot: usize,
    pub snapshots: usize,
    pub prepare: usize,
    pub transfer: usize,
    /// Compute events in stage order.
    pub stages: Vec<usize>,
    /// Device bytes held from the transfer start until the last stage ends.
    pub device_bytes: u64,
    /// The tuner accepted this frame's size after its stall test.
    pub stall_checked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferHold {
    pub epoch: usize,
    pub frame: usize,
    /// First transfer of the frame; the buffer is held from its start.
    pub from_event: usize,
    pub bytes: u64,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub timeline: Timeline,
    pub report: SimReport,
    pub observations: Vec<FrameObservation>,
    pub decisions: Vec<FrameDecision>,
    pub transfers: Vec<TransferItem>,
    pub partitions: Vec<PartitionRecord>,
    pub buffers: Vec<BufferHold>,
    pub state_bytes: u64,
    /// Last computed output of the final GCN layer per snapshot.
    pub hidden: Vec<Option<Matrix>>,
    /// Decompositions memoized per (frame, candidate size).
    pub frame_candidate_memo: usize,
    /// Distinct snapshot ranges decomposed.
    pub range_memo: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PartMode {
    /// Preparing epochs: one snapshot, sliced format, asynchronous.
    Prepare,
    Pipad,
    Baseline,
}

struct Partial {
    ledger: TransferLedger,
    structure_bytes: u64,
    agg0: Option<Arc<OverlapDecomposition>>,
    misses: Vec<usize>,
    cached: Vec<Option<Arc<Matrix>>>,
}

pub struct Simulator<'a> {
    seq: &'a SnapshotSequence,
    cfg: SimConfig,
    sched: Scheduler,
    weights: ModelWeights,
    frames: Vec<Frame>,
    sliced: Vec<SlicedCsr>,
    memo: DecompositionMemo,
    frame_memo: BTreeMap<(usize, usize), Vec<Arc<OverlapDecomposition>>>,
    candidate_stats: BTreeMap<(usize, usize), CandidateStats>,
    observations: Vec<FrameObservation>,
    decisions: BTreeMap<usize, FrameDecision>,
    cache: Option<ReuseCache>,
    transfers: Vec<TransferItem>,
    partitions: Vec<PartitionRecord>,
    buffers: Vec<BufferHold>,
    hidden: Vec<Option<Matrix>>,
    access: AccessStats,
    /// Last compute event of every partition scheduled in the current epoch.
    epoch_tails: Vec<usize>,
    prepared: bool,
}

/// Runs the configured preparing and training epochs.
pub fn simulate(seq: &SnapshotSequence, cfg: &SimConfig, profile: Option<&TunerProfile>) -> Result<SimOutput> {
    let mut sim = Simulator::new(seq, cfg)?;
    if matches!(cfg.mode, RunMode::Pipad) {
        sim.run_preparing_epochs()?;
    }
    sim.run_training(profile)?;
    sim.finish()
}

impl<'a> Simulator<'a> {
    pub fn new(seq: &'a SnapshotSequence, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let frames = if seq.is_empty() {
            Vec::new()
        } else {
            seq.frames(cfg.frame_size, cfg.stride)?
        };
        let cap = cfg.exec.slice_cap;
        let sliced = seq
            .snapshots()
            .iter()
            .map(|s| SlicedCsr::from_csr(&s.adjacency, cap))
            .collect::<Result<Vec<_>>>()?;
        let pipad = cfg.mode == RunMode::Pipad;
        Ok(Simulator {
            seq,
            sched: Scheduler::new(cfg.resources.host_workers),
            weights: ModelWeights::generate(&cfg.model, seq.feature_dim(), seq.len(), cfg.seed),
            frames,
            sliced,
            memo: DecompositionMemo::new(),
            frame_memo: BTreeMap::new(),
            candidate_stats: BTreeMap::new(),
            observations: Vec::new(),
            decisions: BTreeMap::new(),
            cache: (pipad && cfg.reuse).then(ReuseCache::new),
            transfers: Vec::new(),
            partitions: Vec::new(),
            buffers: Vec::new(),
            hidden: vec![None; seq.len()],
            access: AccessStats::default(),
            epoch_tails: Vec::new(),
            prepared: false,
            cfg: cfg.clone(),
        })
    }

    fn n(&self) -> usize {
        self.seq.node_count()
    }

    fn feature_bytes(&self) -> u64 {
        4 * (self.n() * self.seq.feature_dim()) as u64
    }

    fn activation_bytes(&self) -> u64 {
        self.cfg.model.activation_bytes(self.n(), self.seq.feature_dim())
    }

    fn state_bytes(&self) -> u64 {
        self.cfg.model.state_bytes(self.seq.feature_dim())
    }

    fn csrs(&self, ts: std::ops::Range<usize>) -> Vec<&'a Csr> {
        let seq = self.seq;
        ts.map(|t| &seq.get(t).adjacency).collect()
    }

    /// Device bytes of one snapshot processed alone.
    fn single_mem(&self, t: usize) -> u64 {
        4 * shipped_entries(&self.sliced[t]) + self.feature_bytes() + self.activation_bytes()
    }

    fn peak_one(&self, frame: &Frame) -> u64 {
        let max = frame.snapshots().map(|t| self.single_mem(t)).max().unwrap_or(0);
        self.state_bytes() + 2 * max
    }

    fn decomposition(&mut self, ts: std::ops::Range<usize>) -> Result<Arc<OverlapDecomposition>> {
        let csrs = self.csrs(ts.clone());
        let cap = self.cfg.exec.slice_cap;
        self.memo.get_or_insert_with(ts, || decompose_for_transfer(&csrs, cap))
    }

    /// Per-stage forward work of a partition, given its layer-0 aggregation
    /// counts (none when every layer-0 result comes from the cache).
    fn stage_work(
        &self,
        s: usize,
        layer0: Option<&AccessStats>,
        deep: Option<&OverlapDecomposition>,
        rows: &[&Csr],
    ) -> Result<Vec<(StageKind, f64, AccessStats)>> {
        let cost = &self.cfg.exec.cost;
        let model = &self.cfg.model;
        let dims = model.layer_dims(self.seq.feature_dim());
        let reuse_w = model.kind.weight_reuse_allowed() && deep.is_some();
        let mut out = Vec::new();
        for stage in model.dag().stages {
            let (work, stats) = match stage {
                StageKind::WeightEvolution => (model.evolution_work(s), AccessStats::default()),
                StageKind::Recurrent => (model.recurrent_work(self.n(), s), AccessStats::default()),
                StageKind::Gcn { layer } => {
                    let (f_in, f_out) = dims[layer];
                    let mut stats = if layer == 0 {
                        layer0.cloned().unwrap_or_default()
                    } else if let Some(d) = deep {
                        count_parallel_access(d, f_in, &self.cfg.exec)?
                    } else {
                        rows.iter().map(|a| count_row_per_warp(a, f_in, &self.cfg.exec)).sum()
                    };
                    stats.merge(&count_update(self.n(), f_in, f_out, s, reuse_w, &self.cfg.exec).access);
                    (stats.modeled_time(cost), stats)
                }
            };
            out.push((stage, work, stats));
        }
        Ok(out)
    }

    fn stage_time(&self, work: f64) -> f64 {
        self.cfg.resources.compute_time(self.cfg.model.train_work(work))
    }

    /// Exact planning numbers for running `frame` at `s_per`: worst-case
    /// bytes and host time, best-case compute.
    fn candidate(&mut self, frame: &Frame, s_per: usize) -> Result<CandidateStats> {
        if let Some(c) = self.candidate_stats.get(&(frame.start, s_per)) {
            return Ok(c.clone());
        }
        let parts = frame.partitions(s_per)?;
        let mut decomps = Vec::with_capacity(parts.len());
        let mut estimates = Vec::with_capacity(parts.len());
        let mut rate_sum = 0.0;
        let mut max_mem = 0;
        for (k, p) in parts.iter().enumerate() {
            let d = self.decomposition(p.snapshots())?;
            let s = p.len;
            let bytes = 4 * d.shipped_entries() + s as u64 * self.feature_bytes();
            let layer0 = if self.cache.is_some() {
                None
            } else {
                Some(count_parallel_access(&d, self.seq.feature_dim(), &self.cfg.exec)?)
            };
            let compute = self
                .stage_work(s, layer0.as_ref(), Some(&d), &[])?
                .iter()
                .map(|(_, w, _)| self.stage_time(*w))
                .sum();
            let decision = if k == 0 && self.cfg.tuner { self.cfg.decision_cost } else { 0.0 };
            estimates.push(PartitionEstimate {
                bytes,
                compute,
                host: self.cfg.resources.host_time(bytes) + decision,
            });
            let (i, u) = intersection_union(&self.csrs(p.snapshots()));
            rate_sum += if u == 0 { 1.0 } else { i as f64 / u as f64 };
            max_mem = max_mem.max(bytes + s as u64 * self.activation_bytes());
            decomps.push(d);
        }
        let stats = CandidateStats {
            overlap_rate: rate_sum / parts.len() as f64,
            peak_bytes: self.state_bytes() + 2 * max_mem,
            partitions: estimates,
        };
        self.frame_memo.insert((frame.start, s_per), decomps);
        self.candidate_stats.insert((frame.start, s_per), stats.clone());
        Ok(stats)
    }

    fn observe(&mut self, frame: &Frame) -> Result<FrameObservation> {
        let cap = self.cfg.exec.slice_cap;
        let mut per_snapshot_bytes = Vec::new();
        let mut per_snapshot_compute = Vec::new();
        for t in frame.snapshots() {
            let d = self.decomposition(t..t + 1)?;
            per_snapshot_bytes.push(4 * d.shipped_entries() + self.feature_bytes());
            let layer0 = count_parallel_access(&d, self.seq.feature_dim(), &self.cfg.exec)?;
            let compute = self
                .stage_work(1, Some(&layer0), Some(&d), &[])?
                .iter()
                .map(|(_, w, _)| self.stage_time(*w))
                .sum();
            per_snapshot_compute.push(compute);
        }
        let frame_or_stats = crate::overlap::overlap_rate(&self.csrs(frame.snapshots()), cap)?;
        let mut sizes: Vec<usize> = self.cfg.candidates.clone();
        sizes.push(1);
        sizes.sort_unstable();
        sizes.dedup();
        let mut candidates = BTreeMap::new();
        for n in sizes.into_iter().filter(|&n| n <= frame.size) {
            candidates.insert(n, self.candidate(frame, n)?);
        }
        Ok(FrameObservation {
            frame: *frame,
            feature_dim: self.seq.feature_dim(),
            per_snapshot_bytes,
            per_snapshot_compute,
            peak_mem_one_snapshot: self.peak_one(frame),
            frame_or_stats,
            candidates,
        })
    }

    /// One-snapshot epochs that gather per-frame statistics, build every
    /// candidate decomposition and, with reuse on, record layer-0 results.
    pub fn run_preparing_epochs(&mut self) -> Result<&[FrameObservation]> {
        let frames = self.frames.clone();
        for f in &frames {
            memory_upper_bound(self.peak_one(f), self.cfg.resources.device_memory, &self.cfg.candidates)?;
            let obs = self.observe(f)?;
            self.observations.push(obs);
        }
        for _ in 0..self.cfg.preparing_epochs {
            if frames.is_empty() {
                break;
            }
            self.sched.begin_epoch(Phase::Preparing);
            self.epoch_tails.clear();
            for f in &frames {
                let mut chain = Vec::new();
                for (k, p) in f.partitions(1)?.iter().enumerate() {
                    self.run_partition(p, k, PartMode::Prepare, None, 2, &mut chain, false)?;
                }
            }
        }
        self.prepared = true;
        Ok(&self.observations)
    }

    pub fn observations(&self) -> &[FrameObservation] {
        &self.observations
    }

    fn frame_size_for(&mut self, frame: &Frame, profile: Option<&TunerProfile>) -> Result<(usize, Option<usize>)> {
        if let Some(d) = self.decisions.get(&frame.start) {
            return Ok((d.s_per, None));
        }
        let device = self.cfg.resources.device_memory;
        let (s_per, decision, event) = if self.cfg.tuner {
            let profile = profile.ok_or_else(|| {
                Error::Config("the tuner needs a profile; build one first (for example with --build-profile)".into())
            })?;
            let fi = self
                .frames
                .iter()
                .position(|f| f.start == frame.start)
                .ok_or_else(|| Error::Simulation("unknown frame".into()))?;
            let mut profile = profile.clone();
            profile.machine = self.cfg.resources.machine();
            let d = decide(frame, &self.observations[fi], &profile, device, &self.cfg.candidates)?;
            let ev = self.sched.schedule(EventSpec {
                kind: EventKind::Decision,
                frame: Some(frame.start),
                partition: None,
                first_snapshot: frame.start,
                snapshots: frame.size,
                amount: 0.0,
                duration: self.cfg.decision_cost,
                deps: Vec::new(),
            });
            (d.s_per, Some(d), Some(ev))
        } else {
            (self.cfg.forced_s_per.unwrap_or(1), None, None)
        };
        let peak_bytes = self.candidate(frame, s_per)?.peak_bytes;
        self.decisions.insert(
            frame.start,
            FrameDecision {
                frame_start: frame.start,
                s_per,
                peak_bytes,
                decision,
            },
        );
        Ok((s_per, event))
    }

    /// Partition-wise epochs. PiPAD mode needs the preparing epochs first.
    pub fn run_training(&mut self, profile: Option<&TunerProfile>) -> Result<()> {
        let mode = match self.cfg.mode {
            RunMode::Pipad => PartMode::Pipad,
            RunMode::Baseline { .. } => PartMode::Baseline,
        };
        if mode == PartMode::Pipad && !self.prepared {
            return Err(Error::Config("preparing epochs must run before training".into()));
        }
        let lag = match self.cfg.mode {
            RunMode::Baseline {
                transfer: TransferMode::Sync,
            } => 1,
            _ => 2,
        };
        let frames = self.frames.clone();
        for _ in 0..self.cfg.training_epochs {
            if frames.is_empty() {
                break;
            }
            self.sched.begin_epoch(Phase::Training);
            self.epoch_tails.clear();
            let mut prev_peak = 0u64;
            for f in &frames {
                let (s_per, decision) = match mode {
                    PartMode::Pipad => self.frame_size_for(f, profile)?,
                    _ => (1, None),
                };
                let stall_checked = mode == PartMode::Pipad
                    && s_per > 1
                    && self.decisions[&f.start].decision.as_ref().is_some_and(|d| d.s_per == s_per);
                let mut hold = None;
                if let Some(cache) = self.cache.as_mut() {
                    let peak = self.decisions[&f.start].peak_bytes;
                    // the previous frame's last partition may still be resident
                    let peaks: FramePeaks = [(f.start, peak.max(prev_peak))].into();
                    prev_peak = peak;
                    let plan = cache.plan_next_frame(f, &peaks, self.cfg.resources.device_memory, FEATURE_EPOCH)?;
                    cache.apply_plan(&plan, false);
                    hold = Some(plan.buffer_bytes);
                }
                let mut chain = Vec::new();
                for (k, p) in f.partitions(s_per)?.iter().enumerate() {
                    let dep = if k == 0 { decision } else { None };
                    let transfer = self.run_partition(p, k, mode, dep, lag, &mut chain, stall_checked)?;
                    if let (0, Some(bytes)) = (k, hold) {
                        self.buffers.push(BufferHold {
                            epoch: self.sched.epoch(),
                            frame: f.start,
                            from_event: transfer,
                            bytes,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Cache lookups, shipped bytes and the aggregation structure for layer 0.
    fn plan_partition(&mut self, p: &Partition, k: usize, mode: PartMode) -> Result<Partial> {
        let s = p.len;
        let n = self.n();
        let training = self.sched.phase() == Phase::Training;
        let mut cached = vec![None; s];
        let mut host_hits = 0;
        if let (PartMode::Pipad, true, Some(cache)) = (mode, training, self.cache.as_mut()) {
            for (i, t) in p.snapshots().enumerate() {
                let key = AggCacheKey::layer0(t, FEATURE_EPOCH);
                let got = cache.fetch(&key);
                host_hits += got.transfer_bytes;
                if let (CacheHit::Host, Some(m)) = (got.hit, &got.matrix) {
                    // promoted on first use; a full buffer spills it back
                    cache.record(key, m.clone(), Tier::Device)?;
                }
                cached[i] = got.matrix;
            }
        }
        let misses: Vec<usize> = (0..s).filter(|&i| cached[i].is_none()).collect();
        let plain = |sim: &Self, idx: &[usize]| -> u64 { idx.iter().map(|&i| shipped_entries(&sim.sliced[p.start + i])).sum() };
        let sliced_cost = |m: &SlicedCsr| {
            if m.is_empty() {
                0
            } else {
                4 * storage_cost(StorageFormat::Sliced, m.nnz(), n, m.n_slices())
            }
        };
        let mut ledger = TransferLedger {
            features: misses.len() as u64 * self.feature_bytes(),
            reuse_host_hits: host_hits,
            ..TransferLedger::default()
        };
        let (structure_bytes, agg0) = match mode {
            PartMode::Baseline => {
                let coo: u64 = p
                    .snapshots()
                    .map(|t| 4 * storage_cost(StorageFormat::Coo, self.seq.get(t).adjacency.nnz(), n, 0))
                    .sum();
                ledger.exclusive_adj = coo;
                ledger.layer0_adj = coo;
                ledger.undecomposed_adj = coo;
                (coo, None)
            }
            PartMode::Prepare | PartMode::Pipad => {
                let d = if mode == PartMode::Prepare {
                    self.decomposition(p.snapshots())?
                } else {
                    let s_frame = self.decisions[&p.frame.start].s_per;
                    self.frame_memo[&(p.frame.start, s_frame)][k].clone()
                };
                let all: Vec<usize> = (0..s).collect();
                let needed = if self.cfg.model.kind.gcn_layers() >= 2 { all.clone() } else { misses.clone() };
                let (over, excl) = d.shipped_entries_for(&needed);
                let undecomposed = plain(self, &needed);
                ledger.undecomposed_adj = 4 * undecomposed;
                let (lo, le) = d.shipped_entries_for(&misses);
                ledger.layer0_adj = 4 * (lo + le).min(plain(self, &misses));
                if over + excl <= undecomposed {
                    ledger.overlap_adj = 4 * over;
                    ledger.exclusive_adj = 4 * excl;
                    let bytes = if needed.is_empty() {
                        0
                    } else {
                        sliced_cost(&d.a_over) + needed.iter().map(|&i| sliced_cost(&d.exclusives[i])).sum::<u64>()
                    };
                    let agg0 = if misses.len() == s { d } else { Arc::new(d.select(&misses)) };
                    (bytes, Some(agg0))
                } else {
                    // a lone subset ships cheaper as plain per-snapshot slices
                    ledger.exclusive_adj = 4 * undecomposed;
                    let bytes = needed.iter().map(|&i| sliced_cost(&self.sliced[p.start + i])).sum();
                    let rows: Vec<&Csr> = misses.iter().map(|&i| &self.seq.get(p.start + i).adjacency).collect();
                    let agg0 = if rows.is_empty() {
                        None
                    } else {
                        Some(Arc::new(OverlapDecomposition::trivial(&rows, self.cfg.exec.slice_cap)?))
                    };
                    (bytes, agg0)
                }
            }
        };
        Ok(Partial {
            ledger,
            structure_bytes,
            agg0,
            misses,
            cached,
        })
    }

    /// Schedules one partition and runs its math. Returns the transfer event.
    #[allow(clippy::too_many_arguments)]
    fn run_partition(
        &mut self,
        p: &Partition,
        k: usize,
        mode: PartMode,
        decision: Option<usize>,
        lag: usize,
        chain: &mut Vec<Option<usize>>,
        stall_checked: bool,
    ) -> Result<usize> {
        let s = p.len;
        let f_dim = self.seq.feature_dim();
        let plan = self.plan_partition(p, k, mode)?;
        let bytes = plan.ledger.charged();
        let frame = Some(p.frame.start);
        let spec = |kind, amount: f64, duration: f64, deps: Vec<usize>| EventSpec {
            kind,
            frame,
            partition: Some(k),
            first_snapshot: p.start,
            snapshots: s,
            amount,
            duration,
            deps,
        };
        let prepare = self.sched.schedule(spec(
            EventKind::Prepare,
            bytes as f64,
            self.cfg.resources.host_time(bytes),
            decision.into_iter().collect(),
        ));
        let mut deps = vec![prepare];
        if self.epoch_tails.len() >= lag {
            deps.push(self.epoch_tails[self.epoch_tails.len() - lag]);
        }
        let transfer = self.sched.schedule(spec(
            EventKind::Transfer,
            bytes as f64,
            self.cfg.resources.transfer_time(bytes),
            deps,
        ));
        self.transfers.push(TransferItem {
            event: transfer,
            epoch: self.sched.epoch(),
            frame,
            ledger: plan.ledger.clone(),
            structure_bytes: plan.structure_bytes,
        });

        let rows = self.csrs(p.snapshots());
        let deep = match mode {
            PartMode::Baseline => None,
            PartMode::Prepare => Some(self.decomposition(p.snapshots())?),
            PartMode::Pipad => {
                let s_frame = self.decisions[&p.frame.start].s_per;
                Some(self.frame_memo[&(p.frame.start, s_frame)][k].clone())
            }
        };
        let layer0 = if plan.misses.is_empty() {
            None
        } else if let Some(d) = &plan.agg0 {
            Some(count_parallel_access(d, f_dim, &self.cfg.exec)?)
        } else {
            Some(rows.iter().map(|a| count_row_per_warp(a, f_dim, &self.cfg.exec)).sum())
        };
        let works = self.stage_work(s, layer0.as_ref(), deep.as_deref(), &rows)?;
        let dag = self.cfg.model.dag();
        chain.resize(dag.stages.len(), None);
        let mut ids: Vec<Option<usize>> = vec![None; dag.stages.len()];
        for i in dag.topo_order()? {
            let (stage, work, stats) = &works[i];
            let mut deps = vec![transfer];
            deps.extend(dag.predecessors(i).filter_map(|j| ids[j]));
            if dag.cross_snapshot.contains(&i) {
                deps.extend(chain[i]);
            }
            let kind = match *stage {
                StageKind::WeightEvolution => EventKind::WeightEvolution,
                StageKind::Gcn { layer } => EventKind::Gcn { layer },
                StageKind::Recurrent => EventKind::Recurrent,
            };
            let id = self.sched.schedule(spec(kind, *work, self.stage_time(*work), deps));
            ids[i] = Some(id);
            if self.sched.phase() == Phase::Training {
                let mut st = stats.clone();
                st.per_block_work.clear();
                self.access.merge(&st);
            }
        }
        let stages: Vec<usize> = ids.iter().flatten().copied().collect();
        for (i, id) in ids.iter().enumerate() {
            if dag.cross_snapshot.contains(&i) {
                chain[i] = *id;
            }
        }
        if let Some(&last) = stages.iter().max() {
            self.epoch_tails.push(last);
        }
        self.partitions.push(PartitionRecord {
            epoch: self.sched.epoch(),
            phase: self.sched.phase(),
            frame: p.frame.start,
            index: k,
            first_snapshot: p.start,
            snapshots: s,
            prepare,
            transfer,
            stages,
            device_bytes: bytes + s as u64 * self.activation_bytes(),
            stall_checked,
        });

        self.execute(p, mode, &plan, deep.as_deref())?;
        Ok(transfer)
    }

    /// Real math of one partition plus layer-0 cache recording.
    fn execute(
        &mut self,
        p: &Partition,
        mode: PartMode,
        plan: &Partial,
        deep: Option<&OverlapDecomposition>,
    ) -> Result<()> {
        let s = p.len;
        let seq = self.seq;
        let exec = &self.cfg.exec;
        let records = self.cache.is_some() && mode != PartMode::Baseline;
        if !self.cfg.numerics && !records {
            return Ok(());
        }
        let fresh: Vec<Matrix> = if plan.misses.is_empty() {
            Vec::new()
        } else if !self.cfg.numerics {
            plan.misses.iter().map(|_| Matrix::zeros(self.n(), seq.feature_dim())).collect()
        } else if let Some(d) = &plan.agg0 {
            let xs: Vec<&Matrix> = plan.misses.iter().map(|&i| &seq.get(p.start + i).features).collect();
            aggregate_parallel(d, &CoalescentFeatures::new(&xs)?, exec)?.0
        } else {
            plan.misses
                .iter()
                .map(|&i| {
                    let snap = seq.get(p.start + i);
                    aggregate_reference(&snap.adjacency, &snap.features)
                })
                .collect::<Result<_>>()?
        };
        let mut fresh = fresh.into_iter();
        let mut agg: Vec<Arc<Matrix>> = Vec::with_capacity(s);
        for i in 0..s {
            agg.push(match &plan.cached[i] {
                Some(m) => m.clone(),
                None => Arc::new(fresh.next().ok_or_else(|| Error::Simulation("missing aggregation".into()))?),
            });
        }
        if let (true, Some(cache)) = (records, self.cache.as_mut()) {
            let training = self.sched.phase() == Phase::Training;
            for &i in &plan.misses {
                let key = AggCacheKey::layer0(p.start + i, FEATURE_EPOCH);
                if !cache.on_host(&key) {
                    cache.record(key, agg[i].clone(), Tier::Host)?;
                }
                if training && !cache.on_device(&key) {
                    cache.record(key, agg[i].clone(), Tier::Device)?;
                }
            }
        }
        if mode == PartMode::Prepare || !self.cfg.numerics {
            return Ok(());
        }
        let layers = self.cfg.model.kind.gcn_layers();
        let ts = p.snapshots();
        let mut input: Vec<Matrix> = agg.iter().map(|m| (**m).clone()).collect();
        let mut hidden = Vec::new();
        for layer in 0..layers {
            if layer > 0 {
                input = match deep {
                    Some(d) => {
                        let hs: Vec<&Matrix> = hidden.iter().collect();
                        aggregate_parallel(d, &CoalescentFeatures::new(&hs)?, exec)?.0
                    }
                    None => ts
                        .clone()
                        .zip(&hidden)
                        .map(|(t, h)| aggregate_reference(&seq.get(t).adjacency, h))
                        .collect::<Result<_>>()?,
                };
            }
            hidden = match (mode, self.weights.shared(layer)) {
                (PartMode::Baseline, _) => ts
                    .clone()
                    .zip(&input)
                    .map(|(t, a)| update_naive(a, self.weights.for_snapshot(layer, t)))
                    .collect::<Result<_>>()?,
                (_, Some(w)) => update_parallel(&input, UpdateWeights::Shared(w), exec, true)?.0,
                (_, None) => {
                    update_parallel(&input, UpdateWeights::PerSnapshot(self.weights.range(layer, ts.clone())), exec, false)?.0
                }
            };
        }
        for (t, h) in ts.zip(hidden) {
            self.hidden[t] = Some(h);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<SimOutput> {
        let state_bytes = self.state_bytes();
        let timeline = self.sched.finish();
        let cache: CacheCounters = self.cache.as_ref().map(|c| c.counters().clone()).unwrap_or_default();
        let mut out = SimOutput {
            timeline,
            report: SimReport::default(),
            observations: self.observations,
            decisions: self.decisions.into_values().collect(),
            transfers: self.transfers,
            partitions: self.partitions,
            buffers: self.buffers,
            state_bytes,
            hidden: self.hidden,
            frame_candidate_memo: self.frame_memo.len(),
            range_memo: self.memo.len(),
        };
        let peak = memory_peak(&out);
        let device = self.cfg.resources.device_memory;
        if peak > device {
            return Err(Error::Simulation(format!(
                "modeled device usage {peak} bytes exceeds device memory {device}"
            )));
        }
        out.report = build_report(&out, &self.cfg, cache, self.access, peak, self.seq);
        let checks = check_run(&out);
        if !checks.ok() {
            return Err(Error::Simulation(checks.violations.join("; ")));
        }
        Ok(out)
    }
}
