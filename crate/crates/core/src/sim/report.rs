use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::engine::{Category, Event, EventKind, Phase, Resource, Timeline};
use super::run::SimOutput;
use super::{RunMode, SimConfig, TransferMode};
use crate::dtdg::SnapshotSequence;
use crate::error::{Error, Result};
use crate::kernel::AccessStats;
use crate::reuse::CacheCounters;

/// Bytes shipped to the device, by category.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLedger {
    pub overlap_adj: u64,
    pub exclusive_adj: u64,
    pub features: u64,
    pub reuse_host_hits: u64,
    /// Adjacency bytes attributable to layer-0 aggregation alone. Already
    /// counted in the adjacency categories.
    pub layer0_adj: u64,
    /// What the same adjacency would cost shipped one snapshot at a time.
    pub undecomposed_adj: u64,
}

impl TransferLedger {
    /// Bytes actually put on the channel.
    pub fn charged(&self) -> u64 {
        self.overlap_adj + self.exclusive_adj + self.features + self.reuse_host_hits
    }

    pub fn add(&mut self, o: &TransferLedger) {
        self.overlap_adj += o.overlap_adj;
        self.exclusive_adj += o.exclusive_adj;
        self.features += o.features;
        self.reuse_host_hits += o.reuse_host_hits;
        self.layer0_adj += o.layer0_adj;
        self.undecomposed_adj += o.undecomposed_adj;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLedger {
    pub epoch: usize,
    pub frame: usize,
    pub ledger: TransferLedger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceUsage {
    pub resource: Resource,
    pub busy: f64,
    pub utilization: f64,
    pub idle: f64,
}

/// Share of busy time per category; sums to 1 when anything ran.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryBreakdown {
    pub transfer: f64,
    pub gcn: f64,
    pub recurrent: f64,
    pub host: f64,
}

impl CategoryBreakdown {
    pub fn compute(&self) -> f64 {
        self.gcn + self.recurrent
    }

    pub fn sum(&self) -> f64 {
        self.transfer + self.gcn + self.recurrent + self.host
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessSummary {
    pub global_requests: u64,
    pub global_transactions: u64,
    pub warp_issues: u64,
    pub kernel_launches: u64,
    pub active_thread_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub mode: String,
    pub model: String,
    pub node_count: usize,
    pub feature_dim: usize,
    pub snapshots: usize,
    pub frames: usize,
    pub epoch_times: Vec<f64>,
    /// Mean training epoch time.
    pub steady_epoch_time: f64,
    pub busy: BTreeMap<String, f64>,
    pub breakdown: CategoryBreakdown,
    pub utilization: Vec<ResourceUsage>,
    /// Compute-device idle time over training epochs.
    pub stall_total: f64,
    /// Part of that idle time spent waiting on transfers.
    pub transfer_stall: f64,
    pub exposed_transfer_fraction: f64,
    pub ledger: TransferLedger,
    pub epoch_ledgers: Vec<TransferLedger>,
    pub frame_ledgers: Vec<FrameLedger>,
    pub cache: CacheCounters,
    pub access: AccessSummary,
    pub peak_device_bytes: u64,
    pub device_memory: u64,
    pub s_per: Vec<(usize, usize)>,
}

fn tol(t: f64) -> f64 {
    1e-9 * t.abs().max(1.0)
}

fn training_epoch(t: &Timeline, epoch: usize) -> bool {
    t.epochs.get(epoch).is_some_and(|e| e.phase == Phase::Training)
}

/// Highest modeled device usage over the run.
pub(crate) fn memory_peak(out: &SimOutput) -> u64 {
    let ev = &out.timeline.events;
    let mut deltas: Vec<(f64, i128)> = Vec::new();
    for p in &out.partitions {
        let from = ev[p.transfer].start;
        let until = p.stages.iter().map(|&s| ev[s].end).fold(from, f64::max);
        deltas.push((from, p.device_bytes as i128));
        deltas.push((until, -(p.device_bytes as i128)));
    }
    for (i, b) in out.buffers.iter().enumerate() {
        let from = ev[b.from_event].start;
        let until = match out.buffers.get(i + 1).filter(|n| n.epoch == b.epoch) {
            Some(next) => ev[next.from_event].start,
            None => out.timeline.epochs[b.epoch].end,
        };
        deltas.push((from, b.bytes as i128));
        deltas.push((until, -(b.bytes as i128)));
    }
    // releases first at equal times: holds are half-open
    deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut cur, mut peak) = (0i128, 0i128);
    for (_, d) in deltas {
        cur += d;
        peak = peak.max(cur);
    }
    out.state_bytes + peak as u64
}

fn mode_name(mode: RunMode) -> &'static str {
    match mode {
        RunMode::Pipad => "pipad",
        RunMode::Baseline {
            transfer: TransferMode::Sync,
        } => "baseline_sync",
        RunMode::Baseline {
            transfer: TransferMode::Async,
        } => "baseline_async",
    }
}

/// Time a compute event waited on its transfer beyond every other cause,
/// capped by the transfer's own duration.
fn transfer_wait(ev: &[Event], e: &Event, epoch_start: f64) -> f64 {
    let mut other = epoch_start;
    if let Some(p) = e.prev_on_lane.filter(|&p| ev[p].epoch == e.epoch) {
        other = other.max(ev[p].end);
    }
    let mut wait: f64 = 0.0;
    for &d in &e.deps {
        if ev[d].kind == EventKind::Transfer {
            wait = wait.max(ev[d].duration());
        } else {
            other = other.max(ev[d].end);
        }
    }
    (e.start - other).max(0.0).min(wait)
}

pub(crate) fn build_report(
    out: &SimOutput,
    cfg: &SimConfig,
    cache: CacheCounters,
    access: AccessStats,
    peak: u64,
    seq: &SnapshotSequence,
) -> SimReport {
    let t = &out.timeline;
    let ev = &t.events;
    let spans: Vec<f64> = t.epochs.iter().map(|e| e.span()).collect();
    let train: Vec<usize> = t.epochs.iter().filter(|e| e.phase == Phase::Training).map(|e| e.index).collect();
    let train_span: f64 = train.iter().map(|&i| spans[i]).sum();
    let steady = if train.is_empty() { 0.0 } else { train_span / train.len() as f64 };

    let mut by_cat: BTreeMap<Category, f64> = BTreeMap::new();
    let mut by_res: BTreeMap<Resource, f64> = BTreeMap::new();
    let mut transfer_stall = 0.0;
    for e in ev.iter().filter(|e| training_epoch(t, e.epoch)) {
        *by_cat.entry(e.kind.category()).or_default() += e.duration();
        *by_res.entry(e.resource).or_default() += e.duration();
        if e.resource == Resource::Compute {
            transfer_stall += transfer_wait(ev, e, t.epochs[e.epoch].start);
        }
    }
    let total_busy: f64 = by_cat.values().sum();
    let frac = |c: Category| {
        if total_busy > 0.0 {
            by_cat.get(&c).copied().unwrap_or(0.0) / total_busy
        } else {
            0.0
        }
    };
    let breakdown = CategoryBreakdown {
        transfer: frac(Category::Transfer),
        gcn: frac(Category::Gcn),
        recurrent: frac(Category::Recurrent),
        host: frac(Category::Host),
    };
    let utilization = [Resource::Host, Resource::Transfer, Resource::Compute]
        .into_iter()
        .map(|r| {
            let lanes = if r == Resource::Host { t.host_workers.max(1) } else { 1 } as f64;
            let busy = by_res.get(&r).copied().unwrap_or(0.0);
            let u = if train_span > 0.0 { busy / (lanes * train_span) } else { 0.0 };
            ResourceUsage {
                resource: r,
                busy,
                utilization: u,
                idle: if train_span > 0.0 { 1.0 - u } else { 0.0 },
            }
        })
        .collect();
    let compute_busy = by_res.get(&Resource::Compute).copied().unwrap_or(0.0);

    let mut epoch_ledgers = vec![TransferLedger::default(); t.epochs.len()];
    let mut frames: BTreeMap<(usize, usize), TransferLedger> = BTreeMap::new();
    let mut ledger = TransferLedger::default();
    for item in &out.transfers {
        epoch_ledgers[item.epoch].add(&item.ledger);
        if let Some(f) = item.frame {
            frames.entry((item.epoch, f)).or_default().add(&item.ledger);
        }
        if training_epoch(t, item.epoch) {
            ledger.add(&item.ledger);
        }
    }
    let busy = by_cat
        .iter()
        .map(|(c, v)| (format!("{c:?}").to_lowercase(), *v))
        .collect();
    SimReport {
        mode: mode_name(cfg.mode).to_string(),
        model: cfg.model.kind.name().to_string(),
        node_count: seq.node_count(),
        feature_dim: if seq.is_empty() { 0 } else { seq.feature_dim() },
        snapshots: seq.len(),
        frames: out.observations.len().max(out.decisions.len()),
        epoch_times: spans,
        steady_epoch_time: steady,
        busy,
        breakdown,
        utilization,
        stall_total: (train_span - compute_busy).max(0.0),
        transfer_stall,
        exposed_transfer_fraction: if train_span > 0.0 { transfer_stall / train_span } else { 0.0 },
        ledger,
        epoch_ledgers,
        frame_ledgers: frames
            .into_iter()
            .map(|((epoch, frame), ledger)| FrameLedger { epoch, frame, ledger })
            .collect(),
        cache,
        access: AccessSummary {
            global_requests: access.global_requests,
            global_transactions: access.global_transactions,
            warp_issues: access.warp_issues,
            kernel_launches: access.kernel_launches,
            active_thread_ratio: access.active_thread_ratio(),
        },
        peak_device_bytes: peak,
        device_memory: cfg.resources.device_memory,
        s_per: out.decisions.iter().map(|d| (d.frame_start, d.s_per)).collect(),
    }
}

/// Outcome of the structural checks over one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub dependencies: bool,
    pub exclusivity: bool,
    pub ledger_identity: bool,
    pub decomposed_within_plain: bool,
    pub conservation: bool,
    pub busy_within_span: bool,
    pub stall_soundness: bool,
    pub violations: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Verifies dependency order, lane exclusivity, ledger identities, start-time
/// conservation and the tuner's no-stall promise.
pub fn check_run(out: &SimOutput) -> CheckReport {
    let t = &out.timeline;
    let ev = &t.events;
    let mut v: Vec<(usize, String)> = Vec::new();

    for e in ev {
        let epoch_start = t.epochs[e.epoch].start;
        if e.start + tol(e.start) < epoch_start {
            v.push((0, format!("event {} starts before its epoch", e.id)));
        }
        for &d in &e.deps {
            if d >= e.id || ev[d].end > e.start + tol(e.start) {
                v.push((0, format!("event {} starts before dependency {d} ends", e.id)));
            }
        }
    }
    for p in &out.partitions {
        let stages = &p.stages;
        if !ev[p.transfer].deps.contains(&p.prepare) {
            v.push((0, format!("transfer {} does not wait for its preparation", p.transfer)));
        }
        for (i, &s) in stages.iter().enumerate() {
            if !ev[s].deps.contains(&p.transfer) || (i > 0 && !ev[s].deps.contains(&stages[i - 1])) {
                v.push((0, format!("stage {s} misses an in-partition dependency")));
            }
        }
    }
    // timeline edges: a chained stage of partition k waits for partition k-1's
    let mut prev: Option<&super::run::PartitionRecord> = None;
    for p in &out.partitions {
        if let Some(q) = prev.filter(|q| q.epoch == p.epoch && q.frame == p.frame && q.index + 1 == p.index) {
            for (&s, &r) in p.stages.iter().zip(&q.stages) {
                let chained = matches!(ev[s].kind, EventKind::Recurrent | EventKind::WeightEvolution);
                if chained && !ev[s].deps.contains(&r) {
                    v.push((0, format!("stage {s} misses its cross-snapshot dependency {r}")));
                }
            }
        }
        prev = Some(p);
    }

    let mut lanes: BTreeMap<(Resource, usize), Vec<&Event>> = BTreeMap::new();
    for e in ev {
        let lane_ok = match e.resource {
            Resource::Host => e.lane < t.host_workers,
            _ => e.lane == 0,
        };
        if !lane_ok {
            v.push((1, format!("event {} on invalid lane {}", e.id, e.lane)));
        }
        lanes.entry((e.resource, e.lane)).or_default().push(e);
    }
    for list in lanes.values_mut() {
        list.sort_by(|a, b| a.start.total_cmp(&b.start).then(a.id.cmp(&b.id)));
        for w in list.windows(2) {
            if w[1].start + tol(w[1].start) < w[0].end {
                v.push((1, format!("events {} and {} overlap on one lane", w[0].id, w[1].id)));
            }
        }
    }

    let mut per_epoch = vec![0u64; t.epochs.len()];
    for item in &out.transfers {
        let e = &ev[item.event];
        if e.kind != EventKind::Transfer || e.amount != item.ledger.charged() as f64 {
            v.push((2, format!("transfer {} carries {} bytes, ledger says {}", e.id, e.amount, item.ledger.charged())));
        }
        if item.ledger.overlap_adj + item.ledger.exclusive_adj != item.structure_bytes {
            v.push((2, format!("transfer {} adjacency bytes differ from its structures", e.id)));
        }
        if item.ledger.overlap_adj + item.ledger.exclusive_adj > item.ledger.undecomposed_adj {
            v.push((3, format!("transfer {} ships more than the undecomposed adjacency", e.id)));
        }
        per_epoch[item.epoch] += item.ledger.charged();
    }
    for (i, total) in per_epoch.iter().enumerate() {
        let shipped: f64 = ev
            .iter()
            .filter(|e| e.epoch == i && e.kind == EventKind::Transfer)
            .map(|e| e.amount)
            .sum();
        if shipped != *total as f64 {
            v.push((2, format!("epoch {i} transfer events total {shipped}, ledger {total}")));
        }
    }

    // every start is explained by the epoch start, a dependency or the lane
    for e in ev {
        let epoch_start = t.epochs[e.epoch].start;
        let mut expect = epoch_start;
        for &d in &e.deps {
            expect = expect.max(ev[d].end);
        }
        if let Some(p) = e.prev_on_lane.filter(|&p| ev[p].epoch == e.epoch) {
            expect = expect.max(ev[p].end);
        }
        if (e.start - expect).abs() > tol(e.start) {
            v.push((4, format!("event {} idles without cause", e.id)));
        }
    }
    for ep in &t.epochs {
        let in_epoch: Vec<&Event> = ev.iter().filter(|e| e.epoch == ep.index).collect();
        let Some(last) = in_epoch.iter().max_by(|a, b| a.end.total_cmp(&b.end).then(b.id.cmp(&a.id))) else {
            continue;
        };
        if (last.end - ep.end).abs() > tol(ep.end) {
            v.push((4, format!("epoch {} ends at {} but its last event at {}", ep.index, ep.end, last.end)));
        }
        // the binding chain back to the epoch start covers the whole span
        let mut cur = *last;
        let mut path = cur.duration();
        while cur.start > ep.start + tol(ep.start) {
            let binding = cur
                .deps
                .iter()
                .copied()
                .chain(cur.prev_on_lane)
                .map(|i| &ev[i])
                .filter(|p| p.epoch == ep.index)
                .find(|p| (p.end - cur.start).abs() <= tol(cur.start));
            let Some(p) = binding else {
                v.push((4, format!("critical path breaks at event {}", cur.id)));
                break;
            };
            path += p.duration();
            cur = p;
        }
        if path > ep.span() + tol(ep.span()) * in_epoch.len() as f64 {
            v.push((4, format!("critical path of epoch {} exceeds its span", ep.index)));
        }
        for ((res, lane), list) in &lanes {
            let busy: f64 = list.iter().filter(|e| e.epoch == ep.index).map(|e| e.duration()).sum();
            if busy > ep.span() + tol(ep.span()) * list.len() as f64 {
                v.push((5, format!("{res:?} lane {lane} busy {busy} exceeds epoch {} span", ep.index)));
            }
        }
    }

    let mut last_of: BTreeMap<(usize, usize, usize), &super::run::PartitionRecord> = BTreeMap::new();
    for p in &out.partitions {
        last_of.insert((p.epoch, p.frame, p.index), p);
    }
    for p in out.partitions.iter().filter(|p| p.stall_checked && p.index > 0) {
        let q = last_of[&(p.epoch, p.frame, p.index - 1)];
        let q_end = q.stages.iter().map(|&s| ev[s].end).fold(f64::MIN, f64::max);
        if ev[p.transfer].end > q_end + tol(q_end) {
            v.push((6, format!("transfer {} outlasts the previous partition's compute", p.transfer)));
        }
    }

    let flag = |k: usize| !v.iter().any(|(c, _)| *c == k);
    CheckReport {
        dependencies: flag(0),
        exclusivity: flag(1),
        ledger_identity: flag(2),
        decomposed_within_plain: flag(3),
        conservation: flag(4),
        busy_within_span: flag(5),
        stall_soundness: flag(6),
        violations: v.into_iter().map(|(_, m)| m).collect(),
    }
}

impl SimReport {
    /// `metric,value` rows in a fixed order.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(s, "{k},{v}");
        };
        row("mode", self.mode.clone());
        row("model", self.model.clone());
        row("node_count", self.node_count.to_string());
        row("feature_dim", self.feature_dim.to_string());
        row("snapshots", self.snapshots.to_string());
        row("frames", self.frames.to_string());
        for (i, t) in self.epoch_times.iter().enumerate() {
            row(&format!("epoch_time_{i}"), t.to_string());
        }
        row("steady_epoch_time", self.steady_epoch_time.to_string());
        row("fraction_transfer", self.breakdown.transfer.to_string());
        row("fraction_gcn", self.breakdown.gcn.to_string());
        row("fraction_recurrent", self.breakdown.recurrent.to_string());
        row("fraction_host", self.breakdown.host.to_string());
        for u in &self.utilization {
            let r = format!("{:?}", u.resource).to_lowercase();
            row(&format!("utilization_{r}"), u.utilization.to_string());
            row(&format!("idle_{r}"), u.idle.to_string());
        }
        row("stall_total", self.stall_total.to_string());
        row("transfer_stall", self.transfer_stall.to_string());
        row("exposed_transfer_fraction", self.exposed_transfer_fraction.to_string());
        let l = &self.ledger;
        row("bytes_overlap_adj", l.overlap_adj.to_string());
        row("bytes_exclusive_adj", l.exclusive_adj.to_string());
        row("bytes_features", l.features.to_string());
        row("bytes_reuse_host_hits", l.reuse_host_hits.to_string());
        row("bytes_layer0_adj", l.layer0_adj.to_string());
        row("bytes_undecomposed_adj", l.undecomposed_adj.to_string());
        row("bytes_charged", l.charged().to_string());
        let c = &self.cache;
        row("cache_device_hits", c.device_hits.to_string());
        row("cache_host_hits", c.host_hits.to_string());
        row("cache_misses", c.misses.to_string());
        row("cache_spills", c.spills.to_string());
        row("cache_reallocations", c.reallocations.to_string());
        row("cache_forced_shrinks", c.forced_shrinks.to_string());
        let a = &self.access;
        row("access_global_requests", a.global_requests.to_string());
        row("access_global_transactions", a.global_transactions.to_string());
        row("access_warp_issues", a.warp_issues.to_string());
        row("access_kernel_launches", a.kernel_launches.to_string());
        row("access_active_thread_ratio", a.active_thread_ratio.to_string());
        row("peak_device_bytes", self.peak_device_bytes.to_string());
        row("device_memory", self.device_memory.to_string());
        for (f, n) in &self.s_per {
            row(&format!("s_per_frame_{f}"), n.to_string());
        }
        s
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

impl SimOutput {
    /// Writes `timeline.json`, `summary.csv`, `report.json` and
    /// `decisions.json` into `dir`, replacing earlier files.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("timeline.json"), &serde_json::to_string_pretty(&self.timeline)?)?;
        write(&dir.join("summary.csv"), &self.report.to_csv())?;
        write(&dir.join("report.json"), &serde_json::to_string_pretty(&self.report)?)?;
        let log: Vec<serde_json::Value> = self
            .decisions
            .iter()
            .map(|d| {
                serde_json::json!({
                    "frame_start": d.frame_start,
                    "s_per": d.s_per,
                    "peak_bytes": d.peak_bytes,
                    "decision": d.decision,
                    "explain": d.decision.as_ref().map(|x| x.explain()),
                })
            })
            .collect();
        write(&dir.join("decisions.json"), &serde_json::to_string_pretty(&log)?)
    }
}
