//! Per-frame choice of snapshots per partition.
//!
//! Three filters are applied in order: a memory bound derived from the
//! one-snapshot peak, a pipeline check that every partition's transfer hides
//! behind the previous partition's compute, and a speedup ranking read from an
//! offline profile keyed by overlap rate, feature width and partition size.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dtdg::{Frame, GenerateParams, SnapshotSequence};
use crate::error::{Error, Result};
use crate::kernel::{count_parallel_access, count_single_access, ExecConfig};
use crate::overlap::{decompose, overlap_rate, OverlapStats};
use crate::sliced::{Csr, SlicedCsr};

pub const DEFAULT_CANDIDATES: [usize; 4] = [1, 2, 4, 8];
pub const DEFAULT_OR_TARGETS: [f64; 6] = [0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
/// Percent of device memory held back from the bound.
pub const RESERVED_PERCENT: u64 = 5;
/// Samples a profile cell needs before it counts as measured.
pub const MIN_SAMPLES: usize = 5;
/// Allowed distance between a sample group's overlap rate and its target.
pub const OR_WINDOW: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineConstants {
    /// Bytes per time unit.
    pub transfer_bandwidth: f64,
    pub transfer_latency: f64,
}

impl Default for MachineConstants {
    fn default() -> Self {
        MachineConstants {
            transfer_bandwidth: 64.0,
            transfer_latency: 500.0,
        }
    }
}

impl MachineConstants {
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            0.0
        } else {
            bytes as f64 / self.transfer_bandwidth + self.transfer_latency
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub or_bucket: usize,
    pub dim: usize,
    pub s_per: usize,
    pub speedup: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerProfile {
    /// Bucket `i` covers `[or_bounds[i], or_bounds[i+1])`; the last one is closed.
    pub or_bounds: Vec<f64>,
    pub dims: Vec<usize>,
    pub entries: Vec<ProfileEntry>,
    /// `(or_bucket, dim, s_per)` cells without enough matching samples.
    pub missing: Vec<(usize, usize, usize)>,
    pub machine: MachineConstants,
}

impl TunerProfile {
    /// Buckets centred on the targets, split at the midpoints between them.
    pub fn bounds_for_targets(targets: &[f64]) -> Vec<f64> {
        let mut t = targets.to_vec();
        t.sort_by(f64::total_cmp);
        let mut b = vec![0.0];
        b.extend(t.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        b.push(1.0);
        b
    }

    pub fn bucket_of(&self, or: f64) -> usize {
        let n = self.or_bounds.len().saturating_sub(1);
        (0..n)
            .find(|&i| or < self.or_bounds[i + 1])
            .unwrap_or(n.saturating_sub(1))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: TunerProfile = serde_json::from_str(s)?;
        if p.or_bounds.len() < 2 {
            return Err(Error::Config("profile needs at least one overlap bucket".into()));
        }
        if p.entries.iter().any(|e| !(e.speedup >= 0.0) || e.or_bucket + 1 >= p.or_bounds.len()) {
            return Err(Error::Config("profile has an invalid entry".into()));
        }
        Ok(p)
    }
}

/// Estimated transfer and compute of one partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimate {
    pub bytes: u64,
    pub compute: f64,
    /// Host preparation time ahead of the transfer.
    #[serde(default)]
    pub host: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub partitions: Vec<PartitionEstimate>,
    /// Mean overlap rate of the frame's partitions at this size.
    pub overlap_rate: f64,
    /// Planned device peak while running the frame at this size.
    pub peak_bytes: u64,
}

/// Statistics gathered for one frame while profiling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame: Frame,
    pub feature_dim: usize,
    pub per_snapshot_bytes: Vec<u64>,
    pub per_snapshot_compute: Vec<f64>,
    pub peak_mem_one_snapshot: u64,
    pub frame_or_stats: OverlapStats,
    /// Exact per-size estimates; sizes missing here fall back to summing the
    /// one-snapshot numbers.
    pub candidates: BTreeMap<usize, CandidateStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Oom,
    PipelineStall,
    ExceedsFrame,
    Unprofiled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunerDecision {
    pub s_per: usize,
    pub upper_bound: usize,
    pub device_reuse_bytes: u64,
    pub rejected: Vec<(usize, RejectReason)>,
    /// Candidates that passed every filter with their estimated speedup.
    pub scored: Vec<(usize, f64)>,
    pub estimated_latency: f64,
}

impl TunerDecision {
    pub fn explain(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "memory upper bound: {}", self.upper_bound);
        for (n, why) in &self.rejected {
            let _ = writeln!(s, "s_per={n}: rejected ({why:?})");
        }
        for (n, sp) in &self.scored {
            let _ = writeln!(s, "s_per={n}: estimated speedup {sp:.4}");
        }
        let _ = writeln!(
            s,
            "selected s_per={} (estimated latency {:.1}, device reuse {} bytes)",
            self.s_per, self.estimated_latency, self.device_reuse_bytes
        );
        s
    }
}

fn usable_memory(device_total: u64) -> u64 {
    (device_total as u128 * (100 - RESERVED_PERCENT) as u128 / 100) as u64
}

/// Largest candidate whose N-fold one-snapshot peak fits the device after the
/// reserved headroom.
pub fn memory_upper_bound(peak_one: u64, device_total: u64, candidates: &[usize]) -> Result<usize> {
    let usable = usable_memory(device_total);
    if peak_one > usable {
        return Err(Error::Capacity(format!(
            "one-snapshot peak {peak_one} bytes exceeds usable device memory {usable}"
        )));
    }
    Ok(candidates
        .iter()
        .copied()
        .chain([1])
        .filter(|&n| (n as u128) * (peak_one as u128) <= usable as u128)
        .max()
        .unwrap_or(1))
}

/// Profile lookup with nearest-cell fallback.
///
/// The closest populated width is used first, then the populated overlap
/// bucket nearest `or_value`; ties prefer the lower bucket.
pub fn estimate_speedup(profile: &TunerProfile, or_value: f64, dim: usize, s_per: usize) -> Result<f64> {
    if profile.entries.is_empty() {
        return Err(Error::Config("tuner profile is empty".into()));
    }
    if s_per == 1 {
        return Ok(1.0);
    }
    let rows: Vec<&ProfileEntry> = profile.entries.iter().filter(|e| e.s_per == s_per).collect();
    let best_dim = rows
        .iter()
        .map(|e| e.dim)
        .min_by_key(|&d| (d.abs_diff(dim), d))
        .ok_or_else(|| Error::Config(format!("profile has no entries for s_per={s_per}")))?;
    let target = profile.bucket_of(or_value);
    let distance = |b: usize| {
        let (lo, hi) = (profile.or_bounds[b], profile.or_bounds[b + 1]);
        if or_value < lo {
            lo - or_value
        } else if or_value > hi {
            or_value - hi
        } else {
            0.0
        }
    };
    rows.iter()
        .filter(|e| e.dim == best_dim)
        .min_by(|a, b| {
            let key = |e: &ProfileEntry| (e.or_bucket != target, distance(e.or_bucket));
            let (ka, kb) = (key(a), key(b));
            ka.0.cmp(&kb.0)
                .then(ka.1.total_cmp(&kb.1))
                .then(a.or_bucket.cmp(&b.or_bucket))
        })
        .map(|e| e.speedup)
        .ok_or_else(|| Error::Config(format!("profile has no entries for s_per={s_per}")))
}

fn fallback_candidate(obs: &FrameObservation, n: usize, speedup: f64) -> CandidateStats {
    let len = obs.per_snapshot_bytes.len();
    let partitions = (0..len)
        .step_by(n)
        .map(|s| {
            let e = (s + n).min(len);
            PartitionEstimate {
                bytes: obs.per_snapshot_bytes[s..e].iter().sum(),
                compute: obs.per_snapshot_compute[s..e].iter().sum::<f64>() / speedup.max(f64::MIN_POSITIVE),
                host: 0.0,
            }
        })
        .collect();
    CandidateStats {
        partitions,
        overlap_rate: obs.frame_or_stats.partition_rate,
        peak_bytes: obs.peak_mem_one_snapshot.saturating_mul(n as u64),
    }
}

/// Every partition's preparation and transfer must fit inside the compute
/// window of the partition before it, wrapping around to the frame's last
/// partition.
fn stalls(parts: &[PartitionEstimate], machine: &MachineConstants) -> bool {
    let p = parts.len();
    (0..p).any(|k| parts[k].host + machine.transfer_time(parts[k].bytes) > parts[(k + p - 1) % p].compute)
}

pub fn decide(
    frame: &Frame,
    obs: &FrameObservation,
    profile: &TunerProfile,
    device_total: u64,
    candidates: &[usize],
) -> Result<TunerDecision> {
    let upper = memory_upper_bound(obs.peak_mem_one_snapshot, device_total, candidates)?;
    let mut sorted: Vec<usize> = candidates.iter().copied().chain([1]).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rejected = Vec::new();
    let mut scored = Vec::new();
    for n in sorted {
        if n > upper {
            rejected.push((n, RejectReason::Oom));
            continue;
        }
        if n > frame.size {
            rejected.push((n, RejectReason::ExceedsFrame));
            continue;
        }
        if n == 1 {
            scored.push((1, 1.0));
            continue;
        }
        let or_value = obs
            .candidates
            .get(&n)
            .map_or(obs.frame_or_stats.partition_rate, |c| c.overlap_rate);
        let Ok(speedup) = estimate_speedup(profile, or_value, obs.feature_dim, n) else {
            rejected.push((n, RejectReason::Unprofiled));
            continue;
        };
        let stats = obs
            .candidates
            .get(&n)
            .cloned()
            .unwrap_or_else(|| fallback_candidate(obs, n, speedup));
        if stalls(&stats.partitions, &profile.machine) {
            rejected.push((n, RejectReason::PipelineStall));
            continue;
        }
        scored.push((n, speedup));
    }
    // strict comparison keeps the smaller size on ties
    let (s_per, speedup) = scored
        .iter()
        .copied()
        .fold((1, 1.0), |best, c| if c.1 > best.1 { c } else { best });
    let peak = obs
        .candidates
        .get(&s_per)
        .map_or(obs.peak_mem_one_snapshot.saturating_mul(s_per as u64), |c| c.peak_bytes);
    let total_compute: f64 = obs.per_snapshot_compute.iter().sum();
    Ok(TunerDecision {
        s_per,
        upper_bound: upper,
        device_reuse_bytes: device_total.saturating_sub(peak),
        rejected,
        scored,
        estimated_latency: total_compute / speedup,
    })
}

/// Modeled aggregation time of one group run together versus one snapshot
/// at a time.
pub fn group_speedup(group: &[&Csr], dim: usize, cfg: &ExecConfig) -> Result<f64> {
    let cap = cfg.slice_cap;
    let together = count_parallel_access(&decompose(group, cap)?, dim, cfg)?.modeled_time(&cfg.cost);
    let mut apart = 0.0;
    for g in group {
        let s = SlicedCsr::from_csr(g, cap)?;
        apart += count_single_access(&s, g.node_count(), dim, cfg)?.modeled_time(&cfg.cost);
    }
    Ok(if together == 0.0 { 1.0 } else { apart / together })
}

pub struct ProfileRequest<'a> {
    pub candidates: &'a [usize],
    pub dims: &'a [usize],
    pub or_targets: &'a [f64],
    pub seed: u64,
    /// Upper limit on samples averaged per cell.
    pub max_samples: usize,
    pub machine: MachineConstants,
}

/// Offline speedup table from contiguous snapshot groups whose overlap rate
/// lands within [`OR_WINDOW`] of each target.
pub fn build_profile(datasets: &[SnapshotSequence], req: &ProfileRequest<'_>, cfg: &ExecConfig) -> Result<TunerProfile> {
    cfg.validate()?;
    if req.or_targets.is_empty() || req.dims.is_empty() {
        return Err(Error::Argument("profile needs overlap targets and dimensions".into()));
    }
    let or_bounds = TunerProfile::bounds_for_targets(req.or_targets);
    let mut targets = req.or_targets.to_vec();
    targets.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut entries = Vec::new();
    let mut missing = Vec::new();
    let mut sizes: Vec<usize> = req.candidates.to_vec();
    sizes.sort_unstable();
    sizes.dedup();

    for &n in &sizes {
        // every contiguous group of n snapshots with its overlap rate
        let mut groups: Vec<(usize, usize, f64)> = Vec::new();
        if n > 1 {
            for (d, seq) in datasets.iter().enumerate() {
                for s in 0..seq.len().saturating_sub(n - 1) {
                    let g: Vec<&Csr> = (s..s + n).map(|t| &seq.get(t).adjacency).collect();
                    groups.push((d, s, overlap_rate(&g, cfg.slice_cap)?.partition_rate));
                }
            }
        }
        for (bucket, &target) in targets.iter().enumerate() {
            let mut matched: Vec<(usize, usize)> = groups
                .iter()
                .filter(|g| (g.2 - target).abs() <= OR_WINDOW)
                .map(|g| (g.0, g.1))
                .collect();
            matched.shuffle(&mut rng);
            matched.truncate(req.max_samples.max(MIN_SAMPLES));

            for &dim in req.dims {
                if n == 1 {
                    entries.push(ProfileEntry {
                        or_bucket: bucket,
                        dim,
                        s_per: 1,
                        speedup: 1.0,
                        samples: 0,
                    });
                    continue;
                }
                if matched.len() < MIN_SAMPLES || dim * n > cfg.max_coalescent_dim() {
                    missing.push((bucket, dim, n));
                    continue;
                }
                let mut sum = 0.0;
                for &(d, s) in &matched {
                    let seq = &datasets[d];
                    let g: Vec<&Csr> = (s..s + n).map(|t| &seq.get(t).adjacency).collect();
                    sum += group_speedup(&g, dim, cfg)?;
                }
                entries.push(ProfileEntry {
                    or_bucket: bucket,
                    dim,
                    s_per: n,
                    speedup: sum / matched.len() as f64,
                    samples: matched.len(),
                });
            }
        }
    }
    Ok(TunerProfile {
        or_bounds,
        dims: req.dims.to_vec(),
        entries,
        missing,
        machine: req.machine.clone(),
    })
}

/// Expected overlap rate of `n` consecutive snapshots when each step keeps
/// a `1 - churn` share of edges and adds as many new ones.
fn expected_group_rate(churn: f64, n: usize) -> f64 {
    let keep = (1.0 - churn).powi(n as i32 - 1);
    keep / (1.0 + (n as f64 - 1.0) * churn)
}

/// Churn rate whose `n`-snapshot groups hit `target` in expectation.
pub fn churn_for_rate(target: f64, n: usize) -> f64 {
    if n <= 1 || target >= 1.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = (lo + hi) / 2.0;
        if expected_group_rate(mid, n) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + hi) / 2.0
}

/// Synthetic sequences whose groups cover every (target, size) pair.
pub fn synthetic_profile_corpus(
    node_count: usize,
    base_edges: usize,
    or_targets: &[f64],
    candidates: &[usize],
    seed: u64,
) -> Result<Vec<SnapshotSequence>> {
    let mut out = Vec::new();
    let mut idx = 0u64;
    for &n in candidates.iter().filter(|&&n| n > 1) {
        for &t in or_targets {
            out.push(crate::dtdg::generate_synthetic(&GenerateParams {
                node_count,
                base_edges,
                steps: n + MIN_SAMPLES + 1,
                churn_rate: churn_for_rate(t, n),
                seed: seed.wrapping_add(idx),
                feature_dim: 1,
            })?);
            idx += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: u64 = 1 << 30;

    fn flat_profile(table: &[(usize, usize, f64)]) -> TunerProfile {
        TunerProfile {
            or_bounds: TunerProfile::bounds_for_targets(&DEFAULT_OR_TARGETS),
            dims: vec![16],
            entries: table
                .iter()
                .map(|&(b, n, s)| ProfileEntry {
                    or_bucket: b,
                    dim: 16,
                    s_per: n,
                    speedup: s,
                    samples: 5,
                })
                .collect(),
            missing: vec![],
            machine: MachineConstants {
                transfer_bandwidth: 1e12,
                transfer_latency: 0.0,
            },
        }
    }

    fn obs(size: usize, or: f64, peak: u64) -> FrameObservation {
        FrameObservation {
            frame: Frame { start: 0, size, stride: 1 },
            feature_dim: 16,
            per_snapshot_bytes: vec![1000; size],
            per_snapshot_compute: vec![100.0; size],
            peak_mem_one_snapshot: peak,
            frame_or_stats: OverlapStats {
                pairwise_rates: vec![or; size.saturating_sub(1)],
                partition_rate: or,
                bytes_saved: 0,
            },
            candidates: BTreeMap::new(),
        }
    }

    #[test]
    fn bound_examples() {
        assert_eq!(memory_upper_bound(GB, 16 * GB, &DEFAULT_CANDIDATES).unwrap(), 8);
        assert_eq!(memory_upper_bound(9 * GB, 16 * GB, &DEFAULT_CANDIDATES).unwrap(), 1);
        assert_eq!(memory_upper_bound(0, 16 * GB, &DEFAULT_CANDIDATES).unwrap(), 8);
        assert!(matches!(
            memory_upper_bound(16 * GB, 16 * GB, &DEFAULT_CANDIDATES),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn bucket_layout() {
        let p = flat_profile(&[]);
        assert_eq!(p.or_bounds, vec![0.0, 0.2, 0.4, 0.6, 0.8, 0.95, 1.0]);
        assert_eq!(p.bucket_of(0.0), 0);
        assert_eq!(p.bucket_of(0.97), 5);
        assert_eq!(p.bucket_of(1.0), 5);
    }

    #[test]
    fn lookup_rules() {
        let p = flat_profile(&[(1, 2, 1.2), (3, 2, 1.6), (5, 2, 1.9), (5, 8, 3.0)]);
        assert_eq!(estimate_speedup(&p, 0.5, 16, 1).unwrap(), 1.0);
        // bucket 2 is empty and equally far from buckets 1 and 3
        assert_eq!(estimate_speedup(&p, 0.5, 16, 2).unwrap(), 1.2);
        assert_eq!(estimate_speedup(&p, 0.99, 64, 2).unwrap(), 1.9);
        assert!(estimate_speedup(&p, 1.0, 16, 8).unwrap() >= estimate_speedup(&p, 1.0, 16, 2).unwrap());
        assert!(estimate_speedup(&flat_profile(&[]), 0.5, 16, 2).is_err());
    }

    #[test]
    fn all_oom_falls_back() {
        let p = flat_profile(&[(5, 2, 2.0), (5, 4, 3.0), (5, 8, 4.0)]);
        let o = obs(16, 0.97, 9 * GB);
        let d = decide(&o.frame, &o, &p, 16 * GB, &DEFAULT_CANDIDATES).unwrap();
        assert_eq!(d.s_per, 1);
        assert_eq!(
            d.rejected,
            vec![(2, RejectReason::Oom), (4, RejectReason::Oom), (8, RejectReason::Oom)]
        );
    }

    #[test]
    fn monotone_table_picks_largest() {
        let p = flat_profile(&[(5, 2, 1.5), (5, 4, 2.0), (5, 8, 2.6)]);
        let o = obs(16, 0.95, GB);
        let d = decide(&o.frame, &o, &p, 16 * GB, &DEFAULT_CANDIDATES).unwrap();
        assert_eq!(d.s_per, 8);
        assert!(d.rejected.is_empty());
    }

    #[test]
    fn starved_bandwidth_stalls() {
        let mut p = flat_profile(&[(5, 2, 1.5), (5, 4, 2.0), (5, 8, 2.6)]);
        p.machine.transfer_bandwidth = 1.0;
        let o = obs(16, 0.95, GB);
        let d = decide(&o.frame, &o, &p, 16 * GB, &DEFAULT_CANDIDATES).unwrap();
        assert_eq!(d.s_per, 1);
        assert!(d.rejected.iter().all(|r| r.1 == RejectReason::PipelineStall));
        assert_eq!(d.rejected.len(), 3);
    }

    #[test]
    fn ties_prefer_smaller() {
        let p = flat_profile(&[(5, 2, 2.0), (5, 4, 2.0)]);
        let o = obs(16, 1.0, GB);
        let d = decide(&o.frame, &o, &p, 16 * GB, &[1, 2, 4]).unwrap();
        assert_eq!(d.s_per, 2);
    }

    #[test]
    fn churn_solver_hits_targets() {
        for n in [2, 4, 8] {
            for t in [0.1, 0.5, 0.9] {
                let c = churn_for_rate(t, n);
                assert!((expected_group_rate(c, n) - t).abs() < 1e-9);
            }
        }
        assert_eq!(churn_for_rate(1.0, 4), 0.0);
    }

    #[test]
    fn built_profile_shape() {
        let cfg = ExecConfig::default();
        let corpus = synthetic_profile_corpus(300, 1500, &[0.5, 1.0], &[1, 2, 4], 11).unwrap();
        let req = ProfileRequest {
            candidates: &[1, 2, 4],
            dims: &[2, 16],
            or_targets: &[0.5, 1.0],
            seed: 3,
            max_samples: 6,
            machine: MachineConstants::default(),
        };
        let p = build_profile(&corpus, &req, &cfg).unwrap();
        assert!(p.entries.iter().filter(|e| e.s_per == 1).all(|e| e.speedup == 1.0));
        let top = p.bucket_of(1.0);
        assert!(p.entries.iter().any(|e| e.or_bucket == top && e.s_per == 4));
        assert_eq!(p, build_profile(&corpus, &req, &cfg).unwrap());
        let back = TunerProfile::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
