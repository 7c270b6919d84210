//! Randomized invariants across the kernel, tuner, reuse and simulator.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use pipad::dtdg::{generate_synthetic, Frame, GenerateParams};
use pipad::kernel::{
    aggregate_parallel, aggregate_reference, count_parallel_access, load_balance_report, transaction_trend,
    update_parallel, BalanceInput, CoalescentFeatures, ExecConfig, GcnWeights, UpdateWeights,
};
use pipad::matrix::Matrix;
use pipad::overlap::{decompose, OverlapStats};
use pipad::reuse::{AggCacheKey, FramePeaks, ReuseCache, Tier};
use pipad::sim::{check_run, simulate, ModelKind, ModelTemplate, ResourceModel, SimConfig, TransferMode};
use pipad::sliced::{Csr, SlicedCsr};
use pipad::tuner::{
    build_profile, decide, memory_upper_bound, synthetic_profile_corpus, FrameObservation, MachineConstants,
    ProfileEntry, ProfileRequest, TunerProfile, DEFAULT_CANDIDATES, DEFAULT_OR_TARGETS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_group() -> impl Strategy<Value = (usize, Vec<Csr>)> {
    (1usize..40, 1usize..5).prop_flat_map(|(n, s)| {
        let edge = (0..n as u32, 0..n as u32, 1u8..4);
        let shared = proptest::collection::vec(edge.clone(), 0..80);
        let own = proptest::collection::vec(proptest::collection::vec(edge, 0..40), s);
        (Just(n), shared, own).prop_map(|(n, shared, own)| {
            let group = own
                .into_iter()
                .map(|mut e| {
                    e.extend(shared.iter().copied());
                    // first occurrence of a position wins
                    let mut seen = BTreeMap::new();
                    for (a, b, w) in e {
                        seen.entry((a, b)).or_insert(w as f32);
                    }
                    let edges: Vec<(u32, u32, f32)> = seen.into_iter().map(|((a, b), w)| (a, b, w)).collect();
                    Csr::from_edges(n, &edges).unwrap()
                })
                .collect();
            (n, group)
        })
    })
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn features(n: usize, dim: usize, s: usize, seed: u64) -> Vec<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s).map(|_| Matrix::random(n, dim, &mut rng)).collect()
}

proptest! {
    #![proptest_config(cases(96))]

    #[test]
    fn parallel_aggregation_matches_reference((n, group) in arb_group(), dim in 1usize..48, seed in 0u64..1000) {
        let cfg = ExecConfig::default();
        let refs: Vec<&Csr> = group.iter().collect();
        let d = decompose(&refs, cfg.slice_cap).unwrap();
        let xs = features(n, dim, group.len(), seed);
        let xr: Vec<&Matrix> = xs.iter().collect();
        let (out, stats) = aggregate_parallel(&d, &CoalescentFeatures::new(&xr).unwrap(), &cfg).unwrap();
        for (i, g) in group.iter().enumerate() {
            let want = aggregate_reference(g, &xs[i]).unwrap();
            if group.len() == 1 {
                prop_assert!(out[i].bit_eq(&want));
            }
            prop_assert!(out[i].max_rel_diff(&want, 1e-6) <= 1e-5);
        }
        let ratio = stats.active_thread_ratio();
        prop_assert!(ratio > 0.0 && ratio <= 1.0);
    }

    #[test]
    fn transactions_never_fall_as_rows_widen((_, group) in arb_group()) {
        let cfg = ExecConfig::default();
        let x = Matrix::zeros(group[0].node_count(), 1);
        let mut last = (0, 0);
        for dim in 1..=160 {
            let s = transaction_trend(dim, &cfg, &group[0], &x);
            prop_assert!(s.global_transactions >= last.0 && s.global_requests >= last.1);
            prop_assert!(s.global_transactions >= s.global_requests);
            last = (s.global_transactions, s.global_requests);
        }
    }

    #[test]
    fn coalescing_never_hurts_thread_use((_, group) in arb_group(), dim in 1usize..8) {
        let one = ExecConfig { coalesce_num: 1, ..ExecConfig::default() };
        let four = ExecConfig::default();
        let refs: Vec<&Csr> = group.iter().collect();
        let d = decompose(&refs, 32).unwrap();
        let a = count_parallel_access(&d, dim, &one).unwrap().active_thread_ratio();
        let b = count_parallel_access(&d, dim, &four).unwrap().active_thread_ratio();
        prop_assert!(b >= a - 1e-12);
    }

    #[test]
    fn weight_reuse_changes_loads_not_values(s in 1usize..9, rows in 1usize..30, f_in in 1usize..70, f_out in 1usize..70, seed in 0u64..500) {
        let cfg = ExecConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = GcnWeights::random(f_in, f_out, &mut rng);
        let aggs: Vec<Matrix> = (0..s).map(|_| Matrix::random(rows, f_in, &mut rng)).collect();
        let (a, sa) = update_parallel(&aggs, UpdateWeights::Shared(&w), &cfg, true).unwrap();
        let (b, sb) = update_parallel(&aggs, UpdateWeights::Shared(&w), &cfg, false).unwrap();
        prop_assert_eq!(sa.weight_tile_loads * s as u64, sb.weight_tile_loads);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.bit_eq(y));
        }
    }

    #[test]
    fn balanced_time_bounds_actual_time((n, group) in arb_group(), dim in 1usize..64) {
        let cfg = ExecConfig::default();
        let sliced = SlicedCsr::from_csr(&group[0], cfg.slice_cap).unwrap();
        for s in [
            load_balance_report(BalanceInput::Sliced(&sliced), dim, &cfg),
            load_balance_report(BalanceInput::Csr(&group[0]), dim, &cfg),
        ] {
            prop_assert!(s.balanced_time <= s.actual_time + 1e-9 * s.actual_time.max(1.0));
            prop_assert!(s.imbalance_ratio() >= -1e-12);
        }
        prop_assert!(n >= 1);
    }
}

fn observation(size: usize, or: f64, peak: u64, bytes: u64, compute: f64) -> FrameObservation {
    FrameObservation {
        frame: Frame { start: 0, size, stride: 1 },
        feature_dim: 16,
        per_snapshot_bytes: vec![bytes; size],
        per_snapshot_compute: vec![compute; size],
        peak_mem_one_snapshot: peak,
        frame_or_stats: OverlapStats {
            pairwise_rates: vec![],
            partition_rate: or,
            bytes_saved: 0,
        },
        candidates: BTreeMap::new(),
    }
}

fn table(mut speedup: impl FnMut(usize, usize) -> f64, machine: MachineConstants) -> TunerProfile {
    let or_bounds = TunerProfile::bounds_for_targets(&DEFAULT_OR_TARGETS);
    let mut entries = Vec::new();
    for b in 0..or_bounds.len() - 1 {
        for n in [2, 4, 8] {
            entries.push(ProfileEntry {
                or_bucket: b,
                dim: 16,
                s_per: n,
                speedup: speedup(b, n),
                samples: 5,
            });
        }
    }
    TunerProfile {
        or_bounds,
        dims: vec![16],
        entries,
        missing: vec![],
        machine,
    }
}

proptest! {
    #![proptest_config(cases(500))]

    #[test]
    fn tuner_never_exceeds_its_memory_bound(
        size in 1usize..20,
        or in 0.0f64..=1.0,
        peak in 1u64..1_000_000,
        device in 1u64..10_000_000,
        bytes in 0u64..100_000,
        compute in 0.0f64..50_000.0,
        bandwidth in 1.0f64..1000.0,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let profile = table(|_, _| rand::Rng::gen_range(&mut rng, 0.2..3.0), MachineConstants { transfer_bandwidth: bandwidth, transfer_latency: 10.0 });
        let obs = observation(size, or, peak, bytes, compute);
        let cands = DEFAULT_CANDIDATES;
        match decide(&obs.frame, &obs, &profile, device, &cands) {
            Ok(d) => {
                let u = memory_upper_bound(peak, device, &cands).unwrap();
                prop_assert_eq!(d.upper_bound, u);
                prop_assert!(d.s_per <= u && d.s_per <= size.max(1));
                prop_assert!(d.s_per == 1 || cands.contains(&d.s_per));
                prop_assert!(d.scored.iter().any(|&(n, _)| n == d.s_per));
                prop_assert!(d.scored.iter().all(|&(n, _)| n <= u));
                prop_assert_eq!(d.scored.len() + d.rejected.len(), 4);
                let parts = obs.frame.partitions(d.s_per).unwrap();
                prop_assert!(!parts.is_empty());
                prop_assert_eq!(parts.iter().map(|p| p.len).sum::<usize>(), size);
            }
            Err(e) => prop_assert!(matches!(e, pipad::error::Error::Capacity(_))),
        }
    }

    #[test]
    fn monotone_table_gives_monotone_choice(a in 0.0f64..1.0, b in 0.0f64..1.0, slope in 0.01f64..1.0) {
        let profile = table(
            |bucket, n| 1.0 + (n as f64).log2() * slope * (1.0 + bucket as f64),
            MachineConstants { transfer_bandwidth: 1e12, transfer_latency: 0.0 },
        );
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let pick = |or: f64| {
            let obs = observation(16, or, 1000, 10, 1.0);
            decide(&obs.frame, &obs, &profile, 1 << 30, &DEFAULT_CANDIDATES).unwrap().s_per
        };
        prop_assert!(pick(lo) <= pick(hi));
    }

    #[test]
    fn reuse_plans_fit_what_the_frame_leaves(
        present in proptest::collection::vec(any::<bool>(), 12),
        rows in 1usize..50,
        peak in 0u64..20_000,
        device in 1u64..40_000,
        start in 0usize..8,
        capacity in 0u64..10_000,
    ) {
        let mut cache = ReuseCache::with_device_capacity(capacity);
        for (t, &p) in present.iter().enumerate() {
            if p {
                cache.record(AggCacheKey::layer0(t, 0), Arc::new(Matrix::zeros(rows, 4)), Tier::Host).unwrap();
            }
        }
        let frame = Frame { start, size: 4, stride: 1 };
        let peaks: FramePeaks = [(start, peak)].into();
        let plan = cache.plan_next_frame(&frame, &peaks, device, 0).unwrap();
        let available = device.saturating_sub(peak);
        prop_assert_eq!(plan.available_bytes, available);
        prop_assert!(plan.buffer_bytes <= available.max(capacity.min(available)));
        let held: u64 = plan.retention.len() as u64 * (rows * 16) as u64;
        prop_assert!(held <= plan.buffer_bytes);
        for k in &plan.retention {
            prop_assert!(frame.snapshots().contains(&k.snapshot) && present[k.snapshot]);
        }
        cache.apply_plan(&plan, true);
        prop_assert!(cache.device().allocated_bytes() <= available);
    }
}

fn sim_profile() -> &'static TunerProfile {
    static P: OnceLock<TunerProfile> = OnceLock::new();
    P.get_or_init(|| {
        let corpus = synthetic_profile_corpus(150, 900, &DEFAULT_OR_TARGETS, &DEFAULT_CANDIDATES, 5).unwrap();
        let req = ProfileRequest {
            candidates: &DEFAULT_CANDIDATES,
            dims: &[4, 8, 16],
            or_targets: &DEFAULT_OR_TARGETS,
            seed: 2,
            max_samples: 5,
            machine: MachineConstants::default(),
        };
        build_profile(&corpus, &req, &ExecConfig::default()).unwrap()
    })
}

proptest! {
    #![proptest_config(cases(32))]

    #[test]
    fn every_run_passes_its_structural_checks(
        n in 20usize..80,
        churn in 0.0f64..=1.0,
        frame in 2usize..6,
        extra in 0usize..4,
        kind in 0usize..3,
        bandwidth in 0.5f64..200.0,
        workers in 1usize..4,
        reuse in any::<bool>(),
        baseline in 0usize..3,
        seed in 0u64..1000,
    ) {
        let seq = generate_synthetic(&GenerateParams {
            node_count: n,
            base_edges: n * 3,
            steps: frame + extra,
            churn_rate: churn,
            seed,
            feature_dim: 4,
        })
        .unwrap();
        let mut cfg = SimConfig {
            model: ModelTemplate::new([ModelKind::MpnnLstm, ModelKind::Evolvegcn, ModelKind::Tgcn][kind]),
            frame_size: frame,
            candidates: vec![1, 2, 4],
            reuse,
            seed,
            resources: ResourceModel {
                host_workers: workers,
                transfer_bandwidth: bandwidth,
                ..ResourceModel::default()
            },
            ..SimConfig::default()
        };
        if baseline > 0 {
            cfg = cfg.baseline(if baseline == 1 { TransferMode::Sync } else { TransferMode::Async });
        }
        let out = simulate(&seq, &cfg, Some(sim_profile())).unwrap();
        let checks = check_run(&out);
        prop_assert!(checks.ok(), "{:?}", checks.violations);
        prop_assert!(out.report.peak_device_bytes <= cfg.resources.device_memory);
        prop_assert!((out.report.breakdown.sum() - 1.0).abs() < 1e-9);
        let again = simulate(&seq, &cfg, Some(sim_profile())).unwrap();
        prop_assert_eq!(out.report.to_csv(), again.report.to_csv());
    }
}
