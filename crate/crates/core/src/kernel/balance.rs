use super::{AccessStats, ExecConfig};
use crate::sliced::{Csr, SlicedCsr};

/// Work layouts compared by the load-balance model.
#[derive(Clone, Copy, Debug)]
pub enum BalanceInput<'a> {
    /// Each warp takes a coalesced group of consecutive slices.
    Sliced(&'a SlicedCsr),
    /// Each warp takes one row.
    Csr(&'a Csr),
}

/// Per-block work (one unit per non-zero per feature column) and the ideal
/// versus wave-scheduled completion time.
///
/// Ideal time spreads the total over the concurrently resident blocks; the
/// scheduled time runs blocks in waves of `max_active_blocks`, each wave
/// lasting as long as its heaviest block.
pub fn load_balance_report(input: BalanceInput<'_>, dim: usize, cfg: &ExecConfig) -> AccessStats {
    let warp_work: Vec<u64> = match input {
        BalanceInput::Sliced(s) => {
            let c = cfg.select_coalesce_num(dim);
            (0..s.n_slices())
                .collect::<Vec<_>>()
                .chunks(c)
                .map(|g| g.iter().map(|&i| s.slice_len(i) as u64).sum::<u64>() * dim as u64)
                .collect()
        }
        BalanceInput::Csr(m) => (0..m.node_count()).map(|r| (m.degree(r) * dim) as u64).collect(),
    };
    let per_block_work: Vec<u64> = warp_work
        .chunks(cfg.warps_per_block.max(1))
        .map(|b| b.iter().sum())
        .collect();
    let total: u64 = per_block_work.iter().sum();
    let (balanced_time, actual_time) = if per_block_work.is_empty() {
        (0.0, 0.0)
    } else {
        let resident = cfg.max_active_blocks.min(per_block_work.len()).max(1);
        let actual: u64 = per_block_work
            .chunks(cfg.max_active_blocks.max(1))
            .map(|w| w.iter().copied().max().unwrap_or(0))
            .sum();
        (total as f64 / resident as f64, actual as f64)
    };
    AccessStats {
        per_block_work,
        balanced_time,
        actual_time,
        ..AccessStats::default()
    }
}

/// Relative gap between scheduled and ideal time; zero for an empty input.
pub(crate) fn imbalance(st: &AccessStats) -> f64 {
    if st.balanced_time == 0.0 {
        0.0
    } else {
        (st.actual_time - st.balanced_time) / st.balanced_time
    }
}

impl AccessStats {
    /// `(actual - balanced) / balanced`.
    pub fn imbalance_ratio(&self) -> f64 {
        imbalance(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(blocks: usize, warps: usize) -> ExecConfig {
        ExecConfig {
            max_active_blocks: blocks,
            warps_per_block: warps,
            ..ExecConfig::default()
        }
    }

    #[test]
    fn empty_graph_is_zero() {
        let m = Csr::empty(0);
        let st = load_balance_report(BalanceInput::Csr(&m), 16, &ExecConfig::default());
        assert_eq!((st.balanced_time, st.actual_time), (0.0, 0.0));
        let s = SlicedCsr::empty(32);
        let st = load_balance_report(BalanceInput::Sliced(&s), 16, &ExecConfig::default());
        assert_eq!((st.balanced_time, st.actual_time), (0.0, 0.0));
    }

    #[test]
    fn uniform_degree_is_balanced() {
        // 64 rows of degree 3, 4 rows per block, 8 resident blocks: 2 full waves
        let edges: Vec<_> = (0..64u32).flat_map(|r| (0..3).map(move |k| (r, (r + k + 1) % 64, 1.0))).collect();
        let m = Csr::from_edges(64, &edges).unwrap();
        let st = load_balance_report(BalanceInput::Csr(&m), 4, &cfg(8, 4));
        assert_eq!(st.balanced_time, st.actual_time);
        assert_eq!(st.actual_time, 2.0 * 4.0 * 12.0);
    }

    #[test]
    fn hub_row_gap_shrinks_with_slices() {
        let mut edges: Vec<(u32, u32, f32)> = (1..1000u32).map(|c| (0, c, 1.0)).collect();
        edges.extend((1..1000u32).map(|r| (r, (r + 1) % 1000, 1.0)));
        edges.sort_by_key(|e| (e.0, e.1));
        let m = Csr::from_edges(1000, &edges).unwrap();
        let c = cfg(16, 4);
        let csr = load_balance_report(BalanceInput::Csr(&m), 2, &c);
        let s = SlicedCsr::from_csr(&m, 32).unwrap();
        let sl = load_balance_report(BalanceInput::Sliced(&s), 2, &c);
        assert!(csr.actual_time > 5.0 * csr.balanced_time);
        assert!(sl.imbalance_ratio() < csr.imbalance_ratio());
        let (mx, mn) = (sl.per_block_work.iter().max().unwrap(), sl.per_block_work.iter().min().unwrap());
        assert!(mx - mn <= (32 * 4 * 4 * 2) as u64);
    }
}
