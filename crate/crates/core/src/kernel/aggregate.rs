use rayon::prelude::*;

use super::{AccessStats, CoalescentFeatures, ExecConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::overlap::OverlapDecomposition;
use crate::sliced::{Csr, SlicedCsr};

// rows handed to one worker at a time
const ROW_CHUNK: usize = 256;

/// Brute-force mean aggregation over `N(v) ∪ {v}`: the edge-weighted
/// neighbour sum plus the node's own row, divided by `deg(v) + 1`.
pub fn aggregate_reference(adj: &Csr, features: &Matrix) -> Result<Matrix> {
    let n = adj.node_count();
    if features.rows() != n {
        return Err(Error::Argument(format!(
            "features have {} rows, adjacency has {n} nodes",
            features.rows()
        )));
    }
    let dim = features.cols();
    let mut out = Matrix::zeros(n, dim);
    for v in 0..n {
        let (cols, vals) = adj.row(v);
        let mut acc = vec![0.0f32; dim];
        for (&c, &w) in cols.iter().zip(vals) {
            let x = features.row(c as usize);
            for j in 0..dim {
                acc[j] += w * x[j];
            }
        }
        let denom = (cols.len() + 1) as f32;
        let own = features.row(v);
        for (o, (a, x)) in out.row_mut(v).iter_mut().zip(acc.iter().zip(own)) {
            *o = (a + x) / denom;
        }
    }
    Ok(out)
}

fn check_inputs(decomp: &OverlapDecomposition, feats: &CoalescentFeatures, cfg: &ExecConfig) -> Result<()> {
    cfg.validate()?;
    if decomp.s_per() != feats.s_per() {
        return Err(Error::Argument(format!(
            "decomposition covers {} snapshots, features cover {}",
            decomp.s_per(),
            feats.s_per()
        )));
    }
    if decomp.node_count() != feats.node_count() {
        return Err(Error::Argument(format!(
            "decomposition has {} nodes, features have {} rows",
            decomp.node_count(),
            feats.node_count()
        )));
    }
    check_dim(feats.total_dim(), cfg)
}

fn check_dim(total: usize, cfg: &ExecConfig) -> Result<()> {
    if total > cfg.max_coalescent_dim() {
        return Err(Error::Config(format!(
            "coalescent dimension {total} exceeds the supported {}; lower s_per",
            cfg.max_coalescent_dim()
        )));
    }
    Ok(())
}

/// Adds `w · x[col][lo..lo+width]` into the accumulator rows of every slice
/// whose row falls in `rows`, in slice order.
fn accumulate(
    m: &SlicedCsr,
    rows: std::ops::Range<usize>,
    acc: &mut [f32],
    x: &Matrix,
    lo: usize,
    width: usize,
) {
    let ri = m.row_indices();
    let s0 = ri.partition_point(|&r| (r as usize) < rows.start);
    let s1 = ri.partition_point(|&r| (r as usize) < rows.end);
    let stride = x.cols();
    for s in s0..s1 {
        let (r, cols, vals) = m.slice(s);
        let base = (r as usize - rows.start) * stride + lo;
        let out = &mut acc[base..base + width];
        for (&c, &w) in cols.iter().zip(vals) {
            let src = &x.row(c as usize)[lo..lo + width];
            for (o, v) in out.iter_mut().zip(src) {
                *o += w * v;
            }
        }
    }
}

/// Multi-snapshot aggregation over an overlap decomposition.
///
/// The shared part is aggregated once across all coalescent columns, each
/// exclusive part over its own column block, and a final pass adds the self
/// term and divides by each snapshot's degree.
pub fn aggregate_parallel(
    decomp: &OverlapDecomposition,
    feats: &CoalescentFeatures,
    cfg: &ExecConfig,
) -> Result<(Vec<Matrix>, AccessStats)> {
    check_inputs(decomp, feats, cfg)?;
    let n = feats.node_count();
    let dim = feats.dim();
    let total = feats.total_dim();
    let s_per = feats.s_per();
    let x = feats.data();
    let degrees: Vec<Vec<u32>> = (0..s_per).map(|i| decomp.degrees(i)).collect();

    let mut acc = vec![0.0f32; n * total];
    if total > 0 {
        acc.par_chunks_mut(ROW_CHUNK * total)
            .enumerate()
            .for_each(|(chunk, buf)| {
                let r0 = chunk * ROW_CHUNK;
                let rows = r0..r0 + buf.len() / total;
                accumulate(&decomp.a_over, rows.clone(), buf, x, 0, total);
                for (i, ex) in decomp.exclusives.iter().enumerate() {
                    accumulate(ex, rows.clone(), buf, x, i * dim, dim);
                }
                for (k, r) in rows.enumerate() {
                    let out = &mut buf[k * total..(k + 1) * total];
                    let own = x.row(r);
                    for i in 0..s_per {
                        let denom = (degrees[i][r] + 1) as f32;
                        for j in i * dim..(i + 1) * dim {
                            out[j] = (out[j] + own[j]) / denom;
                        }
                    }
                }
            });
    }
    let merged = Matrix::from_vec(n, total, acc)?;
    let outputs = (0..s_per).map(|i| merged.column_block(i * dim, dim)).collect();
    let stats = count_parallel_access(decomp, dim, cfg)?;
    Ok((outputs, stats))
}

/// Access counts of one sliced pass over rows of `dim` floats.
fn count_pass(m: &SlicedCsr, dim: usize, cfg: &ExecConfig) -> AccessStats {
    let mut st = AccessStats::default();
    if m.is_empty() || dim == 0 {
        return st;
    }
    let c = cfg.select_coalesce_num(dim);
    let warp = cfg.warp_width as u64;
    let row_bytes = 4 * dim;
    let row_tx = cfg.transactions_for(row_bytes);
    // scalar lanes when a group fits one warp, vector loads otherwise
    let (req_per_iter, passes) = if c * dim <= cfg.warp_width {
        (1, 1)
    } else {
        (cfg.vector_requests(dim), dim.div_ceil(cfg.warp_width) as u64)
    };
    let n_slices = m.n_slices();
    let mut g = 0;
    while g < n_slices {
        let end = (g + c).min(n_slices);
        let lens: Vec<usize> = (g..end).map(|s| m.slice_len(s)).collect();
        let staged: usize = lens.iter().sum();
        // column and value arrays, staged contiguously
        st.global_requests += 2 * cfg.scalar_requests_for(4 * staged);
        st.global_transactions += 2 * cfg.transactions_for(4 * staged);
        let iters = lens.iter().copied().max().unwrap_or(0);
        for step in 0..iters {
            let active = lens.iter().filter(|&&l| l > step).count() as u64;
            st.global_requests += req_per_iter;
            st.global_transactions += active * row_tx;
            st.warp_issues += passes;
            st.lane_slots += passes * warp;
            st.active_lanes += active * dim as u64;
        }
        g = end;
    }
    st
}

/// Streaming epilogue: reads the accumulators and self rows, writes results.
fn count_normalize(n: usize, total: usize, cfg: &ExecConfig) -> AccessStats {
    let floats = n * total;
    let warp = cfg.warp_width as u64;
    let issues = floats.div_ceil(cfg.warp_width) as u64;
    AccessStats {
        global_requests: 2 * cfg.scalar_requests_for(4 * floats),
        global_transactions: 2 * cfg.transactions_for(4 * floats),
        active_lanes: floats as u64,
        lane_slots: issues * warp,
        warp_issues: issues,
        kernel_launches: 1,
        ..AccessStats::default()
    }
}

/// Counts for [`aggregate_parallel`] without doing the arithmetic.
pub fn count_parallel_access(decomp: &OverlapDecomposition, dim: usize, cfg: &ExecConfig) -> Result<AccessStats> {
    cfg.validate()?;
    let total = dim * decomp.s_per();
    check_dim(total, cfg)?;
    let mut st = count_pass(&decomp.a_over, total, cfg);
    if !decomp.a_over.is_empty() {
        st.kernel_launches += 1;
    }
    let mut excl = AccessStats::default();
    for ex in &decomp.exclusives {
        excl.merge(&count_pass(ex, dim, cfg));
    }
    if decomp.exclusives.iter().any(|e| !e.is_empty()) {
        // all exclusive parts share one launch
        excl.kernel_launches += 1;
    }
    st.merge(&excl);
    st.merge(&count_normalize(decomp.node_count(), total, cfg));
    Ok(st)
}

/// Counts for aggregating one snapshot on its own.
pub fn count_single_access(adj: &SlicedCsr, node_count: usize, dim: usize, cfg: &ExecConfig) -> Result<AccessStats> {
    cfg.validate()?;
    check_dim(dim, cfg)?;
    let mut st = count_pass(adj, dim, cfg);
    if !adj.is_empty() {
        st.kernel_launches += 1;
    }
    st.merge(&count_normalize(node_count, dim, cfg));
    Ok(st)
}

/// Feature-gather traffic of the one-row-per-warp baseline: every non-zero
/// makes the warp fetch one neighbour row of `dim` floats with scalar lanes.
/// Only the shape of the graph matters, so `_features` is not read.
pub fn transaction_trend(dim: usize, cfg: &ExecConfig, adj: &Csr, _features: &Matrix) -> AccessStats {
    gather_counts(adj.nnz() as u64, dim, cfg)
}

fn gather_counts(nnz: u64, dim: usize, cfg: &ExecConfig) -> AccessStats {
    let row_bytes = 4 * dim;
    let passes = dim.div_ceil(cfg.warp_width).max(1) as u64;
    AccessStats {
        global_requests: nnz * cfg.scalar_requests_for(row_bytes),
        global_transactions: nnz * cfg.transactions_for(row_bytes),
        active_lanes: nnz * dim as u64,
        lane_slots: nnz * passes * cfg.warp_width as u64,
        warp_issues: nnz * passes,
        kernel_launches: 1,
        ..AccessStats::default()
    }
}

/// Full counts of the row-per-warp baseline kernel: neighbour gathers, the
/// per-row index and value loads, and the normalization epilogue.
pub fn count_row_per_warp(adj: &Csr, dim: usize, cfg: &ExecConfig) -> AccessStats {
    let mut st = gather_counts(adj.nnz() as u64, dim, cfg);
    for r in 0..adj.node_count() {
        let bytes = 4 * adj.degree(r);
        if bytes > 0 {
            st.global_requests += 2 * cfg.scalar_requests_for(bytes);
            st.global_transactions += 2 * cfg.transactions_for(bytes);
        }
    }
    st.merge(&count_normalize(adj.node_count(), dim, cfg));
    st
}
