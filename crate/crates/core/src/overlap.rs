//! Splitting a group of snapshots into one shared adjacency plus per-snapshot
//! exclusive parts, and overlap-rate statistics over snapshot groups.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sliced::{Csr, SlicedCsr};

/// `a_over` holds every edge present with an identical weight in all
/// snapshots of the group; `exclusives[i]` holds the rest of snapshot `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapDecomposition {
    node_count: usize,
    pub a_over: SlicedCsr,
    pub exclusives: Vec<SlicedCsr>,
}

impl OverlapDecomposition {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn s_per(&self) -> usize {
        self.exclusives.len()
    }

    pub fn slice_cap(&self) -> usize {
        self.a_over.slice_cap()
    }

    /// Decomposition with an empty shared part: each snapshot ships whole.
    pub fn trivial(snapshots: &[&Csr], slice_cap: usize) -> Result<Self> {
        let node_count = check_shapes(snapshots)?;
        let exclusives = snapshots
            .iter()
            .map(|c| SlicedCsr::from_csr(c, slice_cap))
            .collect::<Result<Vec<_>>>()?;
        Ok(OverlapDecomposition {
            node_count,
            a_over: SlicedCsr::empty(slice_cap),
            exclusives,
        })
    }

    /// Restricts the decomposition to the listed snapshots, in the given
    /// order. The shared part stays valid for any subset.
    pub fn select(&self, indices: &[usize]) -> OverlapDecomposition {
        OverlapDecomposition {
            node_count: self.node_count,
            a_over: self.a_over.clone(),
            exclusives: indices.iter().map(|&i| self.exclusives[i].clone()).collect(),
        }
    }

    /// `a_over + exclusives[i]` as a CSR matrix.
    pub fn reconstruct(&self, i: usize) -> Result<Csr> {
        self.a_over
            .to_csr(self.node_count)?
            .disjoint_sum(&self.exclusives[i].to_csr(self.node_count)?)
    }

    /// Per-row non-zero count of snapshot `i`.
    pub fn degrees(&self, i: usize) -> Vec<u32> {
        let mut deg = self.a_over.row_degrees(self.node_count);
        for (d, e) in deg.iter_mut().zip(self.exclusives[i].row_degrees(self.node_count)) {
            *d += e;
        }
        deg
    }

    /// Array entries shipped when the shared part and every exclusive part
    /// are transferred separately. Empty structures are not shipped.
    pub fn shipped_entries(&self) -> u64 {
        shipped_entries(&self.a_over) + self.exclusives.iter().map(shipped_entries).sum::<u64>()
    }

    /// Entries needed when only the snapshots in `needed` are shipped.
    pub fn shipped_entries_for(&self, needed: &[usize]) -> (u64, u64) {
        if needed.is_empty() {
            return (0, 0);
        }
        let over = shipped_entries(&self.a_over);
        let excl = needed.iter().map(|&i| shipped_entries(&self.exclusives[i])).sum();
        (over, excl)
    }

    pub fn payload_nnz(&self) -> usize {
        self.a_over.nnz() + self.exclusives.iter().map(SlicedCsr::nnz).sum::<usize>()
    }
}

/// Storage entries for shipping `m`; an empty matrix is never shipped.
pub fn shipped_entries(m: &SlicedCsr) -> u64 {
    if m.is_empty() {
        0
    } else {
        m.storage_entries()
    }
}

fn check_shapes(snapshots: &[&Csr]) -> Result<usize> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::Argument("at least one snapshot is required".into()))?;
    let n = first.node_count();
    if let Some(bad) = snapshots.iter().position(|c| c.node_count() != n) {
        return Err(Error::Argument(format!(
            "snapshot {bad} has {} nodes, expected {n}",
            snapshots[bad].node_count()
        )));
    }
    Ok(n)
}

/// Row-wise k-way sorted merge: the shared part keeps entries whose column and
/// weight bits match in every snapshot.
pub fn decompose(snapshots: &[&Csr], slice_cap: usize) -> Result<OverlapDecomposition> {
    let n = check_shapes(snapshots)?;
    let k = snapshots.len();

    let mut over_offsets = vec![0u32; n + 1];
    let mut over_cols = Vec::new();
    let mut over_vals = Vec::new();
    let mut ex_offsets = vec![vec![0u32; n + 1]; k];
    let mut ex_cols: Vec<Vec<u32>> = vec![Vec::new(); k];
    let mut ex_vals: Vec<Vec<f32>> = vec![Vec::new(); k];

    let mut cursors = vec![0usize; k];
    let mut shared_cols: Vec<u32> = Vec::new();
    for r in 0..n {
        let rows: Vec<(&[u32], &[f32])> = snapshots.iter().map(|c| c.row(r)).collect();
        cursors.iter_mut().for_each(|c| *c = 0);
        shared_cols.clear();
        let (first_cols, first_vals) = rows[0];
        'entries: for (&col, &w) in first_cols.iter().zip(first_vals) {
            for j in 1..k {
                let (cols, vals) = rows[j];
                let cur = &mut cursors[j];
                while *cur < cols.len() && cols[*cur] < col {
                    *cur += 1;
                }
                if *cur == cols.len() || cols[*cur] != col || vals[*cur].to_bits() != w.to_bits() {
                    continue 'entries;
                }
            }
            shared_cols.push(col);
            over_cols.push(col);
            over_vals.push(w);
        }
        over_offsets[r + 1] = over_cols.len() as u32;

        for (i, &(cols, vals)) in rows.iter().enumerate() {
            let mut s = 0;
            for (&col, &w) in cols.iter().zip(vals) {
                while s < shared_cols.len() && shared_cols[s] < col {
                    s += 1;
                }
                if s < shared_cols.len() && shared_cols[s] == col {
                    continue;
                }
                ex_cols[i].push(col);
                ex_vals[i].push(w);
            }
            ex_offsets[i][r + 1] = ex_cols[i].len() as u32;
        }
    }

    let a_over = SlicedCsr::from_csr(&Csr::new(over_offsets, over_cols, over_vals)?, slice_cap)?;
    let exclusives = ex_offsets
        .into_iter()
        .zip(ex_cols)
        .zip(ex_vals)
        .map(|((o, c), v)| SlicedCsr::from_csr(&Csr::new(o, c, v)?, slice_cap))
        .collect::<Result<Vec<_>>>()?;
    Ok(OverlapDecomposition {
        node_count: n,
        a_over,
        exclusives,
    })
}

/// [`decompose`], falling back to [`OverlapDecomposition::trivial`] when the
/// shared part is too small to pay for its own slice and header overhead.
pub fn decompose_for_transfer(snapshots: &[&Csr], slice_cap: usize) -> Result<OverlapDecomposition> {
    let d = decompose(snapshots, slice_cap)?;
    let trivial = OverlapDecomposition::trivial(snapshots, slice_cap)?;
    if d.shipped_entries() <= trivial.shipped_entries() {
        Ok(d)
    } else {
        Ok(trivial)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    /// Intersection-over-union of adjacent snapshot pairs.
    pub pairwise_rates: Vec<f64>,
    /// Intersection-over-union over the whole group.
    pub partition_rate: f64,
    /// Bytes not shipped thanks to sending the shared part once.
    pub bytes_saved: u64,
}

impl OverlapStats {
    pub fn min_pairwise(&self) -> f64 {
        self.pairwise_rates.iter().copied().fold(1.0, f64::min)
    }

    pub fn mean_pairwise(&self) -> f64 {
        if self.pairwise_rates.is_empty() {
            return 1.0;
        }
        self.pairwise_rates.iter().sum::<f64>() / self.pairwise_rates.len() as f64
    }
}

/// `(|∩|, |∪|)` of the topologies (endpoint pairs, weights ignored).
pub fn intersection_union(snapshots: &[&Csr]) -> (usize, usize) {
    let n = snapshots[0].node_count();
    let k = snapshots.len();
    let (mut inter, mut union) = (0, 0);
    let mut cols: Vec<u32> = Vec::new();
    for r in 0..n {
        cols.clear();
        for c in snapshots {
            cols.extend_from_slice(c.row(r).0);
        }
        cols.sort_unstable();
        let mut i = 0;
        while i < cols.len() {
            let mut j = i;
            while j < cols.len() && cols[j] == cols[i] {
                j += 1;
            }
            union += 1;
            if j - i == k {
                inter += 1;
            }
            i = j;
        }
    }
    (inter, union)
}

fn iou(snapshots: &[&Csr]) -> f64 {
    let (inter, union) = intersection_union(snapshots);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Overlap statistics for a group of at least two snapshots.
pub fn overlap_rate(snapshots: &[&Csr], slice_cap: usize) -> Result<OverlapStats> {
    check_shapes(snapshots)?;
    if snapshots.len() < 2 {
        return Err(Error::Argument("overlap rate needs at least two snapshots".into()));
    }
    let pairwise_rates = snapshots.windows(2).map(iou).collect();
    let partition_rate = iou(snapshots);
    let d = decompose(snapshots, slice_cap)?;
    let bytes_saved = (snapshots.len() as u64 - 1) * shipped_entries(&d.a_over) * 4;
    Ok(OverlapStats {
        pairwise_rates,
        partition_rate,
        bytes_saved,
    })
}

/// Decompositions keyed by snapshot range, filled once before partition-wise
/// execution starts and only read afterwards.
#[derive(Debug, Default)]
pub struct DecompositionMemo {
    entries: BTreeMap<(usize, usize), Arc<OverlapDecomposition>>,
}

impl DecompositionMemo {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, range: &Range<usize>) -> Option<Arc<OverlapDecomposition>> {
        self.entries.get(&(range.start, range.end)).cloned()
    }

    /// Returns the cached decomposition for `range`, computing it on first use.
    pub fn get_or_insert_with(
        &mut self,
        range: Range<usize>,
        build: impl FnOnce() -> Result<OverlapDecomposition>,
    ) -> Result<Arc<OverlapDecomposition>> {
        if let Some(d) = self.get(&range) {
            return Ok(d);
        }
        let d = Arc::new(build()?);
        self.entries.insert((range.start, range.end), d.clone());
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.entries.keys().map(|&(s, e)| s..e)
    }
}
