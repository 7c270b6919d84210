//! Multi-snapshot GCN kernels over a modeled GPU.
//!
//! Numerics run on the CPU (data-parallel across rows) while every global
//! memory access a warp would issue is counted against a simple transaction
//! model: a warp-level load instruction is one *request*, and the bytes it
//! touches are served in `transaction_bytes` sized *transactions*.

mod aggregate;
mod balance;
mod update;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use aggregate::{
    aggregate_parallel, aggregate_reference, count_parallel_access, count_row_per_warp,
    count_single_access, transaction_trend,
};
pub use balance::{load_balance_report, BalanceInput};
pub use update::{count_update, gcn_layer, update_naive, update_parallel, GcnLayerOutput, UpdateStats, UpdateWeights};

/// Relative weights of the counted events when converting [`AccessStats`]
/// into abstract time units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCostModel {
    pub transaction: f64,
    pub request: f64,
    /// One warp issuing one instruction slot.
    pub warp_issue: f64,
    pub launch: f64,
}

impl Default for KernelCostModel {
    fn default() -> Self {
        KernelCostModel {
            transaction: 4.0,
            request: 2.0,
            warp_issue: 1.0,
            launch: 2000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    pub warp_width: usize,
    pub transaction_bytes: usize,
    pub max_request_bytes: usize,
    /// Floats one vector load may fetch.
    pub vector_widths: Vec<usize>,
    /// Upper limit on slices grouped per warp (1..=4).
    pub coalesce_num: usize,
    pub slice_cap: usize,
    pub max_active_blocks: usize,
    pub warps_per_block: usize,
    /// Max-width vector requests one feature row may need before the
    /// configuration is rejected.
    pub max_requests_per_row: usize,
    /// Square weight-tile edge for the update GEMM.
    pub tile_size: usize,
    pub cost: KernelCostModel,
}

impl Default for ExecConfig {
    fn default() -> Self {
        ExecConfig {
            warp_width: 32,
            transaction_bytes: 32,
            max_request_bytes: 128,
            vector_widths: vec![32, 64, 128],
            coalesce_num: 4,
            slice_cap: crate::sliced::DEFAULT_SLICE_CAP,
            max_active_blocks: 160,
            warps_per_block: 4,
            max_requests_per_row: 8,
            tile_size: 32,
            cost: KernelCostModel::default(),
        }
    }
}

impl ExecConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("warp_width", self.warp_width),
            ("transaction_bytes", self.transaction_bytes),
            ("max_request_bytes", self.max_request_bytes),
            ("slice_cap", self.slice_cap),
            ("max_active_blocks", self.max_active_blocks),
            ("warps_per_block", self.warps_per_block),
            ("max_requests_per_row", self.max_requests_per_row),
            ("tile_size", self.tile_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(1..=4).contains(&self.coalesce_num) {
            return Err(Error::Config(format!(
                "coalesce_num {} outside 1..=4",
                self.coalesce_num
            )));
        }
        if self.vector_widths.is_empty() || self.vector_widths.contains(&0) {
            return Err(Error::Config("vector_widths must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Largest coalescent row width (floats) the kernel accepts.
    pub fn max_coalescent_dim(&self) -> usize {
        self.max_vector_width() * self.max_requests_per_row
    }

    pub fn max_vector_width(&self) -> usize {
        self.vector_widths.iter().copied().max().unwrap_or(1)
    }

    /// Slices grouped per warp for rows of `dim` floats: the largest value in
    /// {1, 2, 4}, capped by `coalesce_num`, whose groups still fit one warp.
    pub fn select_coalesce_num(&self, dim: usize) -> usize {
        [4, 2, 1]
            .into_iter()
            .find(|&c| c <= self.coalesce_num && c * dim <= self.warp_width)
            .unwrap_or(1)
    }

    /// Requests a warp needs to fetch one row of `dim` floats with vector
    /// loads: one if a width fits the row, otherwise max-width chunks.
    pub fn vector_requests(&self, dim: usize) -> u64 {
        let mut widths = self.vector_widths.clone();
        widths.sort_unstable();
        match widths.iter().find(|&&w| dim <= w) {
            Some(_) => 1,
            None => dim.div_ceil(self.max_vector_width()) as u64,
        }
    }

    pub(crate) fn transactions_for(&self, bytes: usize) -> u64 {
        bytes.div_ceil(self.transaction_bytes) as u64
    }

    pub(crate) fn scalar_requests_for(&self, bytes: usize) -> u64 {
        bytes.div_ceil(self.max_request_bytes) as u64
    }
}

/// Counted global-memory behaviour of one or more kernel launches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccessStats {
    pub global_requests: u64,
    pub global_transactions: u64,
    /// Lane-slots that did useful work.
    pub active_lanes: u64,
    /// Lane-slots issued (warp issue slots × warp width).
    pub lane_slots: u64,
    pub warp_issues: u64,
    pub kernel_launches: u64,
    pub per_block_work: Vec<u64>,
    pub balanced_time: f64,
    pub actual_time: f64,
}

impl AccessStats {
    /// Fraction of issued lanes doing useful work; 1 when nothing was issued.
    pub fn active_thread_ratio(&self) -> f64 {
        if self.lane_slots == 0 {
            1.0
        } else {
            self.active_lanes as f64 / self.lane_slots as f64
        }
    }

    pub fn merge(&mut self, other: &AccessStats) {
        self.global_requests += other.global_requests;
        self.global_transactions += other.global_transactions;
        self.active_lanes += other.active_lanes;
        self.lane_slots += other.lane_slots;
        self.warp_issues += other.warp_issues;
        self.kernel_launches += other.kernel_launches;
        self.per_block_work.extend_from_slice(&other.per_block_work);
        self.balanced_time += other.balanced_time;
        self.actual_time += other.actual_time;
    }

    /// Abstract execution time under `cost`.
    pub fn modeled_time(&self, cost: &KernelCostModel) -> f64 {
        self.global_transactions as f64 * cost.transaction
            + self.global_requests as f64 * cost.request
            + self.warp_issues as f64 * cost.warp_issue
            + self.kernel_launches as f64 * cost.launch
    }
}

impl std::iter::Sum for AccessStats {
    fn sum<I: Iterator<Item = AccessStats>>(iter: I) -> Self {
        iter.fold(AccessStats::default(), |mut acc, s| {
            acc.merge(&s);
            acc
        })
    }
}

/// Column-wise concatenation of a partition's feature matrices: snapshot `i`
/// occupies columns `[i·F, (i+1)·F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoalescentFeatures {
    dim: usize,
    s_per: usize,
    data: Matrix,
}

impl CoalescentFeatures {
    pub fn new(blocks: &[&Matrix]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::Argument("no feature matrices to coalesce".into()))?;
        let (rows, dim) = first.shape();
        if let Some(i) = blocks.iter().position(|m| m.shape() != (rows, dim)) {
            return Err(Error::Argument(format!(
                "feature matrix {i} is {:?}, expected {:?}",
                blocks[i].shape(),
                (rows, dim)
            )));
        }
        let s_per = blocks.len();
        let mut data = Matrix::zeros(rows, dim * s_per);
        for r in 0..rows {
            let out = data.row_mut(r);
            for (i, m) in blocks.iter().enumerate() {
                out[i * dim..(i + 1) * dim].copy_from_slice(m.row(r));
            }
        }
        Ok(CoalescentFeatures { dim, s_per, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s_per(&self) -> usize {
        self.s_per
    }

    pub fn total_dim(&self) -> usize {
        self.dim * self.s_per
    }

    pub fn node_count(&self) -> usize {
        self.data.rows()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn block(&self, i: usize) -> Matrix {
        self.data.column_block(i * self.dim, self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnWeights {
    pub w: Matrix,
    pub b: Vec<f32>,
}

impl GcnWeights {
    pub fn new(w: Matrix, b: Vec<f32>) -> Result<Self> {
        if b.len() != w.cols() {
            return Err(Error::Argument(format!(
                "bias has {} entries, weight has {} columns",
                b.len(),
                w.cols()
            )));
        }
        if !w.all_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("weights must be finite".into()));
        }
        Ok(GcnWeights { w, b })
    }

    /// Uniform weights in `[-scale, scale)` and zero bias.
    pub fn random<R: rand::Rng + ?Sized>(f_in: usize, f_out: usize, rng: &mut R) -> Self {
        let scale = (1.0 / f_in.max(1) as f32).sqrt();
        let data = (0..f_in * f_out)
            .map(|_| (rng.gen::<f32>() * 2.0 - 1.0) * scale)
            .collect();
        GcnWeights {
            w: Matrix::from_vec(f_in, f_out, data).expect("shape matches"),
            b: vec![0.0; f_out],
        }
    }

    pub fn f_in(&self) -> usize {
        self.w.rows()
    }

    pub fn f_out(&self) -> usize {
        self.w.cols()
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Matrix::zeros(dim, dim);
        for i in 0..dim {
            w.set(i, i, 1.0);
        }
        GcnWeights {
            w,
            b: vec![0.0; dim],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coalesce_selection() {
        let cfg = ExecConfig::default();
        assert_eq!(cfg.select_coalesce_num(2), 4);
        assert_eq!(cfg.select_coalesce_num(8), 4);
        assert_eq!(cfg.select_coalesce_num(9), 2);
        assert_eq!(cfg.select_coalesce_num(16), 2);
        assert_eq!(cfg.select_coalesce_num(17), 1);
        assert_eq!(cfg.select_coalesce_num(64), 1);
        let capped = ExecConfig {
            coalesce_num: 1,
            ..ExecConfig::default()
        };
        assert_eq!(capped.select_coalesce_num(2), 1);
    }

    #[test]
    fn vector_width_selection() {
        let cfg = ExecConfig::default();
        assert_eq!(cfg.vector_requests(48), 1);
        assert_eq!(cfg.vector_requests(128), 1);
        assert_eq!(cfg.vector_requests(256), 2);
        assert_eq!(cfg.vector_requests(300), 3);
    }

    #[test]
    fn config_validation() {
        assert!(ExecConfig::default().validate().is_ok());
        let bad = ExecConfig {
            coalesce_num: 5,
            ..ExecConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExecConfig {
            warp_width: 0,
            ..ExecConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn coalescent_layout() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = CoalescentFeatures::new(&[&a, &b]).unwrap();
        assert_eq!(c.data().row(0), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.block(1), b);
        assert_eq!(c.total_dim(), 4);
        let odd = Matrix::zeros(3, 2);
        assert!(CoalescentFeatures::new(&[&a, &odd]).is_err());
    }

    #[test]
    fn weights_shape_checked() {
        assert!(GcnWeights::new(Matrix::zeros(2, 3), vec![0.0; 2]).is_err());
        assert!(GcnWeights::new(Matrix::filled(1, 1, f32::NAN), vec![0.0]).is_err());
    }
}
