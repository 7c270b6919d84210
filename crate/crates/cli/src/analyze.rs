use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use pipad::kernel::{count_single_access, load_balance_report, transaction_trend, AccessStats, BalanceInput};
use pipad::overlap::overlap_rate;
use pipad::sliced::{Csr, SlicedCsr};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::{write_file, CliError, CliResult, DatasetArgs};

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// Overlap rates and shipped-byte savings per frame and partition size.
    Overlap(OverlapArgs),
    /// Global-memory requests and transactions over a feature-width sweep.
    Kernel(KernelArgs),
    /// Scheduled versus ideal block time for sliced and row-per-warp layouts.
    Balance(BalanceArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Report directory (default `<run dir>/analyze`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OverlapArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Partition sizes, e.g. `1,2,4,8`.
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[command(flatten)]
    pub common: Common,
    /// Feature widths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32,64,128")]
    pub dims: Vec<usize>,
    /// Snapshot whose topology is measured.
    #[arg(long, default_value_t = 0)]
    pub snapshot: usize,
}

#[derive(Args, Debug)]
pub struct BalanceArgs {
    #[command(flatten)]
    pub common: Common,
    /// Feature width; defaults to the dataset's.
    #[arg(long = "width")]
    pub width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub snapshot: usize,
}

#[derive(Serialize)]
struct OverlapRow {
    frame_start: usize,
    s_per: usize,
    partitions: usize,
    mean_partition_rate: f64,
    min_pairwise_rate: f64,
    bytes_saved: u64,
}

#[derive(Serialize)]
pub struct KernelRow {
    pub dim: usize,
    pub requests: u64,
    pub transactions: u64,
    pub active_thread_ratio: f64,
    pub sliced_requests: u64,
    pub sliced_transactions: u64,
    pub sliced_active_thread_ratio: f64,
}

#[derive(Serialize)]
struct BalanceRow {
    layout: &'static str,
    blocks: usize,
    balanced_time: f64,
    actual_time: f64,
    gap: f64,
}

pub fn run(cmd: &AnalyzeCommand) -> CliResult {
    match cmd {
        AnalyzeCommand::Overlap(a) => overlap(a),
        AnalyzeCommand::Kernel(a) => kernel(a),
        AnalyzeCommand::Balance(a) => balance(a),
    }
}

fn report_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out.clone().unwrap_or_else(|| cfg.run_dir().join("analyze"))
}

fn emit<T: Serialize>(dir: &PathBuf, stem: &str, csv: &str, rows: &T) -> CliResult {
    write_file(&dir.join(format!("{stem}.csv")), csv)?;
    let json = serde_json::to_string_pretty(rows).expect("report serializes") + "\n";
    write_file(&dir.join(format!("{stem}.json")), &json)?;
    print!("{csv}");
    Ok(())
}

fn overlap(a: &OverlapArgs) -> CliResult {
    let cfg = a.common.data.experiment()?;
    let seq = cfg.dataset.load(cfg.seed)?;
    let size = a.frame.unwrap_or(cfg.sim.frame_size);
    let stride = a.stride.unwrap_or(cfg.sim.stride);
    let candidates = a.candidates.clone().unwrap_or_else(|| cfg.sim.candidates.clone());
    if candidates.contains(&0) {
        return Err(CliError::Usage("partition sizes must be positive".into()));
    }
    let cap = cfg.sim.exec.slice_cap;
    let mut rows = Vec::new();
    for frame in seq.frames(size, stride)? {
        // a single snapshot has no overlap to measure
        for &n in candidates.iter().filter(|&&n| n >= 2 && n <= frame.size) {
            let parts: Vec<_> = frame.partitions(n)?.into_iter().filter(|p| p.s_per() >= 2).collect();
            let mut sum = 0.0;
            let mut min_pair = 1.0f64;
            let mut saved = 0;
            for p in &parts {
                let g: Vec<&Csr> = p.snapshots().map(|t| &seq.get(t).adjacency).collect();
                let st = overlap_rate(&g, cap)?;
                sum += st.partition_rate;
                min_pair = min_pair.min(st.min_pairwise());
                saved += st.bytes_saved;
            }
            rows.push(OverlapRow {
                frame_start: frame.start,
                s_per: n,
                partitions: parts.len(),
                mean_partition_rate: sum / parts.len().max(1) as f64,
                min_pairwise_rate: min_pair,
                bytes_saved: saved,
            });
        }
    }
    let mut csv = String::from("frame_start,s_per,partitions,mean_partition_rate,min_pairwise_rate,bytes_saved\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.frame_start, r.s_per, r.partitions, r.mean_partition_rate, r.min_pairwise_rate, r.bytes_saved
        );
    }
    emit(&report_dir(&a.common, &cfg), "overlap", &csv, &rows)
}

fn pick(seq_len: usize, t: usize) -> CliResult<usize> {
    if t >= seq_len {
        return Err(CliError::Usage(format!(
            "snapshot {t} out of range; the dataset has {seq_len}"
        )));
    }
    Ok(t)
}

/// Row-per-warp gather counts next to the sliced single-snapshot kernel for
/// each width.
pub fn kernel_rows(adj: &Csr, dims: &[usize], cfg: &pipad::kernel::ExecConfig) -> CliResult<Vec<KernelRow>> {
    let sliced = SlicedCsr::from_csr(adj, cfg.slice_cap)?;
    let features = pipad::matrix::Matrix::zeros(0, 0);
    dims.iter()
        .map(|&dim| {
            if dim == 0 {
                return Err(CliError::Usage("feature widths must be positive".into()));
            }
            let t: AccessStats = transaction_trend(dim, cfg, adj, &features);
            let s = count_single_access(&sliced, adj.node_count(), dim, cfg)?;
            Ok(KernelRow {
                dim,
                requests: t.global_requests,
                transactions: t.global_transactions,
                active_thread_ratio: t.active_thread_ratio(),
                sliced_requests: s.global_requests,
                sliced_transactions: s.global_transactions,
                sliced_active_thread_ratio: s.active_thread_ratio(),
            })
        })
        .collect()
}

fn kernel(a: &KernelArgs) -> CliResult {
    let cfg = a.common.data.experiment()?;
    let seq = cfg.dataset.load(cfg.seed)?;
    let t = pick(seq.len(), a.snapshot)?;
    let rows = kernel_rows(&seq.get(t).adjacency, &a.dims, &cfg.sim.exec)?;
    let mut csv = String::from(
        "dim,requests,transactions,active_thread_ratio,sliced_requests,sliced_transactions,sliced_active_thread_ratio\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.dim,
            r.requests,
            r.transactions,
            r.active_thread_ratio,
            r.sliced_requests,
            r.sliced_transactions,
            r.sliced_active_thread_ratio
        );
    }
    emit(&report_dir(&a.common, &cfg), "kernel", &csv, &rows)
}

fn balance(a: &BalanceArgs) -> CliResult {
    let cfg = a.common.data.experiment()?;
    let seq = cfg.dataset.load(cfg.seed)?;
    let t = pick(seq.len(), a.snapshot)?;
    let dim = a.width.unwrap_or(seq.feature_dim());
    if dim == 0 {
        return Err(CliError::Usage("feature width must be positive".into()));
    }
    let exec = &cfg.sim.exec;
    let adj = &seq.get(t).adjacency;
    let sliced = SlicedCsr::from_csr(adj, exec.slice_cap)?;
    let row = |layout, st: AccessStats| BalanceRow {
        layout,
        blocks: st.per_block_work.len(),
        balanced_time: st.balanced_time,
        actual_time: st.actual_time,
        gap: st.imbalance_ratio(),
    };
    let rows = vec![
        row("sliced", load_balance_report(BalanceInput::Sliced(&sliced), dim, exec)),
        row("csr", load_balance_report(BalanceInput::Csr(adj), dim, exec)),
    ];
    let mut csv = String::from("layout,blocks,balanced_time,actual_time,gap\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.layout, r.blocks, r.balanced_time, r.actual_time, r.gap
        );
    }
    emit(&report_dir(&a.common, &cfg), "balance", &csv, &rows)
}
