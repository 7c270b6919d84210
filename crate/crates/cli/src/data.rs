use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use pipad::dtdg::{
    generate_synthetic, ingest_temporal_edges, write_snapshot_dir, FeatureSource, GenerateParams, IngestOptions,
    SnapshotSequence, SMALL_GRAPH_FEATURE_DIM,
};
use pipad::sliced::{storage_cost, SlicedCsr, StorageFormat, DEFAULT_SLICE_CAP};

use crate::config::{infer_node_count, output_root};
use crate::{positive, write_file, CliError, CliResult};

#[derive(Args, Debug)]
pub struct ConvertArgs {
    /// Whitespace-separated `src dst timestamp [weight]` file.
    pub input: PathBuf,
    /// Output directory (default `<output root>/convert`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Maximum non-zeros per slice.
    #[arg(long, default_value_t = DEFAULT_SLICE_CAP, value_parser = positive)]
    pub slice_cap: usize,
    /// Snapshots an edge stays alive for.
    #[arg(long, default_value_t = 1)]
    pub edge_life: usize,
    /// Timestamp bucket width.
    #[arg(long, default_value_t = 1)]
    pub interval: u64,
    /// Vertex count; inferred from the largest id when omitted.
    #[arg(long)]
    pub nodes: Option<usize>,
    /// Sequence length; defaults to the last occupied bucket + 1.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dimension of the seeded random features.
    #[arg(long, default_value_t = SMALL_GRAPH_FEATURE_DIM)]
    pub dim: usize,
    /// Dense feature file shared by every snapshot instead of random ones.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory (default `<output root>/generate`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub nodes: usize,
    /// Edges per snapshot.
    #[arg(long, default_value_t = 20_000)]
    pub edges: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    /// Share of edges replaced between consecutive snapshots.
    #[arg(long, default_value_t = 0.05)]
    pub churn: f64,
    #[arg(long, default_value_t = SMALL_GRAPH_FEATURE_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write sliced-CSR blobs with this cap.
    #[arg(long, value_parser = positive)]
    pub slice_cap: Option<usize>,
}

pub struct StorageRow {
    pub timestep: usize,
    pub nnz: usize,
    pub slices: usize,
    pub csr: u64,
    pub sliced: u64,
    pub coo: u64,
}

pub fn scsr_file_name(t: usize) -> String {
    format!("snap_{t}.scsr")
}

/// Writes the snapshot directory and, with a cap, one sliced blob per
/// snapshot plus `storage.csv`.
pub fn write_dataset(seq: &SnapshotSequence, dir: &Path, slice_cap: Option<usize>) -> CliResult<Vec<StorageRow>> {
    write_snapshot_dir(seq, dir, slice_cap)?;
    let Some(cap) = slice_cap else {
        return Ok(Vec::new());
    };
    let mut rows = Vec::with_capacity(seq.len());
    for s in seq.snapshots() {
        let sliced = SlicedCsr::from_csr(&s.adjacency, cap)?;
        let path = dir.join(scsr_file_name(s.timestep));
        std::fs::write(&path, sliced.to_bytes()).map_err(|e| CliError::io(&path, e))?;
        let (nnz, n, k) = (s.adjacency.nnz(), s.adjacency.node_count(), sliced.n_slices());
        rows.push(StorageRow {
            timestep: s.timestep,
            nnz,
            slices: k,
            csr: storage_cost(StorageFormat::Csr, nnz, n, k),
            sliced: storage_cost(StorageFormat::Sliced, nnz, n, k),
            coo: storage_cost(StorageFormat::Coo, nnz, n, k),
        });
    }
    write_file(&dir.join("storage.csv"), &storage_csv(&rows))?;
    Ok(rows)
}

fn storage_csv(rows: &[StorageRow]) -> String {
    let mut s = String::from("snapshot,nnz,slices,csr,sliced,coo\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.timestep, r.nnz, r.slices, r.csr, r.sliced, r.coo);
    }
    s
}

/// Array entries per format, one line per snapshot and a total.
pub fn storage_table(rows: &[StorageRow]) -> String {
    let mut s = format!(
        "{:>8} {:>10} {:>8} {:>12} {:>12} {:>12}\n",
        "snapshot", "nnz", "slices", "csr", "sliced", "coo"
    );
    let mut total = (0usize, 0usize, 0u64, 0u64, 0u64);
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8} {:>10} {:>8} {:>12} {:>12} {:>12}",
            r.timestep, r.nnz, r.slices, r.csr, r.sliced, r.coo
        );
        total.0 += r.nnz;
        total.1 += r.slices;
        total.2 += r.csr;
        total.3 += r.sliced;
        total.4 += r.coo;
    }
    let _ = writeln!(
        s,
        "{:>8} {:>10} {:>8} {:>12} {:>12} {:>12}",
        "total", total.0, total.1, total.2, total.3, total.4
    );
    s
}

pub fn convert(a: &ConvertArgs) -> CliResult {
    let nodes = match a.nodes {
        Some(n) => n,
        None => infer_node_count(&a.input)?,
    };
    let opts = IngestOptions {
        interval: a.interval,
        edge_life: a.edge_life,
        steps: a.steps,
        features: match &a.features {
            Some(p) => FeatureSource::File(p.clone()),
            None => FeatureSource::Random { seed: a.seed },
        },
        feature_dim: a.dim,
        ..IngestOptions::new(nodes)
    };
    let seq = ingest_temporal_edges(&a.input, &opts)?;
    let out = a.out.clone().unwrap_or_else(|| output_root().join("convert"));
    let rows = write_dataset(&seq, &out, Some(a.slice_cap))?;
    print!("{}", storage_table(&rows));
    println!("wrote {} snapshots to {}", seq.len(), out.display());
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> CliResult {
    let seq = generate_synthetic(&GenerateParams {
        node_count: a.nodes,
        base_edges: a.edges,
        steps: a.steps,
        churn_rate: a.churn,
        seed: a.seed,
        feature_dim: a.dim,
    })?;
    let out = a.out.clone().unwrap_or_else(|| output_root().join("generate"));
    let rows = write_dataset(&seq, &out, a.slice_cap)?;
    if !rows.is_empty() {
        print!("{}", storage_table(&rows));
    }
    println!("wrote {} snapshots to {}", seq.len(), out.display());
    Ok(())
}
