//! Discrete-time dynamic graphs: snapshots, frames and partitions, plus
//! temporal edge-list ingestion and a synthetic evolving-graph generator.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sliced::Csr;

/// Feature dimension preset for small graphs.
pub const SMALL_GRAPH_FEATURE_DIM: usize = 16;
/// Feature dimension preset for large graphs.
pub const LARGE_GRAPH_FEATURE_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub timestep: usize,
    pub adjacency: Csr,
    pub features: Matrix,
}

impl Snapshot {
    pub fn node_count(&self) -> usize {
        self.adjacency.node_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSequence {
    node_count: usize,
    feature_dim: usize,
    snapshots: Vec<Snapshot>,
    pub interval_meta: String,
}

impl SnapshotSequence {
    /// Validates timestep ordering and shared shapes.
    pub fn new(snapshots: Vec<Snapshot>, interval_meta: impl Into<String>) -> Result<Self> {
        let (node_count, feature_dim) = snapshots
            .first()
            .map(|s| (s.node_count(), s.features.cols()))
            .unwrap_or((0, 1));
        if feature_dim == 0 {
            return Err(Error::Validation("feature dimension must be at least 1".into()));
        }
        for (t, s) in snapshots.iter().enumerate() {
            if s.timestep != t {
                return Err(Error::Validation(format!(
                    "snapshot {t} carries timestep {}",
                    s.timestep
                )));
            }
            if s.node_count() != node_count || s.features.rows() != node_count {
                return Err(Error::Validation(format!(
                    "snapshot {t} does not have {node_count} nodes"
                )));
            }
            if s.features.cols() != feature_dim {
                return Err(Error::Validation(format!(
                    "snapshot {t} has feature dimension {}, expected {feature_dim}",
                    s.features.cols()
                )));
            }
        }
        Ok(SnapshotSequence {
            node_count,
            feature_dim,
            snapshots,
            interval_meta: interval_meta.into(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, t: usize) -> &Snapshot {
        &self.snapshots[t]
    }

    pub fn edge_counts(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.adjacency.nnz()).collect()
    }

    /// Sliding windows over this sequence; see [`frames`].
    pub fn frames(&self, size: usize, stride: usize) -> Result<Vec<Frame>> {
        frames(self.len(), size, stride)
    }
}

/// A sliding window of `size` consecutive snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Frame {
    pub start: usize,
    pub size: usize,
    pub stride: usize,
}

impl Frame {
    pub fn snapshots(&self) -> Range<usize> {
        self.start..self.start + self.size
    }

    /// Splits the frame into contiguous partitions of `s_per` snapshots. When
    /// `s_per` does not divide the frame size the last partition is shorter.
    pub fn partitions(&self, s_per: usize) -> Result<Vec<Partition>> {
        if s_per == 0 {
            return Err(Error::Argument("snapshots per partition must be at least 1".into()));
        }
        Ok(self
            .snapshots()
            .step_by(s_per)
            .map(|start| Partition {
                frame: *self,
                start,
                len: s_per.min(self.start + self.size - start),
            })
            .collect())
    }
}

/// A contiguous run of snapshots inside a frame, processed together.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub frame: Frame,
    pub start: usize,
    pub len: usize,
}

impl Partition {
    pub fn snapshots(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn s_per(&self) -> usize {
        self.len
    }
}

/// Frames at starts `0, stride, 2·stride, …` while `start + size ≤ len`.
pub fn frames(len: usize, size: usize, stride: usize) -> Result<Vec<Frame>> {
    if size == 0 {
        return Err(Error::Argument("frame size must be at least 1".into()));
    }
    if stride == 0 {
        return Err(Error::Argument("frame stride must be at least 1".into()));
    }
    if size > len {
        return Err(Error::Argument(format!(
            "frame size {size} exceeds sequence length {len}"
        )));
    }
    Ok((0..=len - size)
        .step_by(stride)
        .map(|start| Frame {
            start,
            size,
            stride,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    /// Dense feature file shared by every snapshot.
    File(PathBuf),
    Constant(f32),
    /// Uniform `[0, 1)` features, drawn per snapshot from the seed.
    Random { seed: u64 },
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub node_count: usize,
    /// Width of one timestamp bucket.
    pub interval: u64,
    /// Number of consecutive snapshots an edge stays alive for.
    pub edge_life: usize,
    /// Sequence length; defaults to the last occupied bucket + 1. Edges that
    /// fall into buckets at or past this length are dropped.
    pub steps: Option<usize>,
    pub features: FeatureSource,
    /// Ignored for [`FeatureSource::File`], which carries its own dimension.
    pub feature_dim: usize,
}

impl IngestOptions {
    pub fn new(node_count: usize) -> Self {
        IngestOptions {
            node_count,
            interval: 1,
            edge_life: 1,
            steps: None,
            features: FeatureSource::Random { seed: 0 },
            feature_dim: SMALL_GRAPH_FEATURE_DIM,
        }
    }
}

struct RawEdge {
    src: u32,
    dst: u32,
    timestamp: u64,
    weight: f32,
}

/// Reads a whitespace-separated `src dst timestamp [weight]` edge list.
pub fn ingest_temporal_edges(path: impl AsRef<Path>, opts: &IngestOptions) -> Result<SnapshotSequence> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_temporal_edges(BufReader::new(file), opts)
}

pub fn read_temporal_edges<R: BufRead>(reader: R, opts: &IngestOptions) -> Result<SnapshotSequence> {
    if opts.edge_life == 0 {
        return Err(Error::Argument("edge_life must be at least 1".into()));
    }
    if opts.interval == 0 {
        return Err(Error::Argument("interval must be at least 1".into()));
    }
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('%') {
            continue;
        }
        raw.push(parse_edge_line(trimmed, lineno, opts.node_count)?);
    }

    let steps = opts.steps.unwrap_or_else(|| {
        raw.iter()
            .map(|e| (e.timestamp / opts.interval) as usize + 1)
            .max()
            .unwrap_or(0)
    });

    // latest (timestamp, line order) wins per snapshot
    let mut per_snapshot: Vec<HashMap<(u32, u32), (u64, usize, f32)>> = vec![HashMap::new(); steps];
    for (order, e) in raw.iter().enumerate() {
        let bucket = (e.timestamp / opts.interval) as usize;
        let end = (bucket + opts.edge_life).min(steps);
        for slot in per_snapshot.iter_mut().take(end).skip(bucket) {
            let entry = slot.entry((e.src, e.dst)).or_insert((e.timestamp, order, e.weight));
            if (e.timestamp, order) >= (entry.0, entry.1) {
                *entry = (e.timestamp, order, e.weight);
            }
        }
    }

    let shared_features = match &opts.features {
        FeatureSource::File(p) => {
            let m = read_feature_file(p)?;
            if m.rows() != opts.node_count {
                return Err(Error::Validation(format!(
                    "feature file has {} rows, expected {}",
                    m.rows(),
                    opts.node_count
                )));
            }
            Some(m)
        }
        _ => None,
    };

    let mut snapshots = Vec::with_capacity(steps);
    for (t, edges) in per_snapshot.into_iter().enumerate() {
        let edges: Vec<_> = edges.into_iter().map(|((s, d), (_, _, w))| (s, d, w)).collect();
        let adjacency = Csr::from_edges(opts.node_count, &edges)?;
        let features = match (&opts.features, &shared_features) {
            (_, Some(m)) => m.clone(),
            (FeatureSource::Constant(v), _) => Matrix::filled(opts.node_count, opts.feature_dim, *v),
            (FeatureSource::Random { seed }, _) => {
                Matrix::random(opts.node_count, opts.feature_dim, &mut feature_rng(*seed, t))
            }
            (FeatureSource::File(_), None) => unreachable!(),
        };
        snapshots.push(Snapshot {
            timestep: t,
            adjacency,
            features,
        });
    }
    SnapshotSequence::new(
        snapshots,
        format!("interval={} edge_life={}", opts.interval, opts.edge_life),
    )
}

fn parse_edge_line(line: &str, lineno: usize, node_count: usize) -> Result<RawEdge> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected `src dst timestamp [weight]`, got {} fields", fields.len()),
        });
    }
    let bad = |what: &str, v: &str| Error::Parse {
        line: lineno,
        msg: format!("invalid {what} `{v}`"),
    };
    let src: u32 = fields[0].parse().map_err(|_| bad("source", fields[0]))?;
    let dst: u32 = fields[1].parse().map_err(|_| bad("destination", fields[1]))?;
    let timestamp: u64 = fields[2].parse().map_err(|_| bad("timestamp", fields[2]))?;
    let weight: f32 = match fields.get(3) {
        Some(w) => w
            .parse()
            .ok()
            .filter(|w: &f32| w.is_finite())
            .ok_or_else(|| bad("weight", w))?,
        None => 1.0,
    };
    for v in [src, dst] {
        if v as usize >= node_count {
            return Err(Error::Bounds {
                what: "node id",
                index: v as usize,
                bound: node_count,
            });
        }
    }
    Ok(RawEdge {
        src,
        dst,
        timestamp,
        weight,
    })
}

fn feature_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (t as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateParams {
    pub node_count: usize,
    pub base_edges: usize,
    pub steps: usize,
    pub churn_rate: f64,
    pub seed: u64,
    pub feature_dim: usize,
}

/// Seeded evolving graph: snapshot 0 holds `base_edges` random edges and each
/// later snapshot swaps `⌊churn_rate · base_edges⌋` of them for edges absent
/// from its predecessor, so exactly `1 − ⌊churn·base⌋/base` of every
/// snapshot's edges survive into the next. All weights are 1.
pub fn generate_synthetic(p: &GenerateParams) -> Result<SnapshotSequence> {
    if !(0.0..=1.0).contains(&p.churn_rate) {
        return Err(Error::Argument(format!(
            "churn_rate {} outside [0, 1]",
            p.churn_rate
        )));
    }
    if p.feature_dim == 0 {
        return Err(Error::Argument("feature_dim must be at least 1".into()));
    }
    let n = p.node_count as u64;
    let space = n * n;
    if p.base_edges as u64 > space {
        return Err(Error::Capacity(format!(
            "{} edges do not fit a {}-node graph",
            p.base_edges, p.node_count
        )));
    }
    let churn = (p.churn_rate * p.base_edges as f64).floor() as usize;
    if p.steps > 1 && (p.base_edges + churn) as u64 > space {
        return Err(Error::Capacity(format!(
            "replacing {churn} of {} edges needs more than {space} vertex pairs",
            p.base_edges
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut edges: Vec<u64> = index::sample(&mut rng, space as usize, p.base_edges)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    let mut present: HashSet<u64> = edges.iter().copied().collect();

    let mut snapshots = Vec::with_capacity(p.steps);
    for t in 0..p.steps {
        if t > 0 && churn > 0 {
            let fresh = sample_absent(&mut rng, &present, space, churn);
            let mut removed: Vec<usize> = index::sample(&mut rng, edges.len(), churn).into_vec();
            removed.sort_unstable_by(|a, b| b.cmp(a));
            for pos in removed {
                let e = edges.swap_remove(pos);
                present.remove(&e);
            }
            for e in fresh {
                present.insert(e);
                edges.push(e);
            }
        }
        let list: Vec<(u32, u32, f32)> = edges
            .iter()
            .map(|&e| ((e / n) as u32, (e % n) as u32, 1.0))
            .collect();
        snapshots.push(Snapshot {
            timestep: t,
            adjacency: Csr::from_edges(p.node_count, &list)?,
            features: Matrix::random(p.node_count, p.feature_dim, &mut feature_rng(p.seed, t)),
        });
    }
    SnapshotSequence::new(
        snapshots,
        format!("synthetic churn={} seed={}", p.churn_rate, p.seed),
    )
}

/// Draws `k` distinct pair codes in `0..space` that are not in `present`.
fn sample_absent(rng: &mut ChaCha8Rng, present: &HashSet<u64>, space: u64, k: usize) -> Vec<u64> {
    let free = space - present.len() as u64;
    if free <= 4 * k as u64 {
        let candidates: Vec<u64> = (0..space).filter(|e| !present.contains(e)).collect();
        return index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
    }
    let mut picked = Vec::with_capacity(k);
    let mut seen = HashSet::with_capacity(k);
    while picked.len() < k {
        let e = rng.gen_range(0..space);
        if !present.contains(&e) && seen.insert(e) {
            picked.push(e);
        }
    }
    picked
}

/// Contents of `manifest.json` in a snapshot directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub node_count: usize,
    pub feature_dim: usize,
    pub length: usize,
    pub edge_counts: Vec<usize>,
    pub interval_meta: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice_cap: Option<usize>,
}

pub fn snapshot_file_name(t: usize) -> String {
    format!("snap_{t}.bin")
}

/// Writes `snap_<t>.bin` files plus `manifest.json` into `dir`.
///
/// Each snapshot file is little-endian: `node_count, F, nnz` as `u64`, the
/// row-major `f32` feature matrix, then the `u32` source array, the `u32`
/// destination array and the `f32` weight array.
pub fn write_snapshot_dir(seq: &SnapshotSequence, dir: &Path, slice_cap: Option<usize>) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in seq.snapshots() {
        let path = dir.join(snapshot_file_name(s.timestep));
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_snapshot(s, BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        node_count: seq.node_count(),
        feature_dim: seq.feature_dim(),
        length: seq.len(),
        edge_counts: seq.edge_counts(),
        interval_meta: seq.interval_meta.clone(),
        slice_cap,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_snapshot_dir(dir: &Path) -> Result<SnapshotSequence> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut snapshots = Vec::with_capacity(manifest.length);
    for t in 0..manifest.length {
        let path = dir.join(snapshot_file_name(t));
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let s = read_snapshot(BufReader::new(file), t)?;
        if s.adjacency.nnz() != manifest.edge_counts.get(t).copied().unwrap_or(usize::MAX) {
            return Err(Error::Validation(format!(
                "{}: edge count disagrees with manifest",
                path.display()
            )));
        }
        snapshots.push(s);
    }
    let seq = SnapshotSequence::new(snapshots, manifest.interval_meta)?;
    if seq.len() > 0 && (seq.node_count() != manifest.node_count || seq.feature_dim() != manifest.feature_dim) {
        return Err(Error::Validation("snapshot shapes disagree with manifest".into()));
    }
    Ok(seq)
}

fn write_snapshot<W: Write>(s: &Snapshot, mut w: W) -> std::io::Result<()> {
    let n = s.node_count() as u64;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&(s.features.cols() as u64).to_le_bytes())?;
    w.write_all(&(s.adjacency.nnz() as u64).to_le_bytes())?;
    for v in s.features.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    let edges: Vec<_> = s.adjacency.edges().collect();
    for (src, _, _) in &edges {
        w.write_all(&src.to_le_bytes())?;
    }
    for (_, dst, _) in &edges {
        w.write_all(&dst.to_le_bytes())?;
    }
    for (_, _, wt) in &edges {
        w.write_all(&wt.to_le_bytes())?;
    }
    w.flush()
}

fn read_snapshot<R: Read>(mut r: R, t: usize) -> Result<Snapshot> {
    let trunc = |e: std::io::Error| Error::Validation(format!("snapshot {t}: {e}"));
    let mut header = [0u8; 24];
    r.read_exact(&mut header).map_err(trunc)?;
    let word = |i: usize| u64::from_le_bytes(header[i * 8..i * 8 + 8].try_into().unwrap()) as usize;
    let (n, f, nnz) = (word(0), word(1), word(2));
    let mut buf = vec![0u8; 4 * (n * f + 3 * nnz)];
    r.read_exact(&mut buf).map_err(trunc)?;
    let words: Vec<u32> = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let features = Matrix::from_vec(n, f, words[..n * f].iter().map(|&b| f32::from_bits(b)).collect())?;
    let rest = &words[n * f..];
    let edges: Vec<_> = (0..nnz)
        .map(|i| (rest[i], rest[nnz + i], f32::from_bits(rest[2 * nnz + i])))
        .collect();
    Ok(Snapshot {
        timestep: t,
        adjacency: Csr::from_edges(n, &edges)?,
        features,
    })
}

/// Reads a dense feature file: `node_count, F` as little-endian `u64`, then
/// row-major `f32` values.
pub fn read_feature_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(Error::Validation(format!("{}: truncated header", path.display())));
    }
    let n = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    let f = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if f == 0 || bytes.len() != 16 + 4 * n * f {
        return Err(Error::Validation(format!(
            "{}: expected {n}x{f} features",
            path.display()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(n, f, data)
}

pub fn write_feature_file(path: &Path, m: &Matrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * m.as_slice().len());
    bytes.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Fraction of `a`'s edges (by endpoint pair) that also appear in `b`.
pub fn retained_fraction(a: &Csr, b: &Csr) -> f64 {
    if a.nnz() == 0 {
        return 1.0;
    }
    let shared = a.edges().filter(|&(s, d, _)| b.contains(s, d)).count();
    shared as f64 / a.nnz() as f64
}
