use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate_parallel, AccessStats, CoalescentFeatures, ExecConfig, GcnWeights};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::overlap::OverlapDecomposition;

/// Weights for one update pass: one set shared by every snapshot, or one per
/// snapshot when the model evolves its weights along the timeline.
#[derive(Clone, Copy, Debug)]
pub enum UpdateWeights<'a> {
    Shared(&'a GcnWeights),
    PerSnapshot(&'a [GcnWeights]),
}

impl<'a> UpdateWeights<'a> {
    fn for_snapshot(&self, i: usize) -> &'a GcnWeights {
        match *self {
            UpdateWeights::Shared(w) => w,
            UpdateWeights::PerSnapshot(ws) => &ws[i],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Weight tiles in one weight matrix.
    pub tiles: u64,
    /// Tiles staged into shared memory over the whole pass.
    pub weight_tile_loads: u64,
    pub access: AccessStats,
}

/// Plain triple loop: `agg · w + b`, bias added after the dot product.
pub fn update_naive(agg: &Matrix, weights: &GcnWeights) -> Result<Matrix> {
    check_shape(agg, weights, 0)?;
    let (n, f_in) = agg.shape();
    let f_out = weights.f_out();
    let mut out = Matrix::zeros(n, f_out);
    for r in 0..n {
        for j in 0..f_out {
            let mut s = 0.0f32;
            for k in 0..f_in {
                s += agg.get(r, k) * weights.w.get(k, j);
            }
            out.set(r, j, s + weights.b[j]);
        }
    }
    Ok(out)
}

fn check_shape(agg: &Matrix, weights: &GcnWeights, i: usize) -> Result<()> {
    if agg.cols() != weights.f_in() {
        return Err(Error::Argument(format!(
            "snapshot {i}: aggregated width {} does not match weight rows {}",
            agg.cols(),
            weights.f_in()
        )));
    }
    Ok(())
}

struct Tile {
    k0: usize,
    kw: usize,
    j0: usize,
    jw: usize,
}

fn tiles(f_in: usize, f_out: usize, edge: usize) -> Vec<Tile> {
    let mut v = Vec::new();
    for k0 in (0..f_in).step_by(edge) {
        for j0 in (0..f_out).step_by(edge) {
            v.push(Tile {
                k0,
                kw: edge.min(f_in - k0),
                j0,
                jw: edge.min(f_out - j0),
            });
        }
    }
    v
}

fn stage(w: &Matrix, t: &Tile, buf: &mut Vec<f32>) {
    buf.clear();
    for k in t.k0..t.k0 + t.kw {
        buf.extend_from_slice(&w.row(k)[t.j0..t.j0 + t.jw]);
    }
}

// k runs in increasing order for each output element, matching the naive loop
fn apply(agg: &Matrix, t: &Tile, staged: &[f32], out: &mut Matrix) {
    for r in 0..agg.rows() {
        let a = agg.row(r);
        let o = &mut out.row_mut(r)[t.j0..t.j0 + t.jw];
        for dk in 0..t.kw {
            let av = a[t.k0 + dk];
            let wrow = &staged[dk * t.jw..(dk + 1) * t.jw];
            for (ov, wv) in o.iter_mut().zip(wrow) {
                *ov += av * wv;
            }
        }
    }
}

/// Tiled update GEMM over the aggregated matrices of one partition.
///
/// With `reuse_weights` the tile loop is outermost and every staged tile
/// serves all snapshots before the next one is loaded.
pub fn update_parallel(
    aggs: &[Matrix],
    weights: UpdateWeights<'_>,
    cfg: &ExecConfig,
    reuse_weights: bool,
) -> Result<(Vec<Matrix>, UpdateStats)> {
    cfg.validate()?;
    if let UpdateWeights::PerSnapshot(ws) = weights {
        if reuse_weights {
            return Err(Error::Argument("per-snapshot weights cannot share staged tiles".into()));
        }
        if ws.len() != aggs.len() {
            return Err(Error::Argument(format!(
                "{} weight sets for {} snapshots",
                ws.len(),
                aggs.len()
            )));
        }
    }
    for (i, a) in aggs.iter().enumerate() {
        check_shape(a, weights.for_snapshot(i), i)?;
        let w0 = weights.for_snapshot(0);
        let wi = weights.for_snapshot(i);
        if wi.f_out() != w0.f_out() || a.rows() != aggs[0].rows() {
            return Err(Error::Argument(format!("snapshot {i} has inconsistent shapes")));
        }
    }
    let Some(first) = aggs.first() else {
        return Ok((Vec::new(), UpdateStats::default()));
    };
    let n = first.rows();
    let f_in = first.cols();
    let f_out = weights.for_snapshot(0).f_out();
    let plan = tiles(f_in, f_out, cfg.tile_size);
    let mut outs: Vec<Matrix> = aggs.iter().map(|_| Matrix::zeros(n, f_out)).collect();
    let mut loads = 0u64;

    if reuse_weights {
        let w = weights.for_snapshot(0);
        let mut buf = Vec::with_capacity(cfg.tile_size * cfg.tile_size);
        for t in &plan {
            stage(&w.w, t, &mut buf);
            loads += 1;
            outs.par_iter_mut()
                .zip(aggs)
                .for_each(|(o, a)| apply(a, t, &buf, o));
        }
    } else {
        loads = outs
            .par_iter_mut()
            .zip(aggs)
            .enumerate()
            .map(|(i, (o, a))| {
                let w = weights.for_snapshot(i);
                let mut buf = Vec::with_capacity(cfg.tile_size * cfg.tile_size);
                for t in &plan {
                    stage(&w.w, t, &mut buf);
                    apply(a, t, &buf, o);
                }
                plan.len() as u64
            })
            .sum();
    }
    for (i, o) in outs.iter_mut().enumerate() {
        let b = &weights.for_snapshot(i).b;
        for r in 0..n {
            for (v, bj) in o.row_mut(r).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }

    let mut stats = count_update(n, f_in, f_out, aggs.len(), reuse_weights, cfg);
    stats.weight_tile_loads = loads;
    Ok((outs, stats))
}

/// Counts of one update pass over `s_per` snapshots of `n` rows without
/// doing the arithmetic.
pub fn count_update(n: usize, f_in: usize, f_out: usize, s_per: usize, reuse_weights: bool, cfg: &ExecConfig) -> UpdateStats {
    let plan = tiles(f_in, f_out, cfg.tile_size);
    let s = s_per as u64;
    let staged = if reuse_weights { 1 } else { s };
    let mut access = AccessStats {
        kernel_launches: u64::from(s_per > 0),
        ..AccessStats::default()
    };
    let warp = cfg.warp_width as u64;
    for t in &plan {
        let tile_bytes = 4 * t.kw * t.jw;
        access.global_requests += staged * cfg.scalar_requests_for(tile_bytes);
        access.global_transactions += staged * cfg.transactions_for(tile_bytes);
        let operand_bytes = 4 * n * t.kw;
        let issues = (n * t.jw).div_ceil(cfg.warp_width) as u64 * t.kw as u64;
        access.global_requests += s * cfg.scalar_requests_for(operand_bytes);
        access.global_transactions += s * cfg.transactions_for(operand_bytes);
        access.warp_issues += s * issues;
        access.lane_slots += s * issues * warp;
        access.active_lanes += s * (n * t.jw * t.kw) as u64;
    }
    UpdateStats {
        tiles: plan.len() as u64,
        weight_tile_loads: staged * plan.len() as u64,
        access,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerOutput {
    pub hidden: Vec<Matrix>,
    /// Aggregation results before the update, one per snapshot.
    pub aggregated: Vec<Matrix>,
    pub agg_stats: AccessStats,
    pub update_stats: UpdateStats,
}

/// Aggregation followed by the update for every snapshot of a partition.
pub fn gcn_layer(
    decomp: &OverlapDecomposition,
    feats: &CoalescentFeatures,
    weights: UpdateWeights<'_>,
    cfg: &ExecConfig,
    reuse_weights: bool,
) -> Result<GcnLayerOutput> {
    let (aggregated, agg_stats) = aggregate_parallel(decomp, feats, cfg)?;
    let (hidden, update_stats) = update_parallel(&aggregated, weights, cfg, reuse_weights)?;
    Ok(GcnLayerOutput {
        hidden,
        aggregated,
        agg_stats,
        update_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::aggregate_reference;
    use crate::overlap::decompose;
    use crate::sliced::Csr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle(a: &Matrix, w: &GcnWeights) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), w.f_out());
        for r in 0..a.rows() {
            for j in 0..w.f_out() {
                let s: f64 = (0..a.cols()).map(|k| a.get(r, k) as f64 * w.w.get(k, j) as f64).sum();
                out.set(r, j, (s + w.b[j] as f64) as f32);
            }
        }
        out
    }

    #[test]
    fn identity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Matrix::random(5, 8, &mut rng);
        let (out, _) = update_parallel(
            &[a.clone()],
            UpdateWeights::Shared(&GcnWeights::identity(8)),
            &ExecConfig::default(),
            true,
        )
        .unwrap();
        assert_eq!(out[0], a);
    }

    #[test]
    fn tile_load_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = GcnWeights::random(64, 128, &mut rng);
        let aggs: Vec<_> = (0..4).map(|_| Matrix::random(6, 64, &mut rng)).collect();
        let cfg = ExecConfig::default();
        let (on, st_on) = update_parallel(&aggs, UpdateWeights::Shared(&w), &cfg, true).unwrap();
        let (off, st_off) = update_parallel(&aggs, UpdateWeights::Shared(&w), &cfg, false).unwrap();
        assert_eq!(st_on.tiles, 8);
        assert_eq!(st_on.weight_tile_loads, 8);
        assert_eq!(st_off.weight_tile_loads, 32);
        for (a, b) in on.iter().zip(&off) {
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn random_against_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = GcnWeights::new(Matrix::random(64, 32, &mut rng), (0..32).map(|i| i as f32 * 0.1).collect()).unwrap();
        let a = Matrix::random(20, 64, &mut rng);
        let (out, _) = update_parallel(&[a.clone()], UpdateWeights::Shared(&w), &ExecConfig::default(), true).unwrap();
        assert!(out[0].max_rel_diff(&oracle(&a, &w), 1e-3) <= 1e-5);
        assert!(out[0].bit_eq(&update_naive(&a, &w).unwrap()));
    }

    #[test]
    fn per_snapshot_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ws: Vec<_> = (0..3).map(|_| GcnWeights::random(4, 5, &mut rng)).collect();
        let aggs: Vec<_> = (0..3).map(|_| Matrix::random(7, 4, &mut rng)).collect();
        let cfg = ExecConfig::default();
        let (out, st) = update_parallel(&aggs, UpdateWeights::PerSnapshot(&ws), &cfg, false).unwrap();
        assert_eq!(st.weight_tile_loads, 3);
        for i in 0..3 {
            assert!(out[i].bit_eq(&update_naive(&aggs[i], &ws[i]).unwrap()));
        }
        assert!(update_parallel(&aggs, UpdateWeights::PerSnapshot(&ws), &cfg, true).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let w = GcnWeights::identity(3);
        let a = Matrix::zeros(2, 4);
        assert!(matches!(
            update_parallel(&[a], UpdateWeights::Shared(&w), &ExecConfig::default(), true),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn layer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let snaps: Vec<Csr> = (0..3)
            .map(|t| {
                let mut e: Vec<(u32, u32, f32)> = (0..30u32).map(|i| (i % 10, (i * 3 + t) % 10, 1.0)).collect();
                e.sort_by_key(|x| (x.0, x.1));
                e.dedup_by_key(|x| (x.0, x.1));
                Csr::from_edges(10, &e).unwrap()
            })
            .collect();
        let xs: Vec<_> = (0..3).map(|_| Matrix::random(10, 16, &mut rng)).collect();
        let refs: Vec<&Csr> = snaps.iter().collect();
        let d = decompose(&refs, 32).unwrap();
        let f = CoalescentFeatures::new(&xs.iter().collect::<Vec<_>>()).unwrap();
        let w = GcnWeights::random(16, 32, &mut rng);
        let cfg = ExecConfig::default();
        let out = gcn_layer(&d, &f, UpdateWeights::Shared(&w), &cfg, true).unwrap();
        for i in 0..3 {
            let want = oracle(&aggregate_reference(&snaps[i], &xs[i]).unwrap(), &w);
            // signed weights cancel, so relative error uses a unit floor
            let d = out.hidden[i].max_rel_diff(&want, 1.0);
            assert!(d <= 1e-5, "diff {d}");
        }
        let zero = GcnWeights::new(Matrix::zeros(16, 2), vec![0.5, -1.0]).unwrap();
        let out = gcn_layer(&d, &f, UpdateWeights::Shared(&zero), &cfg, true).unwrap();
        assert!(out.hidden[1].as_slice().chunks(2).all(|r| r == [0.5, -1.0]));
    }
}
