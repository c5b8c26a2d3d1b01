//! Clustering-based interpretability over tile features.
//!
//! K-means (squared Euclidean, k-means++ seeding) fits on training-corpus
//! features; a per-cluster cosine-similarity ranking against each centroid
//! scores tiles, which is evaluated against tile-level lesion ground truth
//! and rendered as per-slide heatmaps and top-representative montages.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalharness::auc;
use crate::features::FeatureMatrix;
use crate::rng::Rng;
use crate::slide::png_io;
use crate::slide::TileImage;

#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    /// k x dim, row-major.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Final assignment counts; sums to the sample count.
    pub counts: Vec<usize>,
    /// Post-assignment inertia per Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

/// Flattened tile address within a corpus of feature matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileKey {
    pub slide: usize,
    pub tile: usize,
}

/// Descending cosine-similarity ranking of tiles against one centroid.
#[derive(Debug, Clone)]
pub struct TileRanking {
    pub cluster: usize,
    pub entries: Vec<(TileKey, f32)>,
    /// Zero-norm feature rows, ranked last with similarity 0.
    pub zero_rows: usize,
}

fn sq_dist(a: &[f64], b: &[f32]) -> f64 {
    let mut acc = 0.0;
    for (x, &y) in a.iter().zip(b) {
        let d = x - y as f64;
        acc += d * d;
    }
    acc
}

/// Lloyd iterations from k-means++ seeding until the largest centroid shift
/// drops below 1e-4 or 300 iterations pass.
pub fn kmeans(rows: &[&[f32]], dim: usize, k: usize, seed: u64) -> Result<ClusterModel> {
    let m = rows.len();
    if m < k {
        return Err(Error::Data(format!("{m} samples cannot seed {k} clusters")));
    }
    if k == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::shape(format!("k {k} or row width mismatch (dim {dim})")));
    }
    let mut rng = Rng::stream(seed, "kmeans.init");

    // k-means++ seeding
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.below(m);
    centroids.extend(rows[first].iter().map(|&v| v as f64));
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(&centroids[0..dim], r)).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // all remaining points coincide with some centroid
            rng.below(m)
        } else {
            let mut target = rng.uniform_f64() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.extend(rows[pick].iter().map(|&v| v as f64));
        let base = c * dim;
        for (i, r) in rows.iter().enumerate() {
            let nd = sq_dist(&centroids[base..base + dim], r);
            if nd < d2[i] {
                d2[i] = nd;
            }
        }
    }

    let mut assignment = vec![0usize; m];
    let mut inertia_history = Vec::new();
    let mut inertia = f64::INFINITY;
    for _iter in 0..300 {
        // assignment step (parallel over points; ties pick the lower id)
        let assigned: Vec<(usize, f64)> = rows
            .par_iter()
            .map(|r| {
                let mut best = (0usize, sq_dist(&centroids[0..dim], r));
                for c in 1..k {
                    let d = sq_dist(&centroids[c * dim..(c + 1) * dim], r);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best
            })
            .collect();
        inertia = assigned.iter().map(|&(_, d)| d).sum();
        inertia_history.push(inertia);
        for (i, &(c, _)) in assigned.iter().enumerate() {
            assignment[i] = c;
        }

        // means update
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            let c = assignment[i];
            counts[c] += 1;
            for (j, &v) in r.iter().enumerate() {
                sums[c * dim + j] += v as f64;
            }
        }
        // empty clusters re-seed at the point farthest from its centroid
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let (far_idx, _) = assigned
                .iter()
                .enumerate()
                .max_by(|(ia, (_, da)), (ib, (_, db))| {
                    da.partial_cmp(db).unwrap().then(ib.cmp(ia))
                })
                .map(|(i, &(_, d))| (i, d))
                .unwrap();
            let old = assignment[far_idx];
            counts[old] -= 1;
            for (j, &v) in rows[far_idx].iter().enumerate() {
                sums[old * dim + j] -= v as f64;
            }
            counts[c] = 1;
            for (j, &v) in rows[far_idx].iter().enumerate() {
                sums[c * dim + j] = v as f64;
            }
            assignment[far_idx] = c;
        }

        let mut max_shift2 = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut shift2 = 0.0;
            for j in 0..dim {
                let new = sums[c * dim + j] * inv;
                let d = new - centroids[c * dim + j];
                shift2 += d * d;
                centroids[c * dim + j] = new;
            }
            max_shift2 = max_shift2.max(shift2);
        }
        if max_shift2.sqrt() < 1e-4 {
            break;
        }
    }

    let mut counts = vec![0usize; k];
    for &c in &assignment {
        counts[c] += 1;
    }
    Ok(ClusterModel { k, dim, centroids, inertia, counts, inertia_history })
}

impl ClusterModel {
    /// Nearest-centroid assignment (squared Euclidean, ties to lower id).
    pub fn assign(&self, rows: &[&[f32]]) -> Vec<usize> {
        rows.par_iter()
            .map(|r| {
                let mut best = (0usize, sq_dist(&self.centroids[0..self.dim], r));
                for c in 1..self.k {
                    let d = sq_dist(&self.centroids[c * self.dim..(c + 1) * self.dim], r);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect()
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

/// Flatten a corpus into feature rows plus tile keys.
pub fn corpus_rows(features: &[FeatureMatrix]) -> (Vec<&[f32]>, Vec<TileKey>) {
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for (s, fm) in features.iter().enumerate() {
        for t in 0..fm.tile_count() {
            rows.push(fm.row(t));
            keys.push(TileKey { slide: s, tile: t });
        }
    }
    (rows, keys)
}

fn cosine(row: &[f32], centroid: &[f64]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&a, &b) in row.iter().zip(centroid) {
        dot += a as f64 * b;
        na += a as f64 * a as f64;
        nb += b * b;
    }
    if na == 0.0 || nb == 0.0 {
        f64::NAN
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Rank all tiles by cosine similarity to one centroid, descending; stable
/// for equal similarities. Zero-norm rows rank last with similarity 0.
pub fn rank_by_cosine(
    rows: &[&[f32]],
    keys: &[TileKey],
    centroid: &[f64],
    cluster: usize,
) -> Result<TileRanking> {
    if centroid.iter().all(|&v| v == 0.0) {
        return Err(Error::Numeric(format!("centroid {cluster} has zero norm")));
    }
    let mut zero_rows = 0usize;
    let sims: Vec<f32> = rows
        .iter()
        .map(|r| {
            let s = cosine(r, centroid);
            if s.is_nan() {
                zero_rows += 1;
                0.0
            } else {
                s as f32
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap().then(a.cmp(&b)));
    let entries = order.into_iter().map(|i| (keys[i], sims[i])).collect();
    Ok(TileRanking { cluster, entries, zero_rows })
}

/// AUC of a ranking's similarities against per-tile binary truth, where
/// `truth(key)` says whether the tile is lesional.
pub fn cluster_detection_auc(
    ranking: &TileRanking,
    truth: impl Fn(TileKey) -> bool,
) -> Result<f64> {
    let scores: Vec<f64> = ranking.entries.iter().map(|&(_, s)| s as f64).collect();
    let labels: Vec<bool> = ranking.entries.iter().map(|&(k, _)| truth(k)).collect();
    auc(&scores, &labels)
}

/// Evaluate every cluster's detection AUC; the winner is the argmax with
/// ties resolved toward the lower cluster id.
pub fn best_cluster(
    model: &ClusterModel,
    rows: &[&[f32]],
    keys: &[TileKey],
    truth: impl Fn(TileKey) -> bool + Copy,
) -> Result<(usize, Vec<f64>)> {
    let mut aucs = Vec::with_capacity(model.k);
    for c in 0..model.k {
        let ranking = rank_by_cosine(rows, keys, model.centroid(c), c)?;
        aucs.push(cluster_detection_auc(&ranking, truth)?);
    }
    let mut best = 0usize;
    for c in 1..model.k {
        if aucs[c] > aucs[best] {
            best = c;
        }
    }
    Ok((best, aucs))
}

/// Per-slide score grid aligned with the slide's tile grid.
#[derive(Debug, Clone)]
pub struct HeatmapGrid {
    pub rows: usize,
    pub cols: usize,
    /// Row-major; None where no tile was retained.
    pub values: Vec<Option<f32>>,
}

impl HeatmapGrid {
    /// Populate from (grid row, grid col, score) triples.
    pub fn new(rows: usize, cols: usize, scores: &[(usize, usize, f32)]) -> Result<HeatmapGrid> {
        let mut values = vec![None; rows * cols];
        for &(r, c, s) in scores {
            if r >= rows || c >= cols {
                return Err(Error::Data(format!("tile ({r}, {c}) outside a {rows}x{cols} grid")));
            }
            if values[r * cols + c].is_some() {
                return Err(Error::Data(format!("duplicate heatmap cell ({r}, {c})")));
            }
            values[r * cols + c] = Some(s);
        }
        Ok(HeatmapGrid { rows, cols, values })
    }

    /// Mean score over cells selected by `mask_fn` (grid row, col).
    pub fn mean_where(&self, select: impl Fn(usize, usize) -> bool) -> Option<f32> {
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for r in 0..self.rows {
            for c in 0..self.cols {
                if let Some(v) = self.values[r * self.cols + c] {
                    if select(r, c) {
                        acc += v as f64;
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            None
        } else {
            Some((acc / n as f64) as f32)
        }
    }

    /// Nearest-neighbor upscaled grayscale image; scores map linearly from
    /// [min, max] onto intensity, missing tiles render black.
    pub fn to_gray(&self, upscale: usize) -> (usize, usize, Vec<u8>) {
        let present: Vec<f32> = self.values.iter().flatten().copied().collect();
        let (lo, hi) = present
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let (w, h) = (self.cols * upscale, self.rows * upscale);
        let mut img = vec![0u8; w * h];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let px = match self.values[r * self.cols + c] {
                    None => 0u8,
                    Some(v) => (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8,
                };
                for dy in 0..upscale {
                    for dx in 0..upscale {
                        img[(r * upscale + dy) * w + c * upscale + dx] = px;
                    }
                }
            }
        }
        (w, h, img)
    }

    pub fn save_png(&self, path: &Path, upscale: usize) -> Result<()> {
        let (w, h, img) = self.to_gray(upscale);
        png_io::write_gray(path, w, h, &img)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|c| match self.values[r * self.cols + c] {
                    None => String::new(),
                    Some(v) => format!("{v:.6}"),
                })
                .collect();
            writeln!(f, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Render the heatmap of `scores` (one per retained tile, ranking order
/// irrelevant) for a slide whose grid had `rows x cols` cells.
pub fn render_heatmap(
    rows: usize,
    cols: usize,
    tiles: &[(usize, usize)],
    scores: &[f32],
) -> Result<HeatmapGrid> {
    if tiles.len() != scores.len() {
        return Err(Error::shape(format!("{} tiles but {} scores", tiles.len(), scores.len())));
    }
    let triples: Vec<(usize, usize, f32)> =
        tiles.iter().zip(scores).map(|(&(r, c), &s)| (r, c, s)).collect();
    HeatmapGrid::new(rows, cols, &triples)
}

/// The n members of each cluster most similar to their own centroid.
pub fn top_representatives(
    model: &ClusterModel,
    rows: &[&[f32]],
    keys: &[TileKey],
    n: usize,
) -> Vec<Vec<(TileKey, f32)>> {
    let assignment = model.assign(rows);
    (0..model.k)
        .map(|c| {
            let centroid = model.centroid(c);
            let mut members: Vec<(usize, f32)> = assignment
                .iter()
                .enumerate()
                .filter(|&(_, &a)| a == c)
                .map(|(i, _)| {
                    let s = cosine(rows[i], centroid);
                    (i, if s.is_nan() { 0.0 } else { s as f32 })
                })
                .collect();
            members.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            members.truncate(n);
            members.into_iter().map(|(i, s)| (keys[i], s)).collect()
        })
        .collect()
}

/// Horizontal strip montage of tiles (used for per-cluster representatives).
pub fn write_montage(path: &Path, tiles: &[TileImage]) -> Result<()> {
    if tiles.is_empty() {
        return Err(Error::Data("montage needs at least one tile".into()));
    }
    let ts = tiles[0].size;
    if tiles.iter().any(|t| t.size != ts) {
        return Err(Error::shape("montage tiles must share one size"));
    }
    let (w, h) = (ts * tiles.len(), ts);
    let mut img = vec![255u8; w * h * 3];
    for (i, tile) in tiles.iter().enumerate() {
        for y in 0..ts {
            let dst = (y * w + i * ts) * 3;
            let src = y * ts * 3;
            img[dst..dst + ts * 3].copy_from_slice(&tile.pixels[src..src + ts * 3]);
        }
    }
    png_io::write_rgb(path, w, h, &img)
}

/// Cluster report rows: `cluster,auc,count`.
pub fn write_cluster_report(path: &Path, aucs: &[f64], counts: &[usize]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "cluster,auc,count")?;
    for (c, (a, n)) in aucs.iter().zip(counts).enumerate() {
        writeln!(f, "{c},{a:.6},{n}")?;
    }
    Ok(())
}
