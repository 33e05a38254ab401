//! Inference: embed every detection with the trained head and group the
//! embeddings into `N_ID` clusters with k-means.

use std::cmp::Ordering;
use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{ProjectionHead, OUTPUT_DIM};
use crate::parallel::Exec;
use crate::real::Real;
use crate::seed;
use crate::store::EmbeddingDataset;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
const EMBED_CHUNK: usize = 256;

/// How the stored views of a detection are turned into cluster votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One pooled vector per detection.
    #[default]
    Mean,
    /// Cluster every view, then majority-vote per detection.
    PerView,
}

fn normalize_row(mut row: ndarray::ArrayViewMut1<f64>) {
    let norm = row.dot(&row).sqrt();
    if norm > 0.0 {
        row.mapv_inplace(|x| x / norm);
    }
}

/// Unit-normalized EVAL-mode projections of every stored view, shaped
/// `(detections * views, 64)` with views of one detection adjacent.
pub fn embed_views<T: Real>(dataset: &EmbeddingDataset, head: &ProjectionHead<T>, exec: Exec) -> Result<Array2<f64>> {
    if head.input_dim() != dataset.dim() {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, dataset has {}",
            head.input_dim(),
            dataset.dim()
        )));
    }
    let dim = dataset.dim();
    let views = dataset.views_per_detection();
    let records = dataset.records();
    let chunks: Vec<(usize, usize)> = (0..records.len())
        .step_by(EMBED_CHUNK)
        .map(|s| (s, (s + EMBED_CHUNK).min(records.len())))
        .collect();
    let parts = exec.map_slice(&chunks, |&(start, end)| -> Result<Array2<f64>> {
        let mut x = Array2::<T>::zeros(((end - start) * views, dim));
        for (r, rec) in records[start..end].iter().enumerate() {
            for v in 0..views {
                x.row_mut(r * views + v)
                    .iter_mut()
                    .zip(rec.view(v, dim))
                    .for_each(|(dst, &src)| *dst = T::of(src as f64));
            }
        }
        let mut out = head.infer(x.view())?.mapv(|y| y.to_f64().unwrap_or(f64::NAN));
        out.rows_mut().into_iter().for_each(normalize_row);
        Ok(out)
    });
    let mut all = Array2::<f64>::zeros((records.len() * views, OUTPUT_DIM));
    for (&(start, end), part) in chunks.iter().zip(parts) {
        all.slice_mut(s![start * views..end * views, ..]).assign(&part?);
    }
    Ok(all)
}

/// One vector per detection: normalized projections of its views, averaged
/// and re-normalized.
pub fn embed_all<T: Real>(dataset: &EmbeddingDataset, head: &ProjectionHead<T>, exec: Exec) -> Result<Array2<f64>> {
    let views = dataset.views_per_detection();
    let per_view = embed_views(dataset, head, exec)?;
    let mut pooled = Array2::<f64>::zeros((dataset.len(), OUTPUT_DIM));
    for (d, mut row) in pooled.rows_mut().into_iter().enumerate() {
        row.assign(&per_view.slice(s![d * views..(d + 1) * views, ..]).mean_axis(Axis(0)).unwrap());
        normalize_row(row);
    }
    Ok(pooled)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every Lloyd iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
    pub runs: Vec<RunTrace>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn inertia_of(points: ArrayView2<f64>, centers: &Array2<f64>, assign: &[usize]) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(assign)
        .map(|(p, &a)| sq_dist(p, centers.row(a)))
        .sum()
}

fn plus_plus_seeding(points: ArrayView2<f64>, k: usize, rng: &mut seed::Rng) -> Array2<f64> {
    let m = points.nrows();
    let mut centers = Array2::<f64>::zeros((k, points.ncols()));
    centers.row_mut(0).assign(&points.row(rng.random_range(0..m)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..m)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.row(c)));
        }
    }
    centers
}

fn update_centers(points: ArrayView2<f64>, assign: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut sums = Array2::<f64>::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &a) in points.rows().into_iter().zip(assign) {
        let mut row = sums.row_mut(a);
        row += &p;
        counts[a] += 1;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            row.mapv_inplace(|x| x / n as f64);
        }
    }
    (sums, counts)
}

/// Give each empty cluster the point farthest from its current center.
fn repair_empty(points: ArrayView2<f64>, centers: &Array2<f64>, assign: &mut [usize], k: usize) {
    let mut counts = vec![0usize; k];
    assign.iter().for_each(|&a| counts[a] += 1);
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let victim = (0..assign.len())
            .filter(|&i| counts[assign[i]] > 1)
            .map(|i| (i, sq_dist(points.row(i), centers.row(assign[i]))))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((i, _)) = victim {
            counts[assign[i]] -= 1;
            assign[i] = empty;
            counts[empty] = 1;
        }
    }
}

fn lloyd(points: ArrayView2<f64>, k: usize, rng: &mut seed::Rng) -> (Vec<usize>, Array2<f64>, RunTrace) {
    let mut centers = plus_plus_seeding(points, k, rng);
    let mut assign: Vec<usize> = points.rows().into_iter().map(|p| nearest(p, &centers).0).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        repair_empty(points, &centers, &mut assign, k);
        centers = update_centers(points, &assign, k).0;
        history.push(inertia_of(points, &centers, &assign));
        let next: Vec<usize> = points.rows().into_iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign || iterations >= MAX_ITERATIONS {
            break;
        }
        assign = next;
    }
    let inertia = inertia_of(points, &centers, &assign);
    (assign, centers, RunTrace { inertia, iterations, history })
}

fn lexicographic(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// k-means++ seeded Lloyd iterations, best of `restarts` by inertia.
///
/// Points are processed in lexicographic order of their coordinates and
/// clusters are numbered by first appearance in that order, so the result
/// does not depend on the input order of the points.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, restarts: usize, exec: Exec) -> Result<ClusterResult> {
    let m = points.nrows();
    if k == 0 || m < k {
        return Err(Error::Config(format!("k-means needs 1 <= k <= points, got k={k}, points={m}")));
    }
    if points.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("non-finite point".into()));
    }
    let restarts = restarts.max(1);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lexicographic(points.row(a), points.row(b)).then(a.cmp(&b)));
    let canonical = points.select(Axis(0), &order);

    let runs = exec.map_range(restarts, |r| lloyd(canonical.view(), k, &mut seed::substream(seed, r as u64)));
    let best = runs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .2.inertia.total_cmp(&b.1 .2.inertia).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .unwrap();
    let traces: Vec<RunTrace> = runs.iter().map(|r| r.2.clone()).collect();
    let (assign, centers, trace) = runs.into_iter().nth(best).unwrap();

    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for &a in &assign {
        if relabel[a] == usize::MAX {
            relabel[a] = next;
            next += 1;
        }
    }
    for slot in relabel.iter_mut().filter(|s| **s == usize::MAX) {
        *slot = next;
        next += 1;
    }
    let mut new_centers = Array2::<f64>::zeros(centers.dim());
    for (old, &new) in relabel.iter().enumerate() {
        new_centers.row_mut(new).assign(&centers.row(old));
    }
    let mut assignments = vec![0usize; m];
    for (pos, &orig) in order.iter().enumerate() {
        assignments[orig] = relabel[assign[pos]];
    }
    let inertia = inertia_of(points, &new_centers, &assignments);
    Ok(ClusterResult { assignments, centers: new_centers, inertia, iterations: trace.iterations, runs: traces })
}

/// Cluster the detections of `dataset` into `k` identities.
pub fn cluster_detections<T: Real>(
    dataset: &EmbeddingDataset,
    head: &ProjectionHead<T>,
    k: usize,
    seed: u64,
    restarts: usize,
    pooling: Pooling,
    exec: Exec,
) -> Result<ClusterResult> {
    match pooling {
        Pooling::Mean => kmeans(embed_all(dataset, head, exec)?.view(), k, seed, restarts, exec),
        Pooling::PerView => {
            let views = dataset.views_per_detection();
            let mut res = kmeans(embed_views(dataset, head, exec)?.view(), k, seed, restarts, exec)?;
            res.assignments = res
                .assignments
                .chunks(views)
                .map(|votes| {
                    let mut counts = vec![0usize; k];
                    votes.iter().for_each(|&c| counts[c] += 1);
                    // Ties go to the smallest cluster index.
                    (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap()
                })
                .collect();
            Ok(res)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub frame_id: u64,
    pub detection_idx: u32,
    pub cluster: usize,
}

pub fn assignment_rows(dataset: &EmbeddingDataset, assignments: &[usize]) -> Vec<AssignmentRow> {
    dataset
        .records()
        .iter()
        .zip(assignments)
        .map(|(r, &cluster)| AssignmentRow { frame_id: r.frame_id, detection_idx: r.detection_idx, cluster })
        .collect()
}

pub fn write_assignments_csv<W: Write>(rows: &[AssignmentRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignments_csv<R: Read>(source: R) -> Result<Vec<AssignmentRow>> {
    csv::Reader::from_reader(source)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("assignments csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    use crate::head::Mode;
    use crate::store::DetectionRecord;

    #[test]
    fn exact_fit_two_points() {
        let pts = array![[0.0], [10.0]];
        let r = kmeans(pts.view(), 2, 0, 3, Exec::Sequential).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_ne!(r.assignments[0], r.assignments[1]);
    }

    #[test]
    fn four_points_two_clusters() {
        let pts = array![[0.0], [1.0], [9.0], [10.0]];
        let r = kmeans(pts.view(), 2, 1, 10, Exec::Sequential).unwrap();
        assert_eq!(r.inertia, 1.0);
        let mut centers: Vec<f64> = r.centers.column(0).to_vec();
        centers.sort_by(f64::total_cmp);
        assert_eq!(centers, vec![0.5, 9.5]);
        assert_eq!(r.assignments[0], r.assignments[1]);
        assert_eq!(r.assignments[2], r.assignments[3]);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(kmeans(array![[0.0]].view(), 2, 0, 1, Exec::Sequential), Err(Error::Config(_))));
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // Duplicates force k-means++ to fall back to uniform picks that can coincide.
        let pts = array![[0.0], [0.0], [0.0], [5.0]];
        for seed in 0..20 {
            let r = kmeans(pts.view(), 3, seed, 1, Exec::Sequential).unwrap();
            let mut used: Vec<usize> = r.assignments.clone();
            used.sort();
            used.dedup();
            assert_eq!(used.len(), 3, "seed {seed}: {:?}", r.assignments);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut rng = seed::rng(3);
        let pts = Array2::from_shape_simple_fn((60, 3), || rng.random_range(-1.0..1.0));
        let perm: Vec<usize> = (0..60).rev().collect();
        let shuffled = pts.select(Axis(0), &perm);
        let a = kmeans(pts.view(), 4, 9, 3, Exec::Sequential).unwrap();
        let b = kmeans(shuffled.view(), 4, 9, 3, Exec::Parallel).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(b.assignments[i], a.assignments[p]);
        }
        assert_eq!(a.centers, b.centers);
    }

    fn dataset_with_identical_views() -> EmbeddingDataset {
        let records = (0..6)
            .map(|i| {
                let base = [i as f32, 1.0, -0.5 * i as f32];
                DetectionRecord {
                    frame_id: i / 2,
                    detection_idx: (i % 2) as u32,
                    gt_label: None,
                    views: base.iter().chain(base.iter()).chain(base.iter()).copied().collect(),
                }
            })
            .collect();
        EmbeddingDataset::new(3, 3, None, records).unwrap()
    }

    #[test]
    fn pooling_identical_views() {
        let ds = dataset_with_identical_views();
        let mut head = ProjectionHead::<f64>::init(3, 2).unwrap();
        head.set_mode(Mode::Eval);
        let pooled = embed_all(&ds, &head, Exec::Sequential).unwrap();
        let per_view = embed_views(&ds, &head, Exec::Parallel).unwrap();
        assert_eq!(pooled.nrows(), 6);
        for d in 0..6 {
            let n = pooled.row(d).dot(&pooled.row(d)).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for k in 0..OUTPUT_DIM {
                assert!((pooled[[d, k]] - per_view[[d * 3, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            AssignmentRow { frame_id: 3, detection_idx: 0, cluster: 1 },
            AssignmentRow { frame_id: 3, detection_idx: 1, cluster: 0 },
        ];
        let mut buf = Vec::new();
        write_assignments_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("frame_id,detection_idx,cluster\n3,0,1\n"));
        assert_eq!(read_assignments_csv(&buf[..]).unwrap(), rows);
    }
}
