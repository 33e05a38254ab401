//! Independent reference implementations shared by the integration and
//! acceptance targets.
#![allow(dead_code)]

use herdid::batching::{BatchSpec, Sampler};
use herdid::cluster;
use herdid::eval;
use herdid::head::ProjectionHead;
use herdid::objective::{build_mask_with, loss_and_grads, similarity, LossParams, MaskEntry, MaskMatrix};
use herdid::seed;
use herdid::simulate::{self, SimConfig};
use herdid::Exec;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn uniform_matrix(rng: &mut seed::Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..=1.0))
}

/// Best total over all injective row→column (or column→row) matchings.
pub fn brute_force_max(m: ArrayView2<f64>) -> f64 {
    if m.nrows() > m.ncols() {
        return brute_force_max(m.t());
    }
    fn go(m: ArrayView2<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == m.nrows() {
            *best = best.max(acc);
            return;
        }
        for c in 0..m.ncols() {
            if !used[c] {
                used[c] = true;
                go(m, row + 1, used, acc + m[[row, c]], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    go(m, 0, &mut vec![false; m.ncols()], 0.0, &mut best);
    best
}

/// Optimal pairs by exhaustive search, sorted by row, with their total
/// summed in row order.
pub fn brute_force_pairs(m: ArrayView2<f64>) -> (Vec<(usize, usize)>, f64) {
    let transposed = m.nrows() > m.ncols();
    let w = if transposed { m.t() } else { m };
    fn go(w: ArrayView2<f64>, row: usize, used: &mut [usize], acc: f64, best: &mut (f64, Vec<usize>)) {
        if row == w.nrows() {
            if acc > best.0 {
                *best = (acc, used[..row].to_vec());
            }
            return;
        }
        for c in 0..w.ncols() {
            if !used[..row].contains(&c) {
                used[row] = c;
                go(w, row + 1, used, acc + w[[row, c]], best);
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    go(w, 0, &mut vec![0; w.nrows()], 0.0, &mut best);
    let mut pairs: Vec<(usize, usize)> =
        best.1.iter().enumerate().map(|(r, &c)| if transposed { (c, r) } else { (r, c) }).collect();
    pairs.sort();
    let total = pairs.iter().map(|&(r, c)| m[[r, c]]).sum();
    (pairs, total)
}

/// Exhaustive accuracy over every cluster→identity permutation.
pub fn brute_force_accuracy(assignments: &[usize], labels: &[usize], n: usize) -> f64 {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = 0usize;
    fn heap(k: usize, perm: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if k <= 1 {
            visit(perm);
            return;
        }
        for i in 0..k {
            heap(k - 1, perm, visit);
            let j = if k.is_multiple_of(2) { i } else { 0 };
            perm.swap(j, k - 1);
        }
    }
    heap(n, &mut perm, &mut |p| {
        let hits = assignments.iter().zip(labels).filter(|(&c, &g)| p[c] == g).count();
        best = best.max(hits);
    });
    best as f64 / assignments.len() as f64
}

/// Shortfall of the analytic gradients below finite differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradError {
    pub head: f64,
    pub sim: f64,
    pub t: f64,
    pub b: f64,
}

impl GradError {
    pub fn max(self, other: Self) -> Self {
        Self {
            head: self.head.max(other.head),
            sim: self.sim.max(other.sim),
            t: self.t.max(other.t),
            b: self.b.max(other.b),
        }
    }
}

const FD_STEP: f64 = 1e-6;
/// Norm below which a gradient counts as zero and is compared absolutely.
const ZERO_FLOOR: f64 = 1e-7;

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < ZERO_FLOOR {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Random frame partition of `half` detections into at least two frames.
pub fn random_frames(rng: &mut seed::Rng, half: usize) -> Vec<usize> {
    let frames = rng.random_range(2..=half.max(2));
    let mut sizes = vec![1usize; frames];
    for _ in frames..half {
        let f = rng.random_range(0..frames);
        sizes[f] += 1;
    }
    sizes
}

fn objective_loss(head: &mut ProjectionHead<f64>, x: ArrayView2<f64>, mask: &MaskMatrix, params: &LossParams) -> f64 {
    let out = head.forward(x).unwrap();
    let sim = similarity(out.view()).unwrap();
    loss_and_grads(sim.values.view(), mask, params).unwrap().loss
}

/// Central-difference check of every gradient for one head and batch. The
/// mask is computed once and held fixed. `samples` entries per head tensor
/// are perturbed (all entries for small tensors).
pub fn gradient_check(dim: usize, rows: usize, params: LossParams, samples: usize, seed_value: u64) -> GradError {
    let mut rng = seed::rng(seed_value);
    let frames = random_frames(&mut rng, rows / 2);
    let x = uniform_matrix(&mut rng, rows, dim);
    let mut head = ProjectionHead::<f64>::init(dim, seed_value ^ 0x5eed).unwrap();

    let out = head.forward(x.view()).unwrap();
    let sim = similarity(out.view()).unwrap();
    let mask = build_mask_with(sim.values.view(), &frames, Exec::Sequential).unwrap();
    let lo = loss_and_grads(sim.values.view(), &mask, &params).unwrap();
    let grads = head.backward(sim.backward(lo.dsim.view()).view()).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();

    let mut worst = GradError::default();
    for (tensor, g) in analytic.iter().enumerate() {
        let mut idx: Vec<usize> = (0..g.len()).collect();
        if g.len() > samples {
            idx.shuffle(&mut rng);
            idx.truncate(samples);
        }
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &i in &idx {
            let orig = head.params()[tensor][i];
            head.params_mut()[tensor][i] = orig + FD_STEP;
            let up = objective_loss(&mut head, x.view(), &mask, &params);
            head.params_mut()[tensor][i] = orig - FD_STEP;
            let down = objective_loss(&mut head, x.view(), &mask, &params);
            head.params_mut()[tensor][i] = orig;
            a.push(g[i]);
            n.push((up - down) / (2.0 * FD_STEP));
        }
        worst.head = worst.head.max(relative(&a, &n));
    }

    let s = sim.values.clone();
    let mut numeric = Vec::with_capacity(s.len());
    for ((i, j), _) in s.indexed_iter() {
        let mut p = s.clone();
        p[[i, j]] += FD_STEP;
        let up = loss_and_grads(p.view(), &mask, &params).unwrap().loss;
        p[[i, j]] -= 2.0 * FD_STEP;
        let down = loss_and_grads(p.view(), &mask, &params).unwrap().loss;
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    worst.sim = relative(&lo.dsim.iter().copied().collect::<Vec<_>>(), &numeric);

    let scalar = |shift_t: f64, shift_b: f64| {
        let mut q = params;
        q.t += shift_t;
        q.b += shift_b;
        loss_and_grads(s.view(), &mask, &q).unwrap().loss
    };
    if params.learns_t() {
        let n = (scalar(FD_STEP, 0.0) - scalar(-FD_STEP, 0.0)) / (2.0 * FD_STEP);
        worst.t = relative(&[lo.dt], &[n]);
    }
    if params.learns_b() {
        let n = (scalar(0.0, FD_STEP) - scalar(0.0, -FD_STEP)) / (2.0 * FD_STEP);
        worst.b = relative(&[lo.db], &[n]);
    }
    worst
}

/// Every structural property of a mask built for `frame_sizes`; returns the
/// first violation.
pub fn check_mask(mask: &MaskMatrix, frame_sizes: &[usize]) -> Result<(), String> {
    let e = &mask.entries;
    let half: usize = frame_sizes.iter().sum();
    let n = 2 * half;
    if e.dim() != (n, n) {
        return Err(format!("mask is {:?}, expected {n}x{n}", e.dim()));
    }
    for i in 0..n {
        for j in 0..n {
            if e[[i, j]] != e[[j, i]] {
                return Err(format!("asymmetric at ({i},{j})"));
            }
            if (e[[i, j]] == MaskEntry::Discard) != (i == j) {
                return Err(format!("discard misplaced at ({i},{j})"));
            }
        }
    }
    for i in 0..half {
        if e[[i, i + half]] != MaskEntry::Positive {
            return Err(format!("same-crop pair ({i},{}) not positive", i + half));
        }
    }
    // Block ranges over both halves and every frame.
    let mut spans = Vec::new();
    let mut off = 0;
    for &s in frame_sizes {
        spans.push((off, s));
        spans.push((off + half, s));
        off += s;
    }
    for &(r0, rn) in &spans {
        for &(c0, cn) in &spans {
            for r in r0..r0 + rn {
                let hits = (c0..c0 + cn).filter(|&c| e[[r, c]] == MaskEntry::Positive).count();
                if hits > 1 {
                    return Err(format!("row {r} has {hits} positives in block at column {c0}"));
                }
            }
            for c in c0..c0 + cn {
                let hits = (r0..r0 + rn).filter(|&r| e[[r, c]] == MaskEntry::Positive).count();
                if hits > 1 {
                    return Err(format!("column {c} has {hits} positives in block at row {r0}"));
                }
            }
        }
    }
    let mut expected = 2 * half;
    for a in 0..frame_sizes.len() {
        for b in a + 1..frame_sizes.len() {
            expected += 2 * 4 * frame_sizes[a].min(frame_sizes[b]);
        }
    }
    if mask.positives() != expected {
        return Err(format!("{} positives, closed form gives {expected}", mask.positives()));
    }
    Ok(())
}

/// One random simulated batch and the mask built on its raw-feature
/// similarities.
pub fn simulated_mask_trial(rng: &mut seed::Rng) -> Result<(), String> {
    let batch = loop {
        let config = SimConfig {
            n_identities: rng.random_range(2..=10),
            n_frames: 12,
            embedding_dim: 8,
            views_per_detection: rng.random_range(2..=4),
            visibility_prob: rng.random_range(0.3..=1.0),
            seed: rng.random(),
            ..SimConfig::default()
        };
        let data = simulate::generate_with(&config, Exec::Sequential).map_err(|e| e.to_string())?;
        let spec = BatchSpec { frames_per_batch: rng.random_range(2..=4) };
        // Redraw when too few frames have detections.
        if let Ok(mut sampler) = Sampler::new(data.unlabeled(), spec, rng.random()) {
            break sampler.next_batch();
        }
    };
    let features = batch.features.mapv(f64::from);
    let sim = similarity(features.view()).map_err(|e| e.to_string())?;
    let mask = build_mask_with(sim.values.view(), &batch.frame_sizes, Exec::Sequential).map_err(|e| e.to_string())?;
    check_mask(&mask, &batch.frame_sizes)
}

/// Planted identities shared by every frame; same-identity similarities
/// dominate. Returns whether the mask's positives are exactly the
/// same-identity pairs.
pub fn planted_trial(rng: &mut seed::Rng) -> bool {
    let ids = rng.random_range(2..=8);
    let frames = rng.random_range(2..=4);
    let mut identity = Vec::new();
    for _ in 0..frames {
        let mut perm: Vec<usize> = (0..ids).collect();
        perm.shuffle(rng);
        identity.extend(perm);
    }
    let half = identity.len();
    let who = |r: usize| identity[r % half];
    let n = 2 * half;
    let mut sim = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        sim[[i, i]] = 1.0;
        for j in i + 1..n {
            let v = if who(i) == who(j) { rng.random_range(0.7..0.9) } else { rng.random_range(-0.6..0.6) };
            sim[[i, j]] = v;
            sim[[j, i]] = v;
        }
    }
    let mask = build_mask_with(sim.view(), &vec![ids; frames], Exec::Sequential).unwrap();
    (0..n).all(|i| {
        (0..n).all(|j| {
            let planted = i != j && who(i) == who(j);
            (mask.entries[[i, j]] == MaskEntry::Positive) == planted
        })
    })
}

/// Random points for k-means trials.
pub fn random_points(rng: &mut seed::Rng, m: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, d), || rng.random_range(-5.0..5.0))
}

/// Whether every restart's inertia history is non-increasing.
pub fn histories_monotone(result: &cluster::ClusterResult) -> bool {
    result.runs.iter().all(|r| r.history.windows(2).all(|w| w[1] <= w[0]))
}

/// Random assignment/label vectors with `n` identities and the Hungarian
/// and exhaustive accuracies.
pub fn eval_trial(rng: &mut seed::Rng) -> (f64, f64) {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=60);
    let assignments: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let gt: Vec<Option<u32>> = labels.iter().map(|&g| Some(g as u32)).collect();
    let report = eval::evaluate(&assignments, &gt, n).unwrap();
    (report.accuracy, brute_force_accuracy(&assignments, &labels, n))
}
