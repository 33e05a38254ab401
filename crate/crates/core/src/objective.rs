//! Similarity matrix, Hungarian pseudo-label mask, and contrastive losses
//! with analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assign;
use crate::batching::TrainingBatch;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::real::Real;

pub const T_MIN: f64 = 0.0;
pub const T_MAX: f64 = 100.0;

/// Pairwise cosine similarities of one batch.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<T> {
    pub values: Array2<T>,
    normalized: Array2<T>,
    norms: Array1<T>,
}

impl<T: Real> SimilarityMatrix<T> {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn normalized(&self) -> &Array2<T> {
        &self.normalized
    }

    /// Back-propagate `dLoss/dSim` to the un-normalized feature rows.
    ///
    /// Entries of `dsim` are treated as independent, so `S = Ẑ Ẑᵀ` gives
    /// `dẐ = (G + Gᵀ) Ẑ` and row normalization contributes the projection
    /// `(dẑ − ẑ (ẑ·dẑ)) / ‖z‖`.
    pub fn backward(&self, dsim: ArrayView2<T>) -> Array2<T> {
        let sym = &dsim + &dsim.t();
        let mut dz = sym.dot(&self.normalized);
        for ((mut g, zhat), &norm) in dz.rows_mut().into_iter().zip(self.normalized.rows()).zip(&self.norms) {
            let proj = g.dot(&zhat);
            g.zip_mut_with(&zhat, |gi, &zi| *gi = (*gi - zi * proj) / norm);
        }
        dz
    }
}

pub fn similarity<T: Real>(features: ArrayView2<T>) -> Result<SimilarityMatrix<T>> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Dimension(format!("similarity needs at least 2 rows, got {n}")));
    }
    let norms: Array1<T> = features.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&x| !x.is_finite() || x <= T::zero()) {
        return Err(Error::DegenerateFeature(i));
    }
    let normalized = &features / &norms.view().insert_axis(Axis(1));
    let values = normalized.dot(&normalized.t());
    Ok(SimilarityMatrix { values, normalized, norms })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskEntry {
    Discard,
    Positive,
    Negative,
}

impl MaskEntry {
    pub fn sign(self) -> f64 {
        match self {
            MaskEntry::Positive => 1.0,
            MaskEntry::Negative => -1.0,
            MaskEntry::Discard => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub entries: Array2<MaskEntry>,
}

impl MaskMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|&&e| e == MaskEntry::Positive).count()
    }
}

/// One cross-frame block: rows of frame `a` in half `row_half`, columns of
/// frame `b` in half `col_half`.
#[derive(Debug, Clone, Copy)]
struct Block {
    rows: (usize, usize),
    cols: (usize, usize),
}

pub fn build_mask<T: Real>(sim: &SimilarityMatrix<T>, batch: &TrainingBatch) -> Result<MaskMatrix> {
    build_mask_with(sim.values.view(), &batch.frame_sizes, Exec::default())
}

/// Mask for a batch laid out as two halves of frame-contiguous rows with the
/// given per-frame sizes.
pub fn build_mask_with<T: Real>(sim: ArrayView2<T>, frame_sizes: &[usize], exec: Exec) -> Result<MaskMatrix> {
    let n = sim.nrows();
    let half: usize = frame_sizes.iter().sum();
    if sim.ncols() != n || n != 2 * half {
        return Err(Error::Dimension(format!(
            "similarity is {}x{}, layout implies {}",
            n,
            sim.ncols(),
            2 * half
        )));
    }
    let offsets: Vec<usize> = frame_sizes
        .iter()
        .scan(0, |acc, &s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();

    let mut entries = Array2::from_elem((n, n), MaskEntry::Negative);
    // Same-frame structure: self-similarity discarded, the other view of
    // the same crop is a positive.
    for i in 0..n {
        entries[[i, i]] = MaskEntry::Discard;
    }
    for i in 0..half {
        entries[[i, i + half]] = MaskEntry::Positive;
        entries[[i + half, i]] = MaskEntry::Positive;
    }

    let mut blocks = Vec::new();
    for a in 0..frame_sizes.len() {
        for b in a + 1..frame_sizes.len() {
            if frame_sizes[a] == 0 || frame_sizes[b] == 0 {
                continue;
            }
            for row_half in 0..2 {
                for col_half in 0..2 {
                    blocks.push(Block {
                        rows: (row_half * half + offsets[a], frame_sizes[a]),
                        cols: (col_half * half + offsets[b], frame_sizes[b]),
                    });
                }
            }
        }
    }
    let solved = exec.map_slice(&blocks, |blk| {
        let sub = sim
            .slice(ndarray::s![blk.rows.0..blk.rows.0 + blk.rows.1, blk.cols.0..blk.cols.0 + blk.cols.1])
            .mapv(|x| x.to_f64().unwrap_or(f64::NAN));
        assign::solve_max(sub.view())
    });
    for (blk, assignment) in blocks.iter().zip(solved) {
        for (r, c) in assignment?.pairs {
            let (i, j) = (blk.rows.0 + r, blk.cols.0 + c);
            entries[[i, j]] = MaskEntry::Positive;
            entries[[j, i]] = MaskEntry::Positive;
        }
    }
    Ok(MaskMatrix { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    SupconFixed,
    SupconLearnable,
    Bce,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SupconFixed => "supcon",
            LossVariant::SupconLearnable => "supcon-learnable",
            LossVariant::Bce => "bce",
        }
    }
}

/// Loss hyper-parameters and learnable scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub variant: LossVariant,
    /// Fixed temperature (SupCon, fixed variant).
    pub tau: f64,
    /// Learnable logit scale, kept in `[T_MIN, T_MAX]`.
    pub t: f64,
    /// Learnable logit bias (BCE only).
    pub b: f64,
}

impl LossParams {
    pub fn supcon_fixed(tau: f64) -> Self {
        Self { variant: LossVariant::SupconFixed, tau, t: 1.0 / tau, b: 0.0 }
    }

    pub fn supcon_learnable() -> Self {
        Self { variant: LossVariant::SupconLearnable, tau: 1.0 / 14.0, t: 14.0, b: 0.0 }
    }

    pub fn bce() -> Self {
        Self { variant: LossVariant::Bce, tau: 1.0, t: 10.0, b: -10.0 }
    }

    pub fn for_variant(variant: LossVariant, tau: f64) -> Self {
        match variant {
            LossVariant::SupconFixed => Self::supcon_fixed(tau),
            LossVariant::SupconLearnable => Self::supcon_learnable(),
            LossVariant::Bce => Self::bce(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == LossVariant::SupconFixed && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.tau)));
        }
        if !(T_MIN..=T_MAX).contains(&self.t) || !self.b.is_finite() {
            return Err(Error::Config(format!("scalars out of range: t={}, b={}", self.t, self.b)));
        }
        Ok(())
    }

    /// Multiplier applied to similarities inside SupCon.
    fn supcon_scale(&self) -> f64 {
        match self.variant {
            LossVariant::SupconFixed => 1.0 / self.tau,
            _ => self.t,
        }
    }

    pub fn learns_t(&self) -> bool {
        self.variant != LossVariant::SupconFixed
    }

    pub fn learns_b(&self) -> bool {
        self.variant == LossVariant::Bce
    }

    pub fn clamp(&mut self) {
        self.t = self.t.clamp(T_MIN, T_MAX);
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub dsim: Array2<T>,
    pub dt: f64,
    pub db: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn loss_and_grads<T: Real>(sim: ArrayView2<T>, mask: &MaskMatrix, params: &LossParams) -> Result<LossOutput<T>> {
    let n = sim.nrows();
    if sim.dim() != mask.entries.dim() {
        return Err(Error::Dimension(format!(
            "similarity {:?} and mask {:?} differ",
            sim.dim(),
            mask.entries.dim()
        )));
    }
    match params.variant {
        LossVariant::Bce => Ok(bce(sim, mask, params)),
        _ => supcon(sim, mask, params, n),
    }
}

fn bce<T: Real>(sim: ArrayView2<T>, mask: &MaskMatrix, params: &LossParams) -> LossOutput<T> {
    let n = sim.nrows();
    let norm = 1.0 / (n * n) as f64;
    let mut dsim = Array2::<T>::zeros((n, n));
    let (mut loss, mut dt, mut db) = (0.0, 0.0, 0.0);
    for ((i, j), &entry) in mask.entries.indexed_iter() {
        if i == j || entry == MaskEntry::Discard {
            continue;
        }
        let m = entry.sign();
        let s = sim[[i, j]].to_f64().unwrap();
        let z = params.t * s + params.b;
        loss += softplus(-m * z);
        let dz = -m * sigmoid(-m * z) * norm;
        dsim[[i, j]] = T::of(dz * params.t);
        dt += dz * s;
        db += dz;
    }
    LossOutput { loss: loss * norm, dsim, dt, db }
}

fn supcon<T: Real>(sim: ArrayView2<T>, mask: &MaskMatrix, params: &LossParams, n: usize) -> Result<LossOutput<T>> {
    let n_pos = mask.positives();
    if n_pos == 0 {
        return Err(Error::EmptyPositive);
    }
    let scale = params.supcon_scale();
    let inv_p = 1.0 / n_pos as f64;
    let mut dsim = Array2::<T>::zeros((n, n));
    let (mut loss, mut dscale) = (0.0, 0.0);
    let mut softmax = vec![0.0; n];
    for i in 0..n {
        let row = sim.row(i);
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && mask.entries[[i, j]] == MaskEntry::Positive).collect();
        if positives.is_empty() {
            continue;
        }
        let logits: Vec<f64> = row.iter().map(|x| scale * x.to_f64().unwrap()).collect();
        let max = (0..n).filter(|&k| k != i).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            softmax[k] = (logits[k] - max).exp();
            denom += softmax[k];
        }
        let lse = max + denom.ln();
        let p_i = positives.len() as f64;
        let mut expected_sim = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            softmax[k] /= denom;
            expected_sim += softmax[k] * row[k].to_f64().unwrap();
            dsim[[i, k]] = T::of(inv_p * p_i * scale * softmax[k]);
        }
        for &j in &positives {
            loss += lse - logits[j];
            dsim[[i, j]] -= T::of(inv_p * scale);
            dscale -= row[j].to_f64().unwrap();
        }
        dscale += p_i * expected_sim;
    }
    let dt = if params.learns_t() { dscale * inv_p } else { 0.0 };
    Ok(LossOutput { loss: loss * inv_p, dsim, dt, db: 0.0 })
}

/// Full objective for one batch of projected features.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput<T> {
    pub loss: f64,
    pub dfeatures: Array2<T>,
    pub dt: f64,
    pub db: f64,
    pub mask: MaskMatrix,
}

pub fn contrastive_objective<T: Real>(
    features: ArrayView2<T>,
    batch: &TrainingBatch,
    params: &LossParams,
    exec: Exec,
) -> Result<ObjectiveOutput<T>> {
    let sim = similarity(features)?;
    let mask = build_mask_with(sim.values.view(), &batch.frame_sizes, exec)?;
    let out = loss_and_grads(sim.values.view(), &mask, params)?;
    let dfeatures = sim.backward(out.dsim.view());
    Ok(ObjectiveOutput { loss: out.loss, dfeatures, dt: out.dt, db: out.db, mask })
}
