//! Training batch construction.
//!
//! A batch holds `K` frames. Every detection contributes two of its stored
//! views; rows are laid out as `[view-1 rows by frame | view-2 rows in the
//! same order]`, so row `i` and row `i + N/2` are the same crop and the four
//! `N/2 × N/2` corners of the similarity matrix are the view quadrants.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, Rng as ChaRng};
use crate::store::{FrameSpan, Unlabeled};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchSpec {
    pub frames_per_batch: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self { frames_per_batch: 2 }
    }
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_batch < 2 {
            return Err(Error::Config(format!(
                "frames_per_batch must be >= 2, got {}",
                self.frames_per_batch
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowProvenance {
    /// Position of the frame within the batch, `0..K`.
    pub frame_slot: usize,
    /// Index of the detection record in the dataset.
    pub record: usize,
    pub detection_idx: u32,
    /// 0 for the first half of the batch, 1 for the second.
    pub view_slot: usize,
    /// Which stored view supplied this row.
    pub stored_view: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub features: Array2<f32>,
    pub provenance: Vec<RowProvenance>,
    /// Frame ids by slot.
    pub frame_ids: Vec<u64>,
    /// Detections per frame slot (block widths within each half).
    pub frame_sizes: Vec<usize>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn half(&self) -> usize {
        self.len() / 2
    }

    /// Start offset of each frame slot within one half.
    pub fn frame_offsets(&self) -> Vec<usize> {
        self.frame_sizes
            .iter()
            .scan(0, |acc, &n| {
                let start = *acc;
                *acc += n;
                Some(start)
            })
            .collect()
    }

    /// Record index of every row.
    pub fn records(&self) -> Vec<usize> {
        self.provenance.iter().map(|p| p.record).collect()
    }
}

fn usable_frames(data: &Unlabeled<'_>) -> Vec<FrameSpan> {
    data.frames().iter().copied().filter(|s| s.len > 0).collect()
}

fn check_usable(n_usable: usize, k: usize) -> Result<()> {
    if n_usable < k {
        return Err(Error::InsufficientData(format!(
            "{n_usable} frames with detections, need at least {k}"
        )));
    }
    Ok(())
}

/// Assemble the batch for an ordered list of frames.
pub fn assemble(data: &Unlabeled<'_>, frames: &[FrameSpan], rng: &mut ChaRng) -> TrainingBatch {
    let dim = data.dim();
    let n_views = data.views_per_detection();
    let half: usize = frames.iter().map(|f| f.len).sum();
    let mut features = Array2::<f32>::zeros((2 * half, dim));
    let mut provenance = Vec::with_capacity(2 * half);
    let mut second = Vec::with_capacity(half);
    let mut row = 0;
    for (slot, span) in frames.iter().enumerate() {
        for record in span.start..span.start + span.len {
            let picked = index::sample(rng, n_views, 2);
            let (v1, v2) = (picked.index(0), picked.index(1));
            features.row_mut(row).assign(&ndarray::aview1(data.view(record, v1)));
            features.row_mut(row + half).assign(&ndarray::aview1(data.view(record, v2)));
            let detection_idx = data.detection_idx(record);
            provenance.push(RowProvenance { frame_slot: slot, record, detection_idx, view_slot: 0, stored_view: v1 });
            second.push(RowProvenance { frame_slot: slot, record, detection_idx, view_slot: 1, stored_view: v2 });
            row += 1;
        }
    }
    provenance.extend(second);
    TrainingBatch {
        features,
        provenance,
        frame_ids: frames.iter().map(|f| f.frame_id).collect(),
        frame_sizes: frames.iter().map(|f| f.len).collect(),
    }
}

/// One batch of `K` distinct frames drawn uniformly without replacement.
pub fn sample_batch(data: &Unlabeled<'_>, spec: &BatchSpec, rng: &mut ChaRng) -> Result<TrainingBatch> {
    spec.validate()?;
    let pool = usable_frames(data);
    check_usable(pool.len(), spec.frames_per_batch)?;
    let frames: Vec<FrameSpan> = index::sample(rng, pool.len(), spec.frames_per_batch)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    Ok(assemble(data, &frames, rng))
}

/// Epoch-structured batch stream.
///
/// Each epoch is a fresh shuffle of the usable frames cut into
/// `ceil(F / K)` consecutive groups; a short final group is topped up with
/// distinct frames drawn uniformly from the rest of the pool.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    data: Unlabeled<'a>,
    pool: Vec<FrameSpan>,
    k: usize,
    rng: ChaRng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(data: Unlabeled<'a>, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let pool = usable_frames(&data);
        check_usable(pool.len(), spec.frames_per_batch)?;
        Ok(Self {
            data,
            pool,
            k: spec.frames_per_batch,
            rng: seed::rng(seed),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pool.len().div_ceil(self.k)
    }

    pub fn usable_frames(&self) -> usize {
        self.pool.len()
    }

    /// Epoch of the batch most recently returned (0-based).
    pub fn epoch(&self) -> usize {
        self.epoch.saturating_sub(1)
    }

    pub fn next_batch(&mut self) -> TrainingBatch {
        if self.cursor >= self.order.len() {
            self.order = (0..self.pool.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.k).min(self.order.len());
        let mut chosen: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        while chosen.len() < self.k {
            let candidate = self.rng.random_range(0..self.pool.len());
            if !chosen.contains(&candidate) {
                chosen.push(candidate);
            }
        }
        let frames: Vec<FrameSpan> = chosen.iter().map(|&i| self.pool[i]).collect();
        assemble(&self.data, &frames, &mut self.rng)
    }
}
