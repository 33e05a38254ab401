//! Self-supervised training loop and the supervised cross-entropy baseline.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::batching::{BatchSpec, Sampler, TrainingBatch};
use crate::error::{Error, Result};
use crate::head::{Linear, Mode, ProjectionHead, OUTPUT_DIM};
use crate::objective::{contrastive_objective, LossParams, LossVariant};
use crate::optim::{base_lr_for, OptimState};
use crate::parallel::Exec;
use crate::real::Real;
use crate::seed::{self, Stage};
use crate::store::{EmbeddingDataset, FrameSpan, Unlabeled};

pub const DEFAULT_PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub frames_per_batch: usize,
    pub loss: LossVariant,
    /// Temperature for [`LossVariant::SupconFixed`].
    pub tau: f64,
    /// Seed of the batch sampler.
    pub seed: u64,
    /// Call the monitor every this many steps (0 disables it).
    pub eval_every: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            frames_per_batch: 2,
            loss: LossVariant::Bce,
            tau: 0.5,
            seed: 0,
            eval_every: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        BatchSpec { frames_per_batch: self.frames_per_batch }.validate()?;
        LossParams::for_variant(self.loss, self.tau).validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Scalars after this step's update.
    pub t: f64,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub log: Vec<LogRecord>,
    pub loss_params: LossParams,
    pub optim: OptimState<T>,
}

fn batch_input<T: Real>(batch: &TrainingBatch) -> Array2<T> {
    batch.features.mapv(|x| T::of(x as f64))
}

/// Nominal batch size for the learning-rate rule: every sampled frame at
/// its maximum detection count, two views each.
pub fn nominal_batch(frames_per_batch: usize, max_detections: usize) -> usize {
    frames_per_batch * max_detections * 2
}

pub fn train_selfsup<T: Real>(
    data: Unlabeled<'_>,
    head: &mut ProjectionHead<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    train_selfsup_with_monitor(data, head, config, |_, _| {})
}

/// Self-supervised training. `monitor(step, head)` runs every
/// `config.eval_every` steps with the head in EVAL mode.
pub fn train_selfsup_with_monitor<T: Real>(
    data: Unlabeled<'_>,
    head: &mut ProjectionHead<T>,
    config: &TrainConfig,
    mut monitor: impl FnMut(u64, &ProjectionHead<T>),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if head.input_dim() != data.dim() {
        return Err(Error::Dimension(format!(
            "head expects {} inputs, dataset has {}",
            head.input_dim(),
            data.dim()
        )));
    }
    let spec = BatchSpec { frames_per_batch: config.frames_per_batch };
    let mut sampler = Sampler::new(data, spec, config.seed)?;
    let per_epoch = sampler.batches_per_epoch();
    let total_steps = (config.epochs * per_epoch) as u64;
    let base_lr = base_lr_for(nominal_batch(config.frames_per_batch, data.max_detections_per_frame()));
    let mut optim = OptimState::<T>::new(base_lr, total_steps)?;
    let mut loss_params = LossParams::for_variant(config.loss, config.tau);
    let mut log = Vec::with_capacity(total_steps as usize);

    head.set_mode(Mode::Train);
    for step in 0..total_steps {
        let batch = sampler.next_batch();
        let x = batch_input::<T>(&batch);
        let out = head.forward(x.view())?;
        let obj = contrastive_objective(out.view(), &batch, &loss_params, config.exec)?;
        if !obj.loss.is_finite() {
            return Err(Error::Data(format!("non-finite loss at step {step}")));
        }
        let grads = head.backward(obj.dfeatures.view())?;
        let lr = optim.sgd_step(head.params_mut(), &grads.tensors(), Some((&mut loss_params, obj.dt, obj.db)))?;
        log.push(LogRecord {
            step,
            epoch: sampler.epoch(),
            loss: obj.loss,
            lr,
            t: loss_params.t,
            b: loss_params.b,
        });
        if config.eval_every > 0 && (step + 1) % config.eval_every as u64 == 0 {
            head.set_mode(Mode::Eval);
            monitor(step + 1, head);
            head.set_mode(Mode::Train);
        }
    }
    head.set_mode(Mode::Eval);
    Ok(TrainOutcome { log, loss_params, optim })
}

pub fn write_log<W: Write>(log: &[LogRecord], mut sink: W) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut sink, rec)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    /// Upper bound on epochs; early stopping usually ends training first.
    pub max_epochs: usize,
    pub frames_per_batch: usize,
    pub seed: u64,
    pub train_frames: usize,
    pub val_frames: usize,
    pub patience: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            frames_per_batch: 2,
            seed: 0,
            train_frames: 1000,
            val_frames: 200,
            patience: DEFAULT_PATIENCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Frame ids of the three disjoint splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSplits {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome<T> {
    /// Head and classifier from the epoch with the lowest validation loss.
    pub head: ProjectionHead<T>,
    pub classifier: Linear<T>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub splits: FrameSplits,
    /// Held-out test frames.
    pub test: EmbeddingDataset,
    pub optim: OptimState<T>,
}

impl<T: Real> SupervisedOutcome<T> {
    /// Fraction of test detections whose predicted identity is correct.
    pub fn test_accuracy(&self) -> Result<f64> {
        if self.test.is_empty() {
            return Err(Error::Coverage("empty test split".into()));
        }
        let pred = predict(&self.test, &self.head, &self.classifier)?;
        let hits = pred
            .iter()
            .zip(self.test.records())
            .filter(|(p, r)| r.gt_label == Some(**p as u32))
            .count();
        Ok(hits as f64 / pred.len() as f64)
    }
}

fn subset(dataset: &EmbeddingDataset, frames: &[FrameSpan]) -> Result<EmbeddingDataset> {
    let records = frames
        .iter()
        .flat_map(|s| dataset.records()[s.start..s.start + s.len].iter().cloned())
        .collect();
    EmbeddingDataset::new(dataset.dim(), dataset.views_per_detection(), dataset.n_identities(), records)
}

/// Random split of the frames with detections into train/val/test.
pub fn split_frames(
    dataset: &EmbeddingDataset,
    train_frames: usize,
    val_frames: usize,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset, EmbeddingDataset)> {
    use rand::seq::SliceRandom;
    let mut frames: Vec<FrameSpan> = dataset.frames().iter().copied().filter(|f| f.len > 0).collect();
    if frames.len() < train_frames + val_frames {
        return Err(Error::InsufficientData(format!(
            "{} frames available, split needs {}",
            frames.len(),
            train_frames + val_frames
        )));
    }
    frames.shuffle(&mut seed::rng(seed));
    let (train, rest) = frames.split_at(train_frames);
    let (val, test) = rest.split_at(val_frames);
    Ok((subset(dataset, train)?, subset(dataset, val)?, subset(dataset, test)?))
}

/// Mean cross-entropy of `logits` against `labels` and its gradient.
pub fn cross_entropy<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> (f64, Array2<T>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::<T>::zeros(logits.dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let vals: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap()).collect();
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = vals.iter().map(|v| (v - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - vals[y];
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (vals[k] - lse).exp();
            *gk = T::of((p - if k == y { 1.0 } else { 0.0 }) / n);
        }
    }
    (loss / n, grad)
}

fn detection_labels(dataset: &EmbeddingDataset) -> Vec<usize> {
    dataset.records().iter().map(|r| r.gt_label.unwrap() as usize).collect()
}

/// EVAL-mode logits for every stored view, views of a detection adjacent.
pub fn view_logits<T: Real>(
    dataset: &EmbeddingDataset,
    head: &ProjectionHead<T>,
    classifier: &Linear<T>,
) -> Result<Array2<T>> {
    let views = dataset.views_per_detection();
    let dim = dataset.dim();
    let mut x = Array2::<T>::zeros((dataset.len() * views, dim));
    for (r, rec) in dataset.records().iter().enumerate() {
        for v in 0..views {
            x.row_mut(r * views + v)
                .iter_mut()
                .zip(rec.view(v, dim))
                .for_each(|(d, &s)| *d = T::of(s as f64));
        }
    }
    let z = head.infer(x.view())?;
    Ok(classifier.forward(z.view()))
}

fn validation_loss<T: Real>(dataset: &EmbeddingDataset, head: &ProjectionHead<T>, classifier: &Linear<T>) -> Result<f64> {
    let views = dataset.views_per_detection();
    let logits = view_logits(dataset, head, classifier)?;
    let labels: Vec<usize> = detection_labels(dataset).into_iter().flat_map(|y| std::iter::repeat_n(y, views)).collect();
    Ok(cross_entropy(logits.view(), &labels).0)
}

/// Predicted identity per detection: argmax of view-averaged logits.
pub fn predict<T: Real>(dataset: &EmbeddingDataset, head: &ProjectionHead<T>, classifier: &Linear<T>) -> Result<Vec<usize>> {
    let views = dataset.views_per_detection();
    let logits = view_logits(dataset, head, classifier)?.mapv(|x| x.to_f64().unwrap());
    Ok((0..dataset.len())
        .map(|d| {
            let mean: Array1<f64> = logits
                .slice(ndarray::s![d * views..(d + 1) * views, ..])
                .mean_axis(Axis(0))
                .unwrap();
            mean.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect())
}

/// Cross-entropy baseline with the same head, batch construction and
/// optimizer, plus an affine 64→N_ID classifier.
pub fn train_supervised<T: Real>(
    dataset: &EmbeddingDataset,
    head: &mut ProjectionHead<T>,
    config: &SupervisedConfig,
) -> Result<SupervisedOutcome<T>> {
    let n_ids = dataset
        .n_identities()
        .ok_or_else(|| Error::Config("supervised training needs a known identity count".into()))?
        as usize;
    if !dataset.has_labels() {
        return Err(Error::Config("supervised training needs ground-truth labels".into()));
    }
    if config.max_epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    let (train, val, test) = split_frames(
        dataset,
        config.train_frames,
        config.val_frames,
        seed::stage_seed(config.seed, Stage::Split),
    )?;
    let splits = FrameSplits {
        train: train.frames().iter().map(|f| f.frame_id).collect(),
        val: val.frames().iter().map(|f| f.frame_id).collect(),
        test: test.frames().iter().map(|f| f.frame_id).collect(),
    };
    let train_labels = detection_labels(&train);

    let spec = BatchSpec { frames_per_batch: config.frames_per_batch };
    let mut sampler = Sampler::new(train.unlabeled(), spec, config.seed)?;
    let per_epoch = sampler.batches_per_epoch();
    let total_steps = (config.max_epochs * per_epoch) as u64;
    let base_lr = base_lr_for(nominal_batch(config.frames_per_batch, dataset.max_detections_per_frame()));
    let mut optim = OptimState::<T>::new(base_lr, total_steps)?;
    let mut classifier = Linear::<T>::init(
        OUTPUT_DIM,
        n_ids,
        &mut seed::rng(seed::stage_seed(config.seed, Stage::HeadInit) ^ 0xC1A5),
    );

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ProjectionHead<T>, Linear<T>)> = None;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        head.set_mode(Mode::Train);
        let mut epoch_loss = 0.0;
        for _ in 0..per_epoch {
            let batch = sampler.next_batch();
            let labels: Vec<usize> = batch.records().iter().map(|&r| train_labels[r]).collect();
            let x = batch_input::<T>(&batch);
            let z = head.forward(x.view())?;
            let logits = classifier.forward(z.view());
            let (loss, dlogits) = cross_entropy(logits.view(), &labels);
            let (dw, db, dz) = classifier.backward(z.view(), dlogits.view());
            let grads = head.backward(dz.view())?;
            let mut tensors = grads.tensors();
            tensors.push(dw.as_slice().unwrap());
            tensors.push(db.as_slice().unwrap());
            let mut params = head.params_mut();
            params.push(classifier.weight.as_slice_mut().unwrap());
            params.push(classifier.bias.as_slice_mut().unwrap());
            optim.sgd_step(params, &tensors, None)?;
            epoch_loss += loss;
        }
        head.set_mode(Mode::Eval);
        let val_loss = validation_loss(&val, head, &classifier)?;
        history.push(EpochRecord { epoch, train_loss: epoch_loss / per_epoch as f64, val_loss });
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, head.clone(), classifier.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_head, best_classifier) = best.expect("at least one epoch");
    *head = best_head.clone();
    Ok(SupervisedOutcome {
        head: best_head,
        classifier: best_classifier,
        best_epoch,
        history,
        splits,
        test,
        optim,
    })
}
