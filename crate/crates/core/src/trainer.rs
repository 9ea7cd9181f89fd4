//! Mini-batch SGD with periodic validation and an overfitting stop rule.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{Manifest, Split};
use crate::error::{Error, Result};
use crate::image::load_pgm;
use crate::network::Network;
use crate::nn;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples per gradient work unit. Fixed so that the summation tree, and
/// therefore every output bit, is independent of the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub eval_interval: usize,
    pub max_iterations: usize,
    /// Consecutive degraded evaluations before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 100, learning_rate: 0.001, eval_interval: 500, max_iterations: 8000, patience: 2, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.max_iterations == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch size, eval interval, max iterations and patience must all be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A preprocessed image with its identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub patient_id: String,
    pub scan_id: String,
    pub slice_index: usize,
    pub label: u8,
    pub image: Tensor,
}

/// Loads the images of one split, in manifest order.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<LabeledImage>> {
    manifest
        .split(split)
        .map(|row| {
            let img = load_pgm(row.path.as_ref())?;
            Ok(LabeledImage {
                patient_id: row.patient_id.clone(),
                scan_id: row.scan_id.clone(),
                slice_index: row.slice_index,
                label: row.label,
                image: img.to_tensor(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    Overfitting,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxIterations => "max-iterations",
            StopReason::Overfitting => "overfitting",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    /// Mean batch loss of every iteration, in order.
    pub losses: Vec<f32>,
    pub evals: Vec<EvalRecord>,
    pub stop_reason: StopReason,
    /// Iteration of the returned checkpoint, if any evaluation ran.
    pub best_iteration: Option<usize>,
}

impl TrainHistory {
    /// `iteration,loss,val_acc,val_loss` with the validation columns filled
    /// on evaluation iterations only.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_acc,val_loss\n");
        let mut evals = self.evals.iter().peekable();
        for (i, loss) in self.losses.iter().enumerate() {
            let it = i + 1;
            match evals.peek() {
                Some(e) if e.iteration == it => {
                    out.push_str(&format!("{it},{loss},{},{}\n", e.accuracy, e.loss));
                    evals.next();
                }
                _ => out.push_str(&format!("{it},{loss},,\n")),
            }
        }
        out
    }
}

/// Tracks the best checkpoint and detects the overfitting signature:
/// validation accuracy below the best so far while the mean training loss
/// of the last interval is below that of the interval before, for
/// `patience` consecutive evaluations. Ties for best keep the earliest.
#[derive(Debug, Clone)]
pub struct EarlyStopper<T> {
    patience: usize,
    best: Option<(f64, usize, T)>,
    degraded: usize,
    prev_interval_loss: Option<f64>,
}

impl<T> EarlyStopper<T> {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: None, degraded: 0, prev_interval_loss: None }
    }

    /// Feeds one evaluation; returns `true` when training should stop.
    /// `checkpoint` is only invoked when this evaluation becomes the best.
    pub fn observe(&mut self, eval: EvalRecord, interval_loss: f64, checkpoint: impl FnOnce() -> T) -> bool {
        let loss_fell = self.prev_interval_loss.is_some_and(|prev| interval_loss < prev);
        self.prev_interval_loss = Some(interval_loss);
        match &self.best {
            Some((best_acc, _, _)) if eval.accuracy <= *best_acc => {
                if eval.accuracy < *best_acc && loss_fell {
                    self.degraded += 1;
                } else {
                    self.degraded = 0;
                }
            }
            _ => {
                self.best = Some((eval.accuracy, eval.iteration, checkpoint()));
                self.degraded = 0;
            }
        }
        self.degraded >= self.patience
    }

    pub fn best_iteration(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.1)
    }

    pub fn into_best(self) -> Option<(usize, T)> {
        self.best.map(|(_, it, t)| (it, t))
    }
}

/// Mean loss and mean gradient over `batch`.
pub fn batch_gradients(network: &Network, samples: &[LabeledImage], batch: &[usize]) -> Result<(f32, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptySplit("empty batch".into()));
    }
    let partials: Vec<(f32, Vec<Tensor>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(f32, Vec<Tensor>)> {
            let mut loss = 0.0f32;
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in chunk {
                let s = &samples[i];
                let g = network.loss_and_grads(&s.image, s.label as usize)?;
                loss += g.loss;
                match acc.as_mut() {
                    None => acc = Some(g.grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&g.grads) {
                            dst.add_scaled(src, 1.0)?;
                        }
                    }
                }
            }
            Ok((loss, acc.expect("non-empty chunk")))
        })
        .collect::<Result<_>>()?;

    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (dst, src) in grads.iter_mut().zip(&g) {
            dst.add_scaled(src, 1.0)?;
        }
    }
    let inv = 1.0 / batch.len() as f32;
    grads.iter_mut().for_each(|g| g.scale(inv));
    Ok((loss * inv, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEval {
    /// Fraction correct with AMD predicted when `prob >= 0.5`.
    pub accuracy: f64,
    pub mean_loss: f64,
    pub probs: Vec<f32>,
}

pub fn evaluate_split(network: &Network, samples: &[LabeledImage]) -> Result<SplitEval> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("no samples to evaluate".into()));
    }
    let outs: Vec<(f32, f32)> = samples
        .par_iter()
        .map(|s| {
            let r = nn::softmax_xent(&network.logits(&s.image)?, s.label as usize)?;
            Ok((r.probs.data()[crate::network::AMD_CLASS], r.loss))
        })
        .collect::<Result<_>>()?;
    let correct = samples.iter().zip(&outs).filter(|(s, (p, _))| (*p >= 0.5) == (s.label == 1)).count();
    let mean_loss = outs.iter().map(|&(_, l)| l as f64).sum::<f64>() / samples.len() as f64;
    Ok(SplitEval {
        accuracy: correct as f64 / samples.len() as f64,
        mean_loss,
        probs: outs.into_iter().map(|(p, _)| p).collect(),
    })
}

/// Training order of one epoch; a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, epoch).shuffle(&mut order);
    order
}

/// Trains `network` and returns the checkpoint with the best validation
/// accuracy. `on_eval` is called after every evaluation with the current
/// weights (e.g. to write checkpoint files).
pub fn train(
    mut network: Network,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    config: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord, &Network) -> Result<()>,
) -> Result<(Network, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let dims = network.input_dims();
    let want = [dims.channels, dims.height, dims.width];
    if let Some(s) = train_set.iter().chain(validation).find(|s| s.image.shape() != want) {
        return Err(Error::Shape(format!(
            "image {}_{} is {:?} but the network expects {want:?}",
            s.scan_id,
            s.slice_index,
            s.image.shape()
        )));
    }

    let mut losses = Vec::with_capacity(config.max_iterations);
    let mut evals = Vec::new();
    let mut stopper = EarlyStopper::new(config.patience);
    let mut stop_reason = StopReason::MaxIterations;
    let mut epoch = 0u64;
    let mut order = epoch_order(train_set.len(), config.seed, epoch);
    let mut cursor = 0;

    for iteration in 1..=config.max_iterations {
        if cursor == order.len() {
            epoch += 1;
            order = epoch_order(train_set.len(), config.seed, epoch);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let (loss, grads) = batch_gradients(&network, train_set, &order[cursor..end])?;
        cursor = end;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        nn::sgd_step(network.params_mut(), &grads, config.learning_rate)?;
        losses.push(loss);

        if iteration % config.eval_interval == 0 {
            let v = evaluate_split(&network, validation)?;
            let record = EvalRecord { iteration, accuracy: v.accuracy, loss: v.mean_loss };
            evals.push(record);
            on_eval(&record, &network)?;
            let window = &losses[iteration - config.eval_interval..];
            let interval_loss = window.iter().map(|&l| l as f64).sum::<f64>() / window.len() as f64;
            if stopper.observe(record, interval_loss, || network.clone()) {
                stop_reason = StopReason::Overfitting;
                break;
            }
        }
    }

    let best_iteration = stopper.best_iteration();
    let best = stopper.into_best().map(|(_, n)| n).unwrap_or(network);
    Ok((best, TrainHistory { losses, evals, stop_reason, best_iteration }))
}
