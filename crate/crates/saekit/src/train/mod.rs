//! Training: the plan, the deterministic fit loop, and re-exports of the
//! optimizer, checkpoint format, and loss functions.
//!
//! A run is a pure function of (initial parameters, dataset, plan). Each
//! epoch shuffles sample order with a stream derived from (plan seed, epoch
//! number), walks fixed-size batches, and for each batch runs forward, loss,
//! backward, one Adam step, and the batch-norm running-stat update. The log
//! records the sample-weighted mean loss and the training accuracy
//! (classification) or pixel accuracy (segmentation) per epoch.
//!
//! Resuming is positional: the optimizer's step count divided by the batches
//! per epoch gives the number of completed epochs, so a checkpoint written
//! at an epoch boundary restarts exactly where the original run would have
//! continued, reproducing the remaining log bit for bit.

pub mod adam;
pub mod checkpoint;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::blocks::BN_MOMENTUM;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{saetcn_forward, sasnet_forward, NetworkConfig};
use crate::nn::Mode;
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub use crate::nn::loss::{
    bce_with_logits, bce_with_logits_backward, cross_entropy, cross_entropy_backward,
};
pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BceLogits,
}

/// Training hyperparameters. `loss_kind` may be left unset to follow the
/// architecture (cross-entropy for the classifier, BCE-with-logits for the
/// segmenter); setting it to the wrong head is a config error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub loss_kind: Option<LossKind>,
    /// Write a checkpoint every this many epochs; 0 means only the final
    /// `model.saek`.
    pub checkpoint_every: usize,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            epochs: 10,
            batch_size: 8,
            lr: adam::DEFAULT_LR,
            seed: 0,
            shuffle: true,
            loss_kind: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainPlan {
    /// Validates plan fields and resolves the loss for this architecture.
    pub fn resolve_loss(&self, cfg: &NetworkConfig) -> Result<LossKind> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let expected = match cfg {
            NetworkConfig::Saetcn(_) => LossKind::CrossEntropy,
            NetworkConfig::Sasnet(_) => LossKind::BceLogits,
        };
        match self.loss_kind {
            None => Ok(expected),
            Some(k) if k == expected => Ok(k),
            Some(k) => Err(Error::InvalidConfig(format!(
                "loss {k:?} does not match the {} head",
                cfg.arch_name()
            ))),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// CSV rendering: header plus `epoch,loss,accuracy` rows.
pub fn render_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.accuracy));
    }
    out
}

/// Stacks the chosen samples into one N x 3 x H x W batch.
fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != first {
            return Err(Error::InvalidData(
                "all samples in a dataset must share one image size".into(),
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), first[0], first[1], first[2]], data)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// What one batch's forward/backward produced, extracted before the tape is
/// dropped so the store can be mutated.
struct BatchResult {
    loss: f64,
    /// Loss weight: rows for cross-entropy, elements for BCE.
    units: usize,
    correct: usize,
    /// Accuracy denominator: samples (classification) or pixels.
    predictions: usize,
    grads: Vec<(String, Tensor<f32>)>,
    bn_updates: Vec<(String, crate::nn::BnStats<f32>)>,
}

fn run_batch(
    cfg: &NetworkConfig,
    store: &ParamStore<f32>,
    data: &Dataset,
    chunk: &[usize],
    loss_kind: LossKind,
    coords: (usize, usize),
) -> Result<BatchResult> {
    let tape = Tape::new();
    let sess = Session::new(&tape, store, Mode::Train);

    let (loss_var, correct, predictions, units) = match (data, loss_kind) {
        (Dataset::Classification { samples, .. }, LossKind::CrossEntropy) => {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let x = tape.leaf(stack_images(&images)?, false);
            let NetworkConfig::Saetcn(c) = cfg else { unreachable!() };
            let logits = saetcn_forward(c, &sess, x)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let values = logits.value();
            let ncls = values.shape()[1];
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| argmax(&values.data()[i * ncls..(i + 1) * ncls]) == l)
                .count();
            (loss, correct, labels.len(), labels.len())
        }
        (Dataset::Segmentation { samples, num_classes }, LossKind::BceLogits) => {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
            let x = tape.leaf(stack_images(&images)?, false);
            let NetworkConfig::Sasnet(c) = cfg else { unreachable!() };
            let logits = sasnet_forward(c, &sess, x)?;
            let shape = logits.value().shape().to_vec();
            let (n, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            if ch != *num_classes {
                return Err(Error::InvalidConfig(format!(
                    "network emits {ch} channels but masks carry {num_classes} classes"
                )));
            }
            // One-hot targets over the channel axis.
            let mut onehot = vec![0.0f32; n * ch * h * w];
            for (bi, &si) in chunk.iter().enumerate() {
                let mask = &samples[si].mask;
                if mask.h != h || mask.w != w {
                    return Err(Error::InvalidData("mask size differs from image".into()));
                }
                for (p, &cls) in mask.data.iter().enumerate() {
                    onehot[bi * ch * h * w + cls as usize * h * w + p] = 1.0;
                }
            }
            let targets = Tensor::new(vec![n, ch, h, w], onehot)?;
            let loss = tape.bce_with_logits(logits, &targets)?;

            let values = logits.value();
            let vd = values.data();
            let mut correct = 0usize;
            for (bi, &si) in chunk.iter().enumerate() {
                let mask = &samples[si].mask;
                for p in 0..h * w {
                    let mut best = 0usize;
                    for k in 1..ch {
                        if vd[bi * ch * h * w + k * h * w + p]
                            > vd[bi * ch * h * w + best * h * w + p]
                        {
                            best = k;
                        }
                    }
                    if best == mask.data[p] as usize {
                        correct += 1;
                    }
                }
            }
            (loss, correct, n * h * w, n * ch * h * w)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "dataset kind does not match the network architecture".into(),
            ))
        }
    };

    let loss_value = loss_var.value().data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: coords.0, batch: coords.1 });
    }
    let mut grads = tape.backward(loss_var)?;
    let collected = sess
        .touched()
        .into_iter()
        .map(|(name, id)| {
            let g = grads.take(id).expect("trained leaves always receive gradients");
            (name, g)
        })
        .collect();
    Ok(BatchResult {
        loss: loss_value,
        units,
        correct,
        predictions,
        grads: collected,
        bn_updates: sess.take_bn_updates(),
    })
}

fn apply_bn_updates(
    store: &mut ParamStore<f32>,
    updates: &[(String, crate::nn::BnStats<f32>)],
) -> Result<()> {
    let m = BN_MOMENTUM as f32;
    for (prefix, stats) in updates {
        let rm = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, &s) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        let rv = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, &s) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * s;
        }
    }
    Ok(())
}

/// Trains in place and returns the per-epoch log. When `out_dir` is given,
/// checkpoints land there: `ckpt_epoch{N}.saek` every `checkpoint_every`
/// epochs and `model.saek` after the last one.
///
/// If `opt` arrives with a nonzero step count (a resumed run), training
/// continues after the epoch that step count completes.
pub fn fit(
    cfg: &NetworkConfig,
    store: &mut ParamStore<f32>,
    opt: &mut AdamState<f32>,
    data: &Dataset,
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let loss_kind = plan.resolve_loss(cfg)?;
    if data.is_empty() {
        return Err(Error::InvalidData("cannot train on an empty dataset".into()));
    }
    opt.lr = plan.lr;
    let n = data.len();
    let n_batches = n.div_ceil(plan.batch_size);
    if opt.step % n_batches as u64 != 0 {
        return Err(Error::InvalidConfig(format!(
            "optimizer step {} is not an epoch boundary for {} batches per epoch",
            opt.step, n_batches
        )));
    }
    let start_epoch = (opt.step / n_batches as u64) as usize;

    let mut log = Vec::new();
    for epoch in start_epoch + 1..=plan.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if plan.shuffle {
            SplitMix64::derive(plan.seed, epoch as u64).shuffle(&mut order);
        }
        let mut loss_sum = 0.0f64;
        let mut unit_sum = 0usize;
        let mut correct = 0usize;
        let mut predictions = 0usize;
        for (batch, chunk) in order.chunks(plan.batch_size).enumerate() {
            let result = run_batch(cfg, store, data, chunk, loss_kind, (epoch, batch))?;
            opt.apply(store, &result.grads)?;
            apply_bn_updates(store, &result.bn_updates)?;
            loss_sum += result.loss * result.units as f64;
            unit_sum += result.units;
            correct += result.correct;
            predictions += result.predictions;
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / unit_sum as f64,
            accuracy: correct as f64 / predictions as f64,
        });
        if let Some(dir) = out_dir {
            if plan.checkpoint_every > 0 && epoch % plan.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("ckpt_epoch{epoch}.saek")), store, Some(opt), cfg)?;
            }
            if epoch == plan.epochs {
                save_checkpoint(&dir.join("model.saek"), store, Some(opt), cfg)?;
            }
        }
    }
    Ok(log)
}
