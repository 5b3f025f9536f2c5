use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{flip_horizontal, hex, Dataset, Sample, ToyDatasetSpec};
use super::optim::{AdamW, Schedule};
use crate::error::{Error, Result};
use crate::model::{Forward, Network, NetworkConfig};
use crate::tensor::{ParamGrads, Precision, Tape, Tensor};

/// Samples per work item; fixed so gradient sums do not depend on thread count.
const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub hflip: bool,
    /// Written whenever validation accuracy improves.
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.05,
            warmup_epochs: 2,
            seed: 0,
            precision: Precision::F32,
            hflip: true,
            checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("learning rates and weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// Wall-clock figures, kept out of [`RunReport`] serialization so seeded reports stay byte-identical.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub wall_s: f64,
    pub images_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub param_count: usize,
    pub config_hash: String,
    pub epochs: Vec<EpochStats>,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    #[serde(skip)]
    pub timing: RunTiming,
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub network: Network,
}

/// Short SHA-256 of the JSON encoding of everything that determines a run.
pub fn config_hash(model: &NetworkConfig, data: &ToyDatasetSpec, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, data, train)).expect("configs serialize");
    hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
}

struct BatchSums {
    grads: ParamGrads,
    loss: f64,
    correct: usize,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Summed loss gradients over `items` (image, label, stochastic-depth seed).
fn batch_gradients(net: &Network, items: &[(Tensor, usize, u64)], precision: Precision) -> Result<BatchSums> {
    let partials: Vec<BatchSums> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sums = BatchSums {
                grads: ParamGrads::zeros(net.store()),
                loss: 0.0,
                correct: 0,
            };
            for (image, label, seed) in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut tape = Tape::new(precision);
                let mut fwd = Forward::train(&mut rng);
                let (loss, logits) = net.loss(&mut tape, image, *label, &mut fwd)?;
                sums.loss += tape.value(loss).data()[0];
                sums.correct += usize::from(argmax(tape.value(logits).data()) == *label);
                let grads = tape.backward(loss)?;
                tape.param_grads_into(&grads, &mut sums.grads);
            }
            Ok(sums)
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let mut total = iter.next().ok_or_else(|| Error::Contract("empty batch".into()))?;
    for p in iter {
        total.grads.add(&p.grads);
        total.loss += p.loss;
        total.correct += p.correct;
    }
    Ok(total)
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(net: &Network, samples: &[Sample], precision: Precision) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<usize> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut hits = 0;
            for s in chunk {
                hits += usize::from(predict(net, &s.image, precision)? == s.label);
            }
            Ok(hits)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

pub fn predict(net: &Network, image: &Tensor, precision: Precision) -> Result<usize> {
    let mut tape = Tape::new(precision);
    let logits = net.forward(&mut tape, image, &mut Forward::eval())?;
    Ok(argmax(tape.value(logits).data()))
}

fn numerical(e: Error, context: &str) -> Error {
    match e {
        Error::NonFinite { op } => Error::Numerical(format!("non-finite {op} at {context}")),
        other => other,
    }
}

pub fn train(model: &NetworkConfig, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_| {})
}

/// Trains from scratch, calling `on_epoch` after each epoch.
pub fn train_with(
    model: &NetworkConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if model.n_classes != data.spec.n_classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset {}",
            model.n_classes, data.spec.n_classes
        )));
    }
    let start = Instant::now();
    let mut net = Network::new(model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(net.store(), cfg.weight_decay);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = Schedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best, mut best_epoch) = (f64::NEG_INFINITY, 0);
    let mut step = 0;
    let mut grad_norm = 0.0;
    let mut images = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = schedule.lr(step);
        for batch in order.chunks(cfg.batch_size) {
            lr = schedule.lr(step);
            let items: Vec<(Tensor, usize, u64)> = batch
                .iter()
                .map(|&i| {
                    let s = &data.train[i];
                    let image = if cfg.hflip && rng.random::<bool>() {
                        flip_horizontal(&s.image)
                    } else {
                        s.image.clone()
                    };
                    (image, s.label, rng.random())
                })
                .collect();
            let mut sums = batch_gradients(&net, &items, cfg.precision)
                .map_err(|e| numerical(e, &format!("epoch {epoch}, step {step} (lr {lr:.3e}, last grad norm {grad_norm:.3e})")))?;
            sums.grads.scale(1.0 / batch.len() as f64);
            let store = net.store_mut();
            store.zero_grads();
            store.accumulate(&sums.grads);
            grad_norm = store.grad_norm();
            if !grad_norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch}, step {step} (lr {lr:.3e})"
                )));
            }
            opt.step(store, lr);
            loss_sum += sums.loss;
            correct += sums.correct;
            images += batch.len();
            step += 1;
        }
        let val_acc = evaluate(&net, &data.val, cfg.precision)
            .map_err(|e| numerical(e, &format!("validation after epoch {epoch} (lr {lr:.3e})")))?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            train_acc: correct as f64 / data.train.len() as f64,
            val_acc,
            lr,
        };
        if val_acc > best {
            best = val_acc;
            best_epoch = epoch;
            if let Some(path) = &cfg.checkpoint {
                net.save(path)?;
            }
        }
        on_epoch(&stats);
        history.push(stats);
    }
    let wall_s = start.elapsed().as_secs_f64();
    let report = RunReport {
        variant: model.variant.clone(),
        seed: cfg.seed,
        param_count: net.param_count(),
        config_hash: config_hash(model, &data.spec, cfg),
        final_val_acc: history.last().map_or(0.0, |s| s.val_acc),
        best_val_acc: best,
        best_epoch,
        epochs: history,
        timing: RunTiming {
            wall_s,
            images_per_s: images as f64 / wall_s.max(1e-9),
        },
    };
    Ok(TrainOutcome { report, network: net })
}
