//! Baseline training and post-surgery fine-tuning.

mod data;

pub use data::{
    load_dataset, write_cifar10_format, DatasetBundle, DatasetName, LabeledDataset,
    Normalization, Split, SplitSpec, SynthMode, SyntheticSpec,
};

use std::collections::HashMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{ModelState, Mode};
use crate::nn::ops::softmax_cross_entropy;
use crate::rng::{stream_rng, Stream};
use crate::srinit::predict_top1;

/// Learning-rate schedule, applied per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    /// Cosine annealing with warm restarts: the rate returns to its maximum
    /// at epochs 0, t0, t0·(1+mult), t0·(1+mult+mult²), …
    CosineWarmRestarts { t0: usize, mult: usize },
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Constant rate.
    None,
}

impl Schedule {
    /// Learning rate at a given epoch for base rate `lr`.
    pub fn lr_at(&self, lr: f64, epoch: usize) -> f64 {
        match self {
            Schedule::None => lr,
            Schedule::Step { milestones, gamma } => {
                let hits = milestones.iter().filter(|&&m| epoch >= m).count();
                lr * gamma.powi(hits as i32)
            }
            Schedule::CosineWarmRestarts { t0, mult } => {
                let mut start = 0usize;
                let mut len = (*t0).max(1);
                while epoch >= start + len {
                    start += len;
                    len *= (*mult).max(1);
                }
                let t = (epoch - start) as f64 / len as f64;
                lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// Epochs (within `horizon`) at which a warm-restart schedule returns to
    /// the maximum rate.
    pub fn restart_epochs(&self, horizon: usize) -> Vec<usize> {
        match self {
            Schedule::CosineWarmRestarts { t0, mult } => {
                let mut out = vec![0];
                let mut start = 0usize;
                let mut len = (*t0).max(1);
                loop {
                    start += len;
                    if start >= horizon {
                        break;
                    }
                    out.push(start);
                    len *= (*mult).max(1);
                }
                out
            }
            _ => vec![0],
        }
    }
}

/// SGD training recipe. The defaults are the reference recipe: momentum SGD
/// at lr 0.01, batch 256, 150 epochs, weight decay 0.005, cosine annealing
/// with warm restarts (t0 = 10, mult = 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    /// Random crop + horizontal flip on CIFAR-style inputs.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.005,
            batch_size: 256,
            epochs: 150,
            schedule: Schedule::CosineWarmRestarts { t0: 10, mult: 2 },
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.lr > 0.0) {
            errs.push(format!("{prefix}.lr: must be > 0"));
        }
        if self.batch_size < 1 {
            errs.push(format!("{prefix}.batch_size: must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("{prefix}.momentum: must be in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            errs.push(format!("{prefix}.weight_decay: must be >= 0"));
        }
        errs
    }
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// History rows as CSV: `epoch,lr,train_loss,train_acc,val_acc`.
pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for row in history {
        let val = row.val_acc.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.train_acc, val
        ));
    }
    s
}

/// SGD with momentum and (coupled) weight decay over every trainable
/// tensor, batch-norm affine parameters included.
struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<String, ArrayD<f32>>,
}

impl Sgd {
    fn new(cfg: &TrainConfig) -> Self {
        Sgd { momentum: cfg.momentum, weight_decay: cfg.weight_decay, velocity: HashMap::new() }
    }

    fn step(&mut self, model: &mut ModelState, lr: f64) {
        let mu = self.momentum as f32;
        let wd = self.weight_decay as f32;
        let lr = lr as f32;
        let velocity = &mut self.velocity;
        model.visit_param_grad(&mut |name, kind, mut param, grad| {
            if !kind.trainable() {
                return;
            }
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
            ndarray::Zip::from(v.view_mut())
                .and(&mut param)
                .and(&grad)
                .for_each(|vel, p, &g| {
                    *vel = mu * *vel + (g + wd * *p);
                    *p -= lr * *vel;
                });
        });
    }
}

/// Trains the model in place and reports per-epoch history.
///
/// Deterministic given `cfg.seed`: batch order, augmentation draws, and all
/// reductions are fixed-order. `epochs = 0` returns the model unchanged with
/// an empty history. A non-finite loss aborts with a training error naming
/// the epoch.
pub fn train(
    mut model: ModelState,
    train_set: &LabeledDataset,
    val_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochStats>)> {
    let errs = cfg.problems("train");
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if train_set.input_shape() != model.spec().input_shape {
        return Err(Error::argument(format!(
            "dataset shape {:?} does not match model input {:?}",
            train_set.input_shape(),
            model.spec().input_shape
        )));
    }
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }

    let entry_mode = model.mode();
    model.set_mode(Mode::Train);
    let mut optimizer = Sgd::new(cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let m = train_set.len();

    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch);
        let mut order: Vec<usize> = (0..m).collect();
        {
            let mut rng = stream_rng(cfg.seed, Stream::Shuffle { epoch: epoch as u32 });
            for i in (1..m).rev() {
                use rand::Rng;
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            // A single sample cannot produce batch statistics.
            if batch.len() < 2 && m > 1 {
                continue;
            }
            let (x, y) = if cfg.augment {
                train_set.batch_augmented(batch, cfg.seed, epoch as u32)
            } else {
                train_set.batch(batch)
            };
            model.zero_grad();
            let (logits, cache) = model.forward_train(&x);
            let (loss, dlogits, batch_correct) = softmax_cross_entropy(&logits, &y);
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite loss {loss}"),
                });
            }
            model.backward_train(&dlogits, &cache);
            optimizer.step(&mut model, lr);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
            correct += batch_correct;
        }

        let val_acc = match val_set {
            Some(v) => Some(predict_top1(&model, v)?.0),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            train_acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            val_acc,
        });
    }

    model.set_mode(entry_mode);
    Ok((model, history))
}

/// Fine-tunes a pruned model: identical to [`train`] but never alters the
/// topology and starts from the surviving parameters as-is.
pub fn finetune(
    model: ModelState,
    train_set: &LabeledDataset,
    val_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(ModelState, Vec<EpochStats>)> {
    let units_before = model.unit_count();
    let (tuned, history) = train(model, train_set, val_set, cfg)?;
    debug_assert_eq!(tuned.unit_count(), units_before, "fine-tuning must not alter topology");
    Ok((tuned, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warm_restarts_return_to_max() {
        let s = Schedule::CosineWarmRestarts { t0: 10, mult: 2 };
        assert_eq!(s.restart_epochs(80), vec![0, 10, 30, 70]);
        for &e in &[0usize, 10, 30, 70] {
            assert!((s.lr_at(0.1, e) - 0.1).abs() < 1e-12, "epoch {e}");
        }
        // Strictly below max in between.
        assert!(s.lr_at(0.1, 5) < 0.1);
        assert!(s.lr_at(0.1, 29) < 0.1);
    }

    #[test]
    fn step_schedule_decays_at_milestones() {
        let s = Schedule::Step { milestones: vec![2, 4], gamma: 0.1 };
        assert!((s.lr_at(1.0, 0) - 1.0).abs() < 1e-12);
        assert!((s.lr_at(1.0, 2) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(1.0, 4) - 0.01).abs() < 1e-12);
    }
}
