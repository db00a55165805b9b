//! Mini-batch Adam training with cross-entropy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attacks::{accuracy, dataset_images};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    pub lr_floor: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 3e-3,
            lr_floor: 0.05,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) || self.weight_decay < 0.0 {
            return Err(Error::Config("lr_floor must lie in [0, 1] and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_accuracy,test_accuracy\n");
        for e in &self.epochs {
            let test = e.test_accuracy.map(|a| format!("{a:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{:.4},{:.4},{}\n", e.epoch, e.loss, e.train_accuracy, test));
        }
        out
    }
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Vec<f32>], lr: f32, weight_decay: f32) -> Result<()> {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        let mut values = Vec::with_capacity(grads.len());
        for (i, (p, g)) in model.params().iter().zip(grads).enumerate() {
            let mut w = p.value.data().to_vec();
            for (j, wj) in w.iter_mut().enumerate() {
                let gj = g[j];
                self.m[i][j] = B1 * self.m[i][j] + (1.0 - B1) * gj;
                self.v[i][j] = B2 * self.v[i][j] + (1.0 - B2) * gj * gj;
                let update = (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + 1e-8);
                *wj -= lr * (update + weight_decay * *wj);
            }
            values.push(Tensor::new(p.value.shape().to_vec(), w)?);
        }
        model.set_params(values)
    }
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if data.n_classes() != model.config().n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {}",
            data.n_classes(),
            model.config().n_classes
        )));
    }
    if data.image_shape() != model.image_shape() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            data.image_shape(),
            model.image_shape()
        )));
    }
    Ok(())
}

/// Trains in place. Batches are drawn from a seeded permutation per epoch;
/// per-example gradients are summed in index order, so results do not depend
/// on the thread count.
pub fn train(model: &mut Model, train_set: &Dataset, test_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    check_compatible(model, train_set)?;
    if let Some(t) = test_set {
        check_compatible(model, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as f32;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let test_images = test_set.map(dataset_images);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| model.loss_and_grads(&train_set.image(i), train_set.labels()[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for ((loss, logits, g), &i) in results.iter().zip(batch) {
                batch_loss += f64::from(*loss);
                correct += usize::from(argmax(logits) == train_set.labels()[i]);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    acc.iter_mut().zip(gi.data()).for_each(|(a, &b)| *a += b * scale);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += batch_loss;
            log.step_losses.push(batch_loss / batch.len() as f64);
            let progress = (log.step_losses.len() - 1) as f32 / total;
            let cosine = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
            let lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * cosine);
            adam.step(model, &grads, lr, cfg.weight_decay)?;
        }
        let test_accuracy = match (&test_images, test_set) {
            (Some(images), Some(t)) => Some(accuracy(model, images, t.labels())?),
            _ => None,
        };
        log.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_accuracy,
        });
    }
    Ok(log)
}
