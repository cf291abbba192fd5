use serde::{Deserialize, Serialize};

use crate::error::{GqaError, Result};
use crate::model::{backward, Checkpoint, Weights};
use crate::numerics::Rng;

use super::data::{Dataset, Split};
use super::eval::evaluate;

/// Recovery fine-tuning length after conversion.
pub const FINETUNE_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GqaError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.learning_rate) {
            return Err(GqaError::Config(format!(
                "learning_rate {} must be in [0, 1)",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(GqaError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_acc\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.epoch, r.loss, r.val_acc));
        }
        out
    }

    pub fn final_val_acc(&self) -> Option<f64> {
        self.records.last().map(|r| r.val_acc)
    }
}

/// Adam with decoupled weight decay, applied to every tensor.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Weights,
    v: Weights,
}

impl AdamW {
    pub fn new(weights: &Weights, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: weights.zeros_like(),
            v: weights.zeros_like(),
        }
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &Weights) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.eps, self.weight_decay);
        let grads = grads.tensors();
        for (((w, m), v), g) in weights
            .tensors_mut()
            .into_iter()
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
            .zip(grads)
        {
            for (((w, m), v), &g) in w
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
                .zip(g.as_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *w;
                *w -= lr * update;
            }
        }
    }
}

/// Mini-batch training on the train split; val accuracy after each epoch.
/// Batches are drawn from a per-epoch shuffle seeded by `cfg.seed`.
pub fn train(ckpt: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    ckpt.validate()?;
    dataset.check_compatible(&ckpt.config)?;
    let train_idx = dataset.split_indices(Split::Train);
    let mut model = ckpt.clone();
    let mut opt = AdamW::new(&model.weights, cfg.learning_rate, cfg.weight_decay);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let mut rng = Rng::derived(cfg.seed, &[epoch as u64]);
        let order = rng.permutation(train_idx.len());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| dataset.inputs[train_idx[i]].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| dataset.labels[train_idx[i]]).collect();
            let (loss, grads) = backward(&model, &batch, &labels)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(GqaError::Training { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut model.weights, &grads);
        }
        let loss = total / train_idx.len() as f64;
        if !model.weights.is_finite() {
            return Err(GqaError::Training { epoch, loss });
        }
        history.records.push(EpochRecord {
            epoch,
            loss,
            val_acc: evaluate(&model, dataset, Split::Val)?,
        });
    }
    Ok((model, history))
}

/// Same loop as [`train`] for `epochs` epochs with a fresh optimizer state.
/// Shared key/value tensors are updated with the summed gradient of every
/// head in their group.
pub fn finetune(ckpt: &Checkpoint, dataset: &Dataset, epochs: usize, cfg: &TrainConfig) -> Result<(Checkpoint, TrainHistory)> {
    train(ckpt, dataset, &TrainConfig { epochs, ..cfg.clone() })
}
