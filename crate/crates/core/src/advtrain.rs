//! Madry-style adversarial training: every optimization step descends the
//! loss on freshly generated PGD examples, never on the clean batch. Clean
//! metrics are monitored per epoch but not trained on.

use rand::Rng;

use crate::attacks::{self, AttackConfig};
use crate::netcore::{
    accuracy, backward, sgd_step, update_running_stats, Batch, LossKind, Model,
};
use crate::rng;
use crate::{Error, Result};

/// Settings shared by every training loop in the workspace (pre-training,
/// pruning fine-tune, ensemble training).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Piecewise-constant schedule: `(first epoch, learning rate)` pairs with
    /// strictly increasing boundaries; the first boundary must be 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub attack: AttackConfig,
    /// Momentum for batchnorm running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr_schedule.is_empty() {
            return Err(Error::InvalidConfig("lr_schedule must be non-empty".into()));
        }
        if self.lr_schedule[0].0 != 0 {
            return Err(Error::InvalidConfig(
                "lr_schedule must start at epoch 0".into(),
            ));
        }
        for pair in self.lr_schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidConfig(format!(
                    "lr_schedule boundaries must be strictly increasing, got {} then {}",
                    pair[0].0, pair[1].0
                )));
            }
        }
        for &(_, lr) in &self.lr_schedule {
            if !lr.is_finite() || lr <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "learning rates must be finite and > 0, got {lr}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig(format!(
                "bn_momentum must lie in [0, 1], got {}",
                self.bn_momentum
            )));
        }
        self.attack.validate()
    }

    /// Learning rate in force at a given epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_schedule[0].1;
        for &(start, rate) in &self.lr_schedule {
            if start <= epoch {
                lr = rate;
            }
        }
        lr
    }
}

/// One epoch's monitoring record.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub clean_acc: f64,
    pub robust_acc: f64,
}

/// Deterministic epoch shuffling: index batches of size `batch_size` drawn
/// from a Fisher-Yates permutation seeded by `(seed, epoch)`.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(rng::derive(seed, "shuffle", epoch as u64));
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Adversarially train a model on the dataset; returns the trained model and
/// the per-epoch history. `epochs = 0` returns the model unchanged with an
/// empty history.
pub fn adversarial_train(
    model: &Model,
    data: &Batch,
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::EmptyInput("training dataset is empty".into()));
    }
    let mut model = model.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut adv_loss_sum = 0.0;
        let mut batches_seen = 0usize;

        for (b, idx) in shuffled_batches(data.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let batch = data.select(&idx)?;
            let mut atk = cfg.attack.clone();
            atk.seed = rng::derive(rng::derive(cfg.seed, "atk-epoch", epoch as u64), "atk-batch", b as u64);
            let adv = attacks::pgd_attack(&model, &batch, &atk)?;
            let adv_batch = Batch::new(adv, batch.labels.clone())?;

            let out = backward(&model, &adv_batch, LossKind::CrossEntropy, true)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss diverged at epoch {epoch}, batch {b}"
                )));
            }
            sgd_step(&mut model, &out.grads, lr)?;
            update_running_stats(&mut model, &out.trace.bn_stats, cfg.bn_momentum)?;
            adv_loss_sum += out.loss;
            batches_seen += 1;
        }

        let mut eval_atk = cfg.attack.clone();
        eval_atk.seed = rng::derive(cfg.seed, "atk-eval", epoch as u64);
        history.push(EpochRecord {
            epoch,
            clean_loss: attacks::batch_ce_loss(&model, data)?,
            adv_loss: adv_loss_sum / batches_seen as f64,
            clean_acc: accuracy(&model, data)?,
            robust_acc: attacks::robust_accuracy(&model, data, &eval_atk)?,
        });
    }
    Ok((model, history))
}
