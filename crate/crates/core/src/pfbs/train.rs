use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::UnrolledModel;
use crate::error::{Error, Result};
use crate::geometry::{Image, Sinogram};
use crate::metrics;
use crate::nn::{Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 50,
            batch_size: 4,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.eps > 0.0) {
            return Err(Error::InvalidParameter("need lr >= 0 and eps > 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Low-dose data `y` and its normal-dose image `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub y: Sinogram,
    pub x: Image,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean PSNR of eval-mode reconstructions over the test split.
    pub test_psnr: Option<f64>,
    /// Seconds spent on the epoch.
    pub wall_time: f64,
}

/// Sample order of `epoch`: a shuffle from ChaCha8 keyed by `seed` on stream
/// `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean PSNR of `model.reconstruct(y)` against `x`, `None` for no pairs.
pub fn mean_psnr(model: &UnrolledModel, pairs: &[TrainingPair]) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for p in pairs {
        let rec = model.reconstruct(&p.y)?;
        total += metrics::psnr(p.x.values(), rec.values())?;
    }
    Ok(Some(total / pairs.len() as f64))
}

/// Model plus optimizer state and the log so far; enough to resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: UnrolledModel,
    pub adam: Adam,
    pub config: TrainingConfig,
    pub log: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: UnrolledModel, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
        Ok(Self {
            adam: Adam::new(config.adam(), &sizes),
            model,
            config,
            log: Vec::new(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.len()
    }

    /// One Adam step on a batch; returns the batch loss.
    pub fn step(&mut self, batch: &[&TrainingPair]) -> Result<f64> {
        let ys: Vec<&Sinogram> = batch.iter().map(|p| &p.y).collect();
        let xs: Vec<&Image> = batch.iter().map(|p| &p.x).collect();
        let (loss, grads, trace) = self.model.loss_and_gradients(&ys, &xs, false)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        let g = grads.slices();
        self.adam.update(&mut self.model.parameters_mut(), &g)?;
        self.model.update_running_stats(&trace)?;
        Ok(loss)
    }

    pub fn run_epoch(&mut self, train: &[TrainingPair], test: &[TrainingPair]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let start = Instant::now();
        let epoch = self.log.len() + 1;
        let order = epoch_order(train.len(), self.config.seed, epoch);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.step(&batch)? * batch.len() as f64;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            test_psnr: mean_psnr(&self.model, test)?,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.6e}, test PSNR {:?}",
            self.model.mode().as_str(),
            record.train_loss,
            record.test_psnr
        );
        self.log.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.epochs` epochs are logged, calling `after_epoch`
    /// after each one (for checkpoints and log files).
    pub fn train(
        &mut self,
        train: &[TrainingPair],
        test: &[TrainingPair],
        mut after_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.log.len() < self.config.epochs {
            let record = self.run_epoch(train, test)?;
            after_epoch(self, &record)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 3, 1);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 1));
        assert_ne!(a, epoch_order(10, 3, 2));
        assert_ne!(a, epoch_order(10, 4, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            beta2: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_defaults_from_toml() {
        let c: TrainingConfig = toml::from_str("epochs = 3").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.lr, 1e-4);
        assert!(toml::from_str::<TrainingConfig>("epoch = 3").is_err());
    }
}
