use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by running statistics.
    Eval,
}

/// Per-channel batch normalization with learned affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Batch statistics from a training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel the statistics were taken over.
    pub count: usize,
}

/// What the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    mode: BnMode,
    normalized: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(format!("{} channels", self.channels()), x.channels()));
        }
        if x.batch() == 0 || x.plane() == 0 {
            return Err(Error::InvalidParameter("batch norm on an empty batch".into()));
        }
        Ok(())
    }

    /// Returns the output, the backward cache and, in training mode, the
    /// batch statistics to feed [`BatchNorm2d::update_running`].
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, BnCache, Option<BnBatchStats>)> {
        self.check(x)?;
        let (n, c, p) = (x.batch(), x.channels(), x.plane());
        let count = n * p;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).map(|b| x.channel(b, ch).iter().sum::<f64>()).sum();
                    let m = s / count as f64;
                    let ss: f64 = (0..n)
                        .map(|b| x.channel(b, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                        .sum();
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let stats = BnBatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let src = x.channel(b, ch);
                let off = (b * c + ch) * p;
                let nrm = &mut normalized.values_mut()[off..off + p];
                for (d, s) in nrm.iter_mut().zip(src) {
                    *d = (s - mean[ch]) * inv_std[ch];
                }
                let (g, bt) = (self.gamma[ch], self.beta[ch]);
                let o = &mut out.values_mut()[off..off + p];
                for (d, s) in o.iter_mut().zip(&normalized.values()[off..off + p]) {
                    *d = g * s + bt;
                }
            }
        }
        out.debug_check_finite("batch norm forward");
        Ok((
            out,
            BnCache {
                mode,
                normalized,
                inv_std,
            },
            stats,
        ))
    }

    /// Exponential moving average update; the variance is bias corrected.
    pub fn update_running(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        let unbias = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * stats.mean[ch];
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * stats.var[ch] * unbias;
        }
    }

    pub fn backward(&self, cache: &BnCache, grad_out: &Tensor) -> Result<BnGrads> {
        let xhat = &cache.normalized;
        if grad_out.shape() != xhat.shape() {
            return Err(Error::shape(
                format!("{:?}", xhat.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let (n, c, p) = (xhat.batch(), xhat.channels(), xhat.plane());
        let count = (n * p) as f64;
        let mut grad_gamma = vec![0.0; c];
        let mut grad_beta = vec![0.0; c];
        for ch in 0..c {
            for b in 0..n {
                let go = grad_out.channel(b, ch);
                let xh = xhat.channel(b, ch);
                grad_beta[ch] += go.iter().sum::<f64>();
                grad_gamma[ch] += go.iter().zip(xh).map(|(g, x)| g * x).sum::<f64>();
            }
        }
        let mut grad_x = Tensor::zeros(xhat.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * p;
                let go = grad_out.channel(b, ch);
                let xh = xhat.channel(b, ch);
                let scale = self.gamma[ch] * cache.inv_std[ch];
                let gx = &mut grad_x.values_mut()[off..off + p];
                match cache.mode {
                    BnMode::Eval => {
                        for (d, g) in gx.iter_mut().zip(go) {
                            *d = scale * g;
                        }
                    }
                    BnMode::Train => {
                        let mean_g = grad_beta[ch] / count;
                        let mean_gx = grad_gamma[ch] / count;
                        for ((d, g), x) in gx.iter_mut().zip(go).zip(xh) {
                            *d = scale * (g - mean_g - x * mean_gx);
                        }
                    }
                }
            }
        }
        Ok(BnGrads {
            input: grad_x,
            gamma: grad_gamma,
            beta: grad_beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_gradients_match, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = random_tensor([3, 2, 4, 5], &mut rng);
        x.values_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 1.5);
        let bn = BatchNorm2d::new(2);
        let (y, _, stats) = bn.forward(&x, BnMode::Train).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.channel(b, ch).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            let expected = stats.as_ref().unwrap().var[ch] / (stats.as_ref().unwrap().var[ch] + BN_EPS);
            assert!((v - expected).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor([2, 3, 3, 3], &mut rng);
        let bn = BatchNorm2d {
            eps: 0.0,
            ..BatchNorm2d::new(3)
        };
        let (y, _, stats) = bn.forward(&x, BnMode::Eval).unwrap();
        assert!(stats.is_none());
        assert_eq!(y, x);
    }

    #[test]
    fn running_stats_update() {
        let mut bn = BatchNorm2d::new(1);
        bn.update_running(&BnBatchStats {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        });
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-15);
        assert!(bn.running_var.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let bn = BatchNorm2d::new(2);
        assert!(bn.forward(&Tensor::zeros([0, 2, 3, 3]), BnMode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros([1, 3, 3, 3]), BnMode::Train).is_err());
    }

    fn check_gradients(mode: BnMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor([2, 3, 3, 4], &mut rng);
        let probe = random_tensor([2, 3, 3, 4], &mut rng);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma = vec![0.5, 1.5, -0.7];
        bn.beta = vec![0.1, 0.0, -0.3];
        bn.running_mean = vec![0.2, -0.1, 0.05];
        bn.running_var = vec![0.8, 1.3, 0.4];
        let objective = |bn: &BatchNorm2d, x: &Tensor| -> f64 {
            let (y, _, _) = bn.forward(x, mode).unwrap();
            y.values().iter().zip(probe.values()).map(|(a, b)| a * b).sum()
        };
        let (_, cache, _) = bn.forward(&x, mode).unwrap();
        let g = bn.backward(&cache, &probe).unwrap();
        assert_gradients_match("input", x.values(), g.input.values(), |v| {
            objective(&bn, &Tensor::new(x.shape(), v.to_vec()).unwrap())
        });
        assert_gradients_match("gamma", &bn.gamma, &g.gamma, |v| {
            objective(
                &BatchNorm2d {
                    gamma: v.to_vec(),
                    ..bn.clone()
                },
                &x,
            )
        });
        assert_gradients_match("beta", &bn.beta, &g.beta, |v| {
            objective(
                &BatchNorm2d {
                    beta: v.to_vec(),
                    ..bn.clone()
                },
                &x,
            )
        });
    }

    #[test]
    fn train_gradients_match_finite_differences() {
        check_gradients(BnMode::Train, 3);
    }

    #[test]
    fn eval_gradients_match_finite_differences() {
        check_gradients(BnMode::Eval, 4);
    }
}
