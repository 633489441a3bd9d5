use rand::Rng;

use super::batchnorm::{BatchNorm2d, BnBatchStats, BnCache, BnMode};
use super::conv::Conv2d;
use super::relu::{relu_backward, relu_forward};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Number of middle `Conv + BN + ReLU` blocks.
pub const MIDDLE_BLOCKS: usize = 3;

/// Five-block residual CNN:
/// `Conv(in→C)+ReLU`, three `Conv(C→C)+BN+ReLU`, `Conv(C→1)` with an
/// optional final ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCnn {
    pub convs: Vec<Conv2d>,
    pub norms: Vec<BatchNorm2d>,
    pub final_relu: bool,
}

#[derive(Debug, Clone)]
pub struct CnnCache {
    /// Input of every conv; the ReLU outputs among them double as masks.
    conv_inputs: Vec<Tensor>,
    bn: Vec<BnCache>,
    output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnGrads {
    pub conv_weights: Vec<Vec<f64>>,
    pub conv_biases: Vec<Vec<f64>>,
    pub gammas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
}

impl CnnGrads {
    /// Gradients in the order of [`StageCnn::parameter_names`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for i in 0..self.conv_weights.len() {
            out.push(&self.conv_weights[i]);
            out.push(&self.conv_biases[i]);
            if i >= 1 && i <= self.gammas.len() {
                out.push(&self.gammas[i - 1]);
                out.push(&self.betas[i - 1]);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &CnnGrads) {
        let pairs = self
            .conv_weights
            .iter_mut()
            .chain(&mut self.conv_biases)
            .chain(&mut self.gammas)
            .chain(&mut self.betas)
            .zip(
                other
                    .conv_weights
                    .iter()
                    .chain(&other.conv_biases)
                    .chain(&other.gammas)
                    .chain(&other.betas),
            );
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

impl StageCnn {
    pub fn new<R: Rng>(in_ch: usize, channels: usize, final_relu: bool, rng: &mut R) -> Self {
        let mut convs = vec![Conv2d::kaiming(in_ch, channels, rng)];
        for _ in 0..MIDDLE_BLOCKS {
            convs.push(Conv2d::kaiming(channels, channels, rng));
        }
        convs.push(Conv2d::kaiming(channels, 1, rng));
        Self {
            convs,
            norms: (0..MIDDLE_BLOCKS).map(|_| BatchNorm2d::new(channels)).collect(),
            final_relu,
        }
    }

    /// All weights zero; the output is identically zero.
    pub fn zeros(in_ch: usize, channels: usize, final_relu: bool) -> Self {
        let mut convs = vec![Conv2d::zeros(in_ch, channels)];
        for _ in 0..MIDDLE_BLOCKS {
            convs.push(Conv2d::zeros(channels, channels));
        }
        convs.push(Conv2d::zeros(channels, 1));
        Self {
            convs,
            norms: (0..MIDDLE_BLOCKS).map(|_| BatchNorm2d::new(channels)).collect(),
            final_relu,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn channels(&self) -> usize {
        self.convs[0].out_channels()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
            if i >= 1 && i <= self.norms.len() {
                names.push(format!("bn{i}.gamma"));
                names.push(format!("bn{i}.beta"));
            }
        }
        names
    }

    /// Shapes matching [`Self::parameters`]; conv weights are
    /// `(out, in, 3, 3)`.
    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(vec![c.out_channels(), c.in_channels(), 3, 3]);
            out.push(vec![c.out_channels()]);
            if i >= 1 && i <= self.norms.len() {
                out.push(vec![self.norms[i - 1].channels()]);
                out.push(vec![self.norms[i - 1].channels()]);
            }
        }
        out
    }

    /// Batch-norm running statistics, which are state but not trained.
    pub fn buffer_names(&self) -> Vec<String> {
        (1..=self.norms.len())
            .flat_map(|i| [format!("bn{i}.running_mean"), format!("bn{i}.running_var")])
            .collect()
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.norms
            .iter()
            .flat_map(|bn| [bn.running_mean.as_slice(), bn.running_var.as_slice()])
            .collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.norms
            .iter_mut()
            .flat_map(|bn| [bn.running_mean.as_mut_slice(), bn.running_var.as_mut_slice()])
            .collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push(&c.weight);
            out.push(&c.bias);
            if i >= 1 && i <= self.norms.len() {
                out.push(&self.norms[i - 1].gamma);
                out.push(&self.norms[i - 1].beta);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
            if i >= 1 {
                if let Some(bn) = norms.next() {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, CnnCache, Vec<BnBatchStats>)> {
        let mut conv_inputs = Vec::with_capacity(self.convs.len());
        let mut bn_caches = Vec::with_capacity(self.norms.len());
        let mut stats = Vec::new();

        let mut h = relu_forward(&self.convs[0].forward(x)?);
        conv_inputs.push(x.clone());
        for (conv, bn) in self.convs[1..=self.norms.len()].iter().zip(&self.norms) {
            let z = conv.forward(&h)?;
            conv_inputs.push(h);
            let (b, cache, s) = bn.forward(&z, mode)?;
            bn_caches.push(cache);
            stats.extend(s);
            h = relu_forward(&b);
        }
        let last = self.convs.last().expect("five convs");
        let mut out = last.forward(&h)?;
        conv_inputs.push(h);
        if self.final_relu {
            out = relu_forward(&out);
        }
        Ok((
            out.clone(),
            CnnCache {
                conv_inputs,
                bn: bn_caches,
                output: out,
            },
            stats,
        ))
    }

    /// Returns the gradient with respect to the input and all parameters.
    pub fn backward(&self, cache: &CnnCache, grad_out: &Tensor) -> Result<(Tensor, CnnGrads)> {
        if grad_out.shape() != cache.output.shape() {
            return Err(Error::shape(
                format!("{:?}", cache.output.shape()),
                format!("{:?}", grad_out.shape()),
            ));
        }
        let n = self.convs.len();
        let mut conv_weights = vec![Vec::new(); n];
        let mut conv_biases = vec![Vec::new(); n];
        let mut gammas = vec![Vec::new(); self.norms.len()];
        let mut betas = vec![Vec::new(); self.norms.len()];

        let mut g = if self.final_relu {
            relu_backward(&cache.output, grad_out)?
        } else {
            grad_out.clone()
        };
        for i in (0..n).rev() {
            let cg = self.convs[i].backward(&cache.conv_inputs[i], &g)?;
            conv_weights[i] = cg.weight;
            conv_biases[i] = cg.bias;
            g = cg.input;
            if i == 0 {
                break;
            }
            // conv_inputs[i] is the ReLU output of block i-1, so it carries the mask
            g = relu_backward(&cache.conv_inputs[i], &g)?;
            let block = i - 1;
            if block >= 1 && block <= self.norms.len() {
                let bg = self.norms[block - 1].backward(&cache.bn[block - 1], &g)?;
                gammas[block - 1] = bg.gamma;
                betas[block - 1] = bg.beta;
                g = bg.input;
            }
        }
        Ok((
            g,
            CnnGrads {
                conv_weights,
                conv_biases,
                gammas,
                betas,
            },
        ))
    }

    pub fn update_running(&mut self, stats: &[BnBatchStats]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(Error::shape(self.norms.len(), stats.len()));
        }
        for (bn, s) in self.norms.iter_mut().zip(stats) {
            bn.update_running(s);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_gradients_match, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_param(cnn: &StageCnn, idx: usize, v: &[f64]) -> StageCnn {
        let mut c = cnn.clone();
        c.parameters_mut()[idx].copy_from_slice(v);
        c
    }

    #[test]
    fn zero_network_outputs_zero() {
        let cnn = StageCnn::zeros(3, 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _, stats) = cnn
            .forward(&random_tensor([2, 3, 5, 5], &mut rng), BnMode::Train)
            .unwrap();
        assert_eq!(y.shape(), [2, 1, 5, 5]);
        assert!(y.values().iter().all(|&v| v == 0.0));
        assert_eq!(stats.len(), 3);
    }

    #[test]
    fn names_parameters_and_grads_align() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cnn = StageCnn::new(2, 4, false, &mut rng);
        let names = cnn.parameter_names();
        assert_eq!(names.len(), 16);
        assert_eq!(cnn.parameters().len(), 16);
        assert_eq!(cnn.parameters_mut().len(), 16);
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let (y, cache, _) = cnn.forward(&x, BnMode::Train).unwrap();
        let (_, g) = cnn.backward(&cache, &y).unwrap();
        for (p, gs) in cnn.parameters().iter().zip(g.slices()) {
            assert_eq!(p.len(), gs.len());
        }
    }

    fn check_all(final_relu: bool, mode: BnMode, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cnn = StageCnn::new(2, 3, final_relu, &mut rng);
        for bn in &mut cnn.norms {
            bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            bn.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
            bn.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
        // a positive bias keeps the final ReLU active almost everywhere
        cnn.convs[4].bias[0] = 0.5;
        let x = random_tensor([2, 2, 4, 4], &mut rng);
        let probe = random_tensor([2, 1, 4, 4], &mut rng);
        let objective = |c: &StageCnn, x: &Tensor| -> f64 {
            let (y, _, _) = c.forward(x, mode).unwrap();
            y.values().iter().zip(probe.values()).map(|(a, b)| a * b).sum()
        };
        let (_, cache, _) = cnn.forward(&x, mode).unwrap();
        let (gx, g) = cnn.backward(&cache, &probe).unwrap();
        assert_gradients_match("input", x.values(), gx.values(), |v| {
            objective(&cnn, &Tensor::new(x.shape(), v.to_vec()).unwrap())
        });
        let names = cnn.parameter_names();
        let params: Vec<Vec<f64>> = cnn.parameters().iter().map(|p| p.to_vec()).collect();
        for (idx, gs) in g.slices().iter().enumerate() {
            assert_gradients_match(&names[idx], &params[idx], gs, |v| {
                objective(&set_param(&cnn, idx, v), &x)
            });
        }
    }

    #[test]
    fn gradients_match_finite_differences_train() {
        check_all(false, BnMode::Train, 3);
        check_all(true, BnMode::Train, 4);
    }

    #[test]
    fn gradients_match_finite_differences_eval() {
        check_all(true, BnMode::Eval, 5);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cnn = StageCnn::new(1, 4, true, &mut rng);
        let x = random_tensor([3, 1, 6, 6], &mut rng);
        let a = cnn.forward(&x, BnMode::Train).unwrap().0;
        let b = cnn.forward(&x, BnMode::Train).unwrap().0;
        assert_eq!(a, b);
    }
}
