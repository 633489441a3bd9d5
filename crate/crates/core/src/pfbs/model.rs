use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::FbpOperator;
use crate::error::{Error, Result};
use crate::geometry::{Image, ImageShape, ScanGeometry, Sinogram, SinogramDomain};
use crate::linalg;
use crate::nn::cnn::CnnCache;
use crate::nn::{BnBatchStats, BnMode, CnnGrads, StageCnn, Tensor};
use crate::projector::Projector;

/// Power iterations used for the `1/‖A‖²` step initialization.
pub const NORM_ITERATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PfbsMode {
    /// `Aᵀ` as the preconditioner.
    #[serde(rename = "pfbs-ir")]
    Ir,
    /// FBP as the preconditioner.
    #[serde(rename = "pfbs-air")]
    Air,
}

impl PfbsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PfbsMode::Ir => "pfbs-ir",
            PfbsMode::Air => "pfbs-air",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pfbs-ir" => Some(PfbsMode::Ir),
            "pfbs-air" => Some(PfbsMode::Air),
            _ => None,
        }
    }
}

/// Operator applied to the data residual inside the fidelity step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preconditioner {
    Fbp,
    Adjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: PfbsMode,
    /// Number of unrolled stages `K`.
    pub stages: usize,
    pub channels: usize,
    /// Keep the ReLU after the last conv, which makes every CNN output
    /// nonnegative.
    pub final_relu: bool,
    /// Multiplies the Kaiming initialization of every stage's last conv;
    /// 0 starts each CNN with a zero residual.
    #[serde(default = "unit_scale")]
    pub output_init_scale: f64,
    /// Seed for weight initialization.
    pub seed: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(mode: PfbsMode) -> Self {
        Self {
            mode,
            stages: 10,
            channels: 64,
            final_relu: true,
            output_init_scale: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidParameter("channels must be >= 1".into()));
        }
        if !(self.output_init_scale.is_finite() && self.output_init_scale >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "output_init_scale must be finite and >= 0, got {}",
                self.output_init_scale
            )));
        }
        Ok(())
    }
}

/// The K-stage unrolled preconditioned proximal forward-backward network.
#[derive(Debug, Clone)]
pub struct UnrolledModel {
    config: ModelConfig,
    preconditioner: Preconditioner,
    projector: Projector,
    fbp: FbpOperator,
    /// Learned fidelity step lengths, one per stage.
    pub step_scalars: Vec<f64>,
    pub cnns: Vec<StageCnn>,
}

/// Intermediates of a batched forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct StageTrace {
    /// `x⁰ … x^K`, each `(batch, 1, h, w)`.
    pub x: Vec<Tensor>,
    /// `x^{1/2} … x^{K-1/2}`.
    pub half: Vec<Tensor>,
    /// Preconditioned residuals `P(Ax^k − y)`.
    pub residual: Vec<Tensor>,
    cnn: Vec<CnnCache>,
    /// Batch-norm statistics per stage (empty in eval mode).
    pub bn_stats: Vec<Vec<BnBatchStats>>,
}

impl StageTrace {
    pub fn output(&self) -> &Tensor {
        self.x.last().expect("x⁰ is always present")
    }
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub step_scalars: Vec<f64>,
    pub cnns: Vec<CnnGrads>,
    /// `∂L/∂y_j` per batch element, when requested.
    pub inputs: Option<Vec<Sinogram>>,
}

impl ModelGrads {
    /// Flattened in the order of [`UnrolledModel::parameter_names`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.step_scalars];
        for g in &self.cnns {
            out.extend(g.slices());
        }
        out
    }
}

impl UnrolledModel {
    /// Fresh model: Kaiming-initialized CNNs and step lengths of 1 (AIR) or
    /// `1/‖A‖²` (IR).
    pub fn new(config: ModelConfig, geometry: ScanGeometry, shape: ImageShape) -> Result<Self> {
        config.validate()?;
        let projector = Projector::new(geometry, shape);
        let theta = match config.mode {
            PfbsMode::Air => 1.0,
            PfbsMode::Ir => {
                let n2 = projector.norm_squared_estimate(NORM_ITERATIONS);
                if !(n2.is_finite() && n2 > 0.0) {
                    return Err(Error::Numeric(format!("bad ‖A‖² estimate {n2}")));
                }
                1.0 / n2
            }
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cnns = (0..config.stages)
            .map(|k| {
                let mut cnn = StageCnn::new(k + 1, config.channels, config.final_relu, &mut rng);
                let last = cnn.convs.last_mut().expect("five convs");
                last.weight.iter_mut().for_each(|w| *w *= config.output_init_scale);
                cnn
            })
            .collect();
        Self::from_parts(config, geometry, shape, vec![theta; config.stages], cnns)
    }

    pub fn from_parts(
        config: ModelConfig,
        geometry: ScanGeometry,
        shape: ImageShape,
        step_scalars: Vec<f64>,
        cnns: Vec<StageCnn>,
    ) -> Result<Self> {
        config.validate()?;
        if step_scalars.len() != config.stages || cnns.len() != config.stages {
            return Err(Error::shape(
                format!("{} stages", config.stages),
                format!("{} step scalars, {} CNNs", step_scalars.len(), cnns.len()),
            ));
        }
        for (k, c) in cnns.iter().enumerate() {
            if c.in_channels() != k + 1 || c.channels() != config.channels {
                return Err(Error::shape(
                    format!("stage {k}: {} -> {}", k + 1, config.channels),
                    format!("{} -> {}", c.in_channels(), c.channels()),
                ));
            }
            if c.final_relu != config.final_relu {
                return Err(Error::InvalidParameter(format!(
                    "stage {k} final_relu disagrees with the model config"
                )));
            }
        }
        let preconditioner = match config.mode {
            PfbsMode::Air => Preconditioner::Fbp,
            PfbsMode::Ir => Preconditioner::Adjoint,
        };
        Ok(Self {
            config,
            preconditioner,
            projector: Projector::new(geometry, shape),
            fbp: FbpOperator::new(geometry, shape),
            step_scalars,
            cnns,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> PfbsMode {
        self.config.mode
    }

    pub fn stages(&self) -> usize {
        self.config.stages
    }

    pub fn geometry(&self) -> &ScanGeometry {
        self.projector.geometry()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.projector.image_shape()
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn preconditioner(&self) -> Preconditioner {
        self.preconditioner
    }

    /// Swaps the fidelity-step operator while keeping everything else.
    pub fn with_preconditioner(mut self, preconditioner: Preconditioner) -> Self {
        self.preconditioner = preconditioner;
        self
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = vec!["step_scalars".to_string()];
        for (k, c) in self.cnns.iter().enumerate() {
            names.extend(c.parameter_names().into_iter().map(|n| format!("stage{k}.{n}")));
        }
        names
    }

    pub fn parameter_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![self.stages()]];
        for c in &self.cnns {
            shapes.extend(c.parameter_shapes());
        }
        shapes
    }

    pub fn buffer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (k, c) in self.cnns.iter().enumerate() {
            names.extend(c.buffer_names().into_iter().map(|n| format!("stage{k}.{n}")));
        }
        names
    }

    pub fn buffers(&self) -> Vec<&[f64]> {
        self.cnns.iter().flat_map(|c| c.buffers()).collect()
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.cnns.iter_mut().flat_map(|c| c.buffers_mut()).collect()
    }

    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.step_scalars];
        for c in &self.cnns {
            out.extend(c.parameters());
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.step_scalars];
        for c in &mut self.cnns {
            out.extend(c.parameters_mut());
        }
        out
    }

    fn check_sinogram(&self, y: &Sinogram) -> Result<()> {
        if y.domain() != SinogramDomain::PostLog {
            return Err(Error::InvalidParameter("the model expects post-log data".into()));
        }
        let g = self.projector.geometry();
        y.check_dims(g.n_views(), g.n_bins())
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        match self.preconditioner {
            Preconditioner::Fbp => self.fbp.apply_slice(r),
            Preconditioner::Adjoint => self.projector.back_slice(r),
        }
    }

    fn precondition_adjoint(&self, g: &[f64]) -> Vec<f64> {
        match self.preconditioner {
            Preconditioner::Fbp => self.fbp.adjoint_slice(g).into_values(),
            Preconditioner::Adjoint => self.projector.forward_slice(g).into_values(),
        }
    }

    /// `P(Ax − y)`
    fn preconditioned_residual(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut r = self.projector.forward_slice(x).into_values();
        r.iter_mut().zip(y).for_each(|(a, b)| *a -= b);
        self.precondition(&r)
    }

    /// `x − θ_k P(Ax − y)`
    pub fn data_fidelity_step(&self, k: usize, x: &Image, y: &Sinogram) -> Result<Image> {
        let theta = *self
            .step_scalars
            .get(k)
            .ok_or_else(|| Error::InvalidParameter(format!("stage {k} out of range")))?;
        x.check_shape(&self.image_shape())?;
        self.check_sinogram(y)?;
        let z = self.preconditioned_residual(x.values(), y.values());
        let mut out = x.values().to_vec();
        linalg::axpy(-theta, &z, &mut out);
        Ok(Image::from_raw(self.image_shape(), out))
    }

    /// `x^{k+1/2} − CNN_k(x^{1/2}, …, x^{k+1/2})` with BN in eval mode.
    pub fn cnn_prox_step(&self, k: usize, halves: &[Image]) -> Result<Image> {
        let cnn = self
            .cnns
            .get(k)
            .ok_or_else(|| Error::InvalidParameter(format!("stage {k} out of range")))?;
        if halves.len() != k + 1 {
            return Err(Error::shape(format!("{} intermediates", k + 1), halves.len()));
        }
        let shape = self.image_shape();
        let mut values = Vec::with_capacity((k + 1) * shape.len());
        for h in halves {
            h.check_shape(&shape)?;
            values.extend_from_slice(h.values());
        }
        let input = Tensor::new([1, k + 1, shape.height, shape.width], values)?;
        let (c, _, _) = cnn.forward(&input, BnMode::Eval)?;
        let out = linalg::sub(halves[k].values(), c.values());
        Ok(Image::from_raw(shape, out))
    }

    /// Batched forward pass.
    pub fn forward(&self, ys: &[&Sinogram], mode: BnMode) -> Result<StageTrace> {
        if ys.is_empty() {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        for y in ys {
            self.check_sinogram(y)?;
        }
        let shape = self.image_shape();
        let (h, w, n) = (shape.height, shape.width, ys.len());
        let planes: Vec<Vec<f64>> = ys.iter().map(|y| self.fbp.apply_slice(y.values())).collect();
        let to_tensor = |planes: &[Vec<f64>]| {
            let refs: Vec<&[f64]> = planes.iter().map(|p| p.as_slice()).collect();
            Tensor::from_planes(h, w, &refs)
        };
        let mut trace = StageTrace {
            x: vec![to_tensor(&planes)?],
            half: Vec::new(),
            residual: Vec::new(),
            cnn: Vec::new(),
            bn_stats: Vec::new(),
        };
        for k in 0..self.stages() {
            let xk = trace.output();
            let theta = self.step_scalars[k];
            let mut z_planes = Vec::with_capacity(n);
            let mut half_planes = Vec::with_capacity(n);
            for (j, y) in ys.iter().enumerate() {
                let xj = xk.sample(j);
                let z = self.preconditioned_residual(xj, y.values());
                let mut half = xj.to_vec();
                linalg::axpy(-theta, &z, &mut half);
                z_planes.push(z);
                half_planes.push(half);
            }
            let half = to_tensor(&half_planes)?;
            trace.residual.push(to_tensor(&z_planes)?);
            trace.half.push(half);
            let parts: Vec<&Tensor> = trace.half.iter().collect();
            let input = Tensor::concat_channels(&parts)?;
            let (c, cache, stats) = self.cnns[k].forward(&input, mode)?;
            let next = Tensor::new([n, 1, h, w], linalg::sub(trace.half[k].values(), c.values()))?;
            trace.x.push(next);
            trace.cnn.push(cache);
            trace.bn_stats.push(stats);
        }
        if !trace.output().is_finite() {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(trace)
    }

    /// Reconstruction with BN in eval mode.
    pub fn reconstruct(&self, y: &Sinogram) -> Result<Image> {
        let trace = self.forward(&[y], BnMode::Eval)?;
        Image::from_values(self.image_shape(), trace.output().values().to_vec())
    }

    /// Reverse pass from `∂L/∂x^K`.
    pub fn backward(&self, trace: &StageTrace, grad_output: &Tensor, want_input_grads: bool) -> Result<ModelGrads> {
        let out = trace.output();
        if grad_output.shape() != out.shape() {
            return Err(Error::shape(
                format!("{:?}", out.shape()),
                format!("{:?}", grad_output.shape()),
            ));
        }
        let k_stages = self.stages();
        let [n, _, h, w] = out.shape();
        let g = self.projector.geometry();
        let sino_len = g.n_views() * g.n_bins();
        let mut input_grads = want_input_grads.then(|| vec![vec![0.0; sino_len]; n]);

        let mut g_half: Vec<Tensor> = (0..k_stages).map(|_| Tensor::zeros([n, 1, h, w])).collect();
        let mut g_theta = vec![0.0; k_stages];
        let mut g_cnns: Vec<Option<CnnGrads>> = vec![None; k_stages];
        let mut gx = grad_output.clone();
        for k in (0..k_stages).rev() {
            // x^{k+1} = x^{k+1/2} − CNN_k(x^{1/2}, …, x^{k+1/2})
            linalg::axpy(1.0, gx.values(), g_half[k].values_mut());
            let neg = Tensor::new(gx.shape(), gx.values().iter().map(|v| -v).collect())?;
            let (g_in, g_cnn) = self.cnns[k].backward(&trace.cnn[k], &neg)?;
            for (m, gh) in g_half.iter_mut().enumerate().take(k + 1) {
                for j in 0..n {
                    linalg::axpy(1.0, g_in.channel(j, m), gh.sample_mut(j));
                }
            }
            g_cnns[k] = Some(g_cnn);

            // x^{k+1/2} = x^k − θ_k P(Ax^k − y)
            let theta = self.step_scalars[k];
            let mut next = Tensor::zeros([n, 1, h, w]);
            for j in 0..n {
                let gh = g_half[k].sample(j);
                g_theta[k] -= linalg::dot(gh, trace.residual[k].sample(j));
                let pt = self.precondition_adjoint(gh);
                let atpt = self.projector.back_slice(&pt);
                let dst = next.sample_mut(j);
                dst.copy_from_slice(gh);
                linalg::axpy(-theta, &atpt, dst);
                if let Some(ig) = input_grads.as_mut() {
                    linalg::axpy(theta, &pt, &mut ig[j]);
                }
            }
            gx = next;
        }
        // x⁰ = FBP(y)
        if let Some(ig) = input_grads.as_mut() {
            for (j, acc) in ig.iter_mut().enumerate() {
                let back = self.fbp.adjoint_slice(gx.sample(j));
                linalg::axpy(1.0, back.values(), acc);
            }
        }
        let inputs = input_grads.map(|ig| {
            ig.into_iter()
                .map(|v| Sinogram::from_raw(g.n_views(), g.n_bins(), SinogramDomain::PostLog, v))
                .collect()
        });
        Ok(ModelGrads {
            step_scalars: g_theta,
            cnns: g_cnns.into_iter().map(|g| g.expect("every stage visited")).collect(),
            inputs,
        })
    }

    /// `L = (1/J) Σ_j ‖R(y_j) − x_j‖²` over the batch and its exact gradient,
    /// with batch norm in training mode. Also returns the trace so the caller
    /// can apply the running-statistics update.
    pub fn loss_and_gradients(
        &self,
        ys: &[&Sinogram],
        xs: &[&Image],
        want_input_grads: bool,
    ) -> Result<(f64, ModelGrads, StageTrace)> {
        if ys.len() != xs.len() {
            return Err(Error::shape(ys.len(), xs.len()));
        }
        let trace = self.forward(ys, BnMode::Train)?;
        let out = trace.output();
        let j = xs.len() as f64;
        let mut loss = 0.0;
        let mut grad = Tensor::zeros(out.shape());
        for (b, x) in xs.iter().enumerate() {
            x.check_shape(&self.image_shape())?;
            let diff = linalg::sub(out.sample(b), x.values());
            loss += linalg::dot(&diff, &diff) / j;
            grad.sample_mut(b)
                .iter_mut()
                .zip(&diff)
                .for_each(|(g, d)| *g = 2.0 * d / j);
        }
        let grads = self.backward(&trace, &grad, want_input_grads)?;
        Ok((loss, grads, trace))
    }

    /// Applies the batch-norm running-statistics update recorded in `trace`.
    pub fn update_running_stats(&mut self, trace: &StageTrace) -> Result<()> {
        if trace.bn_stats.len() != self.cnns.len() {
            return Err(Error::shape(self.cnns.len(), trace.bn_stats.len()));
        }
        for (cnn, stats) in self.cnns.iter_mut().zip(&trace.bn_stats) {
            cnn.update_running(stats)?;
        }
        Ok(())
    }
}
