//! Anisotropic total-variation reconstruction solved by ADMM.
//!
//! The splitting is `min ½‖Ax−y‖²_W + λ‖z‖₁` subject to `z = ∇x`, with the
//! x-subproblem solved inexactly by warm-started conjugate gradient.

use serde::{Deserialize, Serialize};

use crate::analytic::FbpOperator;
use crate::error::{Error, Result};
use crate::geometry::{FidelityWeights, Image, ImageShape, Sinogram, SinogramDomain};
use crate::linalg;
use crate::noise::DOSE_LEVELS;
use crate::projector::Projector;

/// Regularization weights paired with [`DOSE_LEVELS`].
pub const PAPER_LAMBDAS: [f64; 4] = [0.01, 0.01, 0.03, 0.05];

/// λ preset for a dose level, if it is one of [`DOSE_LEVELS`].
pub fn lambda_preset(incident_intensity: f64) -> Option<f64> {
    DOSE_LEVELS
        .iter()
        .position(|&d| d == incident_intensity)
        .map(|i| PAPER_LAMBDAS[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvParams {
    pub lambda: f64,
    /// ADMM penalty.
    pub mu: f64,
    pub outer_iters: usize,
    pub cg_iters: usize,
    /// Relative residual at which the inner CG stops.
    pub cg_tol: f64,
}

impl TvParams {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            mu: 1.0,
            outer_iters: 60,
            cg_iters: 20,
            cg_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {}", self.mu)));
        }
        if self.outer_iters == 0 || self.cg_iters == 0 {
            return Err(Error::InvalidParameter("outer_iters and cg_iters must be >= 1".into()));
        }
        if !(self.cg_tol.is_finite() && self.cg_tol >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cg_tol must be >= 0, got {}",
                self.cg_tol
            )));
        }
        Ok(())
    }
}

/// Two-channel field of horizontal and vertical differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    shape: ImageShape,
    pub horizontal: Vec<f64>,
    pub vertical: Vec<f64>,
}

impl GradField {
    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            horizontal: vec![0.0; shape.len()],
            vertical: vec![0.0; shape.len()],
        }
    }

    pub fn from_channels(shape: ImageShape, horizontal: Vec<f64>, vertical: Vec<f64>) -> Result<Self> {
        if horizontal.len() != shape.len() {
            return Err(Error::shape(shape.len(), horizontal.len()));
        }
        if vertical.len() != shape.len() {
            return Err(Error::shape(shape.len(), vertical.len()));
        }
        Ok(Self {
            shape,
            horizontal,
            vertical,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    fn map2(&self, other: &GradField, f: impl Fn(f64, f64) -> f64) -> GradField {
        let zip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        GradField {
            shape: self.shape,
            horizontal: zip(&self.horizontal, &other.horizontal),
            vertical: zip(&self.vertical, &other.vertical),
        }
    }

    pub fn dot(&self, other: &GradField) -> f64 {
        linalg::dot(&self.horizontal, &other.horizontal) + linalg::dot(&self.vertical, &other.vertical)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.horizontal.iter().chain(&self.vertical).map(|v| v.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvState {
    pub x: Image,
    pub z: GradField,
    pub p: GradField,
}

impl TvState {
    /// Starts from `x` with `z = ∇x` and a zero dual.
    pub fn new(x: Image) -> Self {
        let z = grad(&x);
        let p = GradField::zeros(x.shape());
        Self { x, z, p }
    }

    pub fn primal_residual(&self) -> f64 {
        grad(&self.x).map2(&self.z, |a, b| a - b).norm()
    }
}

/// Forward differences; the last column (row) of the horizontal (vertical)
/// channel is zero.
pub fn grad(x: &Image) -> GradField {
    let shape = x.shape();
    let mut out = GradField::zeros(shape);
    grad_into(shape, x.values(), &mut out);
    out
}

fn grad_into(shape: ImageShape, x: &[f64], out: &mut GradField) {
    let (w, h) = (shape.width, shape.height);
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            out.horizontal[i] = if c + 1 < w { x[i + 1] - x[i] } else { 0.0 };
            out.vertical[i] = if r + 1 < h { x[i + w] - x[i] } else { 0.0 };
        }
    }
}

/// Exact transpose of [`grad`] (the negative divergence).
pub fn grad_adjoint(v: &GradField) -> Image {
    let shape = v.shape;
    Image::from_raw(shape, grad_adjoint_slice(v))
}

fn grad_adjoint_slice(v: &GradField) -> Vec<f64> {
    let (w, h) = (v.shape.width, v.shape.height);
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                out[i] -= v.horizontal[i];
                out[i + 1] += v.horizontal[i];
            }
            if r + 1 < h {
                out[i] -= v.vertical[i];
                out[i + w] += v.vertical[i];
            }
        }
    }
    out
}

/// `sign(t) · max(|t| − threshold, 0)`.
pub fn shrink(t: f64, threshold: f64) -> f64 {
    t.signum() * (t.abs() - threshold).max(0.0)
}

fn weighted(weights: &FidelityWeights, r: &mut [f64]) -> Result<()> {
    if let FidelityWeights::Diagonal(w) = weights {
        if w.len() != r.len() {
            return Err(Error::shape(r.len(), w.len()));
        }
        r.iter_mut().zip(w).for_each(|(ri, wi)| *ri *= wi);
    }
    Ok(())
}

fn check_inputs(state: &TvState, projector: &Projector, y: &Sinogram) -> Result<()> {
    let shape = projector.image_shape();
    state.x.check_shape(&shape)?;
    if state.z.shape != shape {
        return Err(Error::shape(shape.len(), state.z.shape.len()));
    }
    if state.p.shape != shape {
        return Err(Error::shape(shape.len(), state.p.shape.len()));
    }
    let g = projector.geometry();
    y.check_dims(g.n_views(), g.n_bins())?;
    if y.domain() != SinogramDomain::PostLog {
        return Err(Error::InvalidParameter(
            "TV reconstruction expects post-log data".into(),
        ));
    }
    Ok(())
}

/// Solves `(AᵀWA + μ∇ᵀ∇) x = AᵀWy + ∇ᵀ(μz − p)` by conjugate gradient
/// warm-started at `state.x`.
///
/// A breakdown (non-positive curvature or a non-finite step) is logged and the
/// last iterate returned.
pub fn x_update(state: &TvState, projector: &Projector, y: &Sinogram, params: &TvParams) -> Result<Image> {
    x_update_weighted(state, projector, y, &FidelityWeights::Identity, params)
}

pub fn x_update_weighted(
    state: &TvState,
    projector: &Projector,
    y: &Sinogram,
    weights: &FidelityWeights,
    params: &TvParams,
) -> Result<Image> {
    check_inputs(state, projector, y)?;
    let shape = state.x.shape();
    if params.cg_iters == 0 {
        return Ok(state.x.clone());
    }
    let mu = params.mu;
    let mut scratch = GradField::zeros(shape);
    let normal = |v: &[f64], scratch: &mut GradField| -> Result<Vec<f64>> {
        let mut av = projector.forward_slice(v).into_values();
        weighted(weights, &mut av)?;
        let mut out = projector.back_slice(&av);
        if mu != 0.0 {
            grad_into(shape, v, scratch);
            linalg::axpy(mu, &grad_adjoint_slice(scratch), &mut out);
        }
        Ok(out)
    };

    let mut wy = y.values().to_vec();
    weighted(weights, &mut wy)?;
    let mut b = projector.back_slice(&wy);
    let dual_term = state.z.map2(&state.p, |z, p| mu * z - p);
    linalg::axpy(1.0, &grad_adjoint_slice(&dual_term), &mut b);
    let b_norm = linalg::norm(&b);

    let mut x = state.x.values().to_vec();
    let ax = normal(&x, &mut scratch)?;
    let mut r = linalg::sub(&b, &ax);
    let mut d = r.clone();
    let mut rr = linalg::dot(&r, &r);
    for it in 0..params.cg_iters {
        if rr.sqrt() <= params.cg_tol * b_norm || rr == 0.0 {
            break;
        }
        let q = normal(&d, &mut scratch)?;
        let curvature = linalg::dot(&d, &q);
        let alpha = rr / curvature;
        if !(curvature > 0.0 && alpha.is_finite()) {
            log::warn!("CG breakdown at iteration {it} (curvature {curvature:e})");
            break;
        }
        linalg::axpy(alpha, &d, &mut x);
        linalg::axpy(-alpha, &q, &mut r);
        let rr_next = linalg::dot(&r, &r);
        let beta = rr_next / rr;
        rr = rr_next;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
    }
    Ok(Image::from_raw(shape, x))
}

/// Soft-thresholds `∇x + p/μ` at `λ/μ`.
pub fn z_update(state: &TvState, params: &TvParams) -> GradField {
    let (mu, threshold) = (params.mu, params.lambda / params.mu);
    grad(&state.x).map2(&state.p, |g, p| shrink(g + p / mu, threshold))
}

/// `p + μ(∇x − z)`.
pub fn dual_update(state: &TvState, params: &TvParams) -> GradField {
    let gap = grad(&state.x).map2(&state.z, |g, z| g - z);
    state.p.map2(&gap, |p, d| p + params.mu * d)
}

/// `½‖Ax − y‖²_W + λ‖∇x‖₁`.
pub fn tv_objective(
    projector: &Projector,
    y: &Sinogram,
    x: &Image,
    weights: &FidelityWeights,
    lambda: f64,
) -> Result<f64> {
    let ax = projector.forward(x)?;
    y.check_dims(ax.n_views(), ax.n_bins())?;
    let r = linalg::sub(ax.values(), y.values());
    let mut wr = r.clone();
    weighted(weights, &mut wr)?;
    Ok(0.5 * linalg::dot(&r, &wr) + lambda * grad(x).l1_norm())
}

/// Runs ADMM from `init` (FBP of `y` when `None`) and returns the final state.
pub fn solve_tv(
    projector: &Projector,
    y: &Sinogram,
    weights: &FidelityWeights,
    params: &TvParams,
    init: Option<Image>,
) -> Result<TvState> {
    params.validate()?;
    let x0 = match init {
        Some(x) => x,
        None => FbpOperator::new(*projector.geometry(), projector.image_shape()).reconstruct(y)?,
    };
    let mut state = TvState::new(x0);
    for _ in 0..params.outer_iters {
        state.x = x_update_weighted(&state, projector, y, weights, params)?;
        state.z = z_update(&state, params);
        state.p = dual_update(&state, params);
    }
    if !state.x.is_finite() {
        return Err(Error::Numeric("TV iterate is not finite".into()));
    }
    Ok(state)
}

/// Unweighted TV reconstruction; `outer_iters = 0` returns the initial image.
pub fn reconstruct_tv(projector: &Projector, y: &Sinogram, params: &TvParams, init: Option<Image>) -> Result<Image> {
    if params.outer_iters == 0 {
        let p = TvParams {
            outer_iters: 1,
            ..*params
        };
        p.validate()?;
        return match init {
            Some(x) => Ok(x),
            None => FbpOperator::new(*projector.geometry(), projector.image_shape()).reconstruct(y),
        };
    }
    Ok(solve_tv(projector, y, &FidelityWeights::Identity, params, init)?.x)
}
