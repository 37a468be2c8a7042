use rand::Rng;
use rand_distr::StandardNormal;

use super::{NumericsError, Tape, Tensor, Var};

/// Smallest variance any head may emit.
pub const MIN_VARIANCE: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian whose mean and variance live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    /// Variance from an unconstrained head through softplus, clamped at
    /// [`MIN_VARIANCE`].
    pub fn from_raw(mean: Var<'t>, raw_var: Var<'t>) -> Self {
        DiagGaussian {
            mean,
            var: raw_var.softplus().clamp_min(MIN_VARIANCE),
        }
    }

    /// Wrap an already-positive variance (clamped for safety).
    pub fn new(mean: Var<'t>, var: Var<'t>) -> Self {
        DiagGaussian {
            mean,
            var: var.clamp_min(MIN_VARIANCE),
        }
    }

    /// `N(0, I)` with the given shape.
    pub fn standard(tape: &'t Tape, rows: usize, dim: usize) -> Self {
        DiagGaussian {
            mean: tape.constant(Tensor::zeros(rows, dim)),
            var: tape.constant(Tensor::full(rows, dim, 1.0)),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }
}

/// `Σⱼ −½·log(2π·varⱼ) − (xⱼ−μⱼ)²/(2·varⱼ)` per row, as `[rows, 1]`.
pub fn gaussian_logpdf_rows<'t>(
    x: Var<'t>,
    g: &DiagGaussian<'t>,
) -> Result<Var<'t>, NumericsError> {
    if x.shape() != g.mean.shape() {
        let (xr, xc) = x.shape();
        let (mr, mc) = g.mean.shape();
        return Err(NumericsError::ShapeMismatch {
            op: "gaussian_logpdf",
            lhs: vec![xr, xc],
            rhs: vec![mr, mc],
        });
    }
    let d = g.dim() as f64;
    let quad = x.sub(g.mean)?.square().div(g.var)?;
    let per_row = g.var.ln().add(quad)?.sum_rows();
    Ok(per_row.affine(-0.5, -0.5 * d * LN_2PI))
}

/// Total log-density over every row and dimension (a scalar).
pub fn gaussian_logpdf<'t>(x: Var<'t>, g: &DiagGaussian<'t>) -> Result<Var<'t>, NumericsError> {
    Ok(gaussian_logpdf_rows(x, g)?.sum())
}

/// Closed-form `KL(q‖p)` per row, as `[rows, 1]`.
pub fn kl_diag_gaussians_rows<'t>(
    q: &DiagGaussian<'t>,
    p: &DiagGaussian<'t>,
) -> Result<Var<'t>, NumericsError> {
    if q.mean.cols() != p.mean.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "kl_diag_gaussians",
            lhs: vec![q.mean.rows(), q.mean.cols()],
            rhs: vec![p.mean.rows(), p.mean.cols()],
        });
    }
    let diff2 = q.mean.sub(p.mean)?.square();
    let ratio = q.var.add(diff2)?.div(p.var)?;
    let log_ratio = p.var.ln().sub(q.var.ln())?;
    // ½·Σ[log σ_p² − log σ_q² + (σ_q² + Δμ²)/σ_p² − 1]
    let dim = q.dim() as f64;
    Ok(log_ratio.add(ratio)?.sum_rows().affine(0.5, -0.5 * dim))
}

pub fn kl_diag_gaussians<'t>(
    q: &DiagGaussian<'t>,
    p: &DiagGaussian<'t>,
) -> Result<Var<'t>, NumericsError> {
    Ok(kl_diag_gaussians_rows(q, p)?.sum())
}

/// `μ + √var ⊙ ε`, `ε ~ N(0, I)` drawn from `rng`. The noise is a constant
/// on the tape, so gradients reach only the mean and variance.
pub fn reparam_sample<'t, R: Rng + ?Sized>(
    g: &DiagGaussian<'t>,
    rng: &mut R,
) -> Result<Var<'t>, NumericsError> {
    let (rows, dim) = g.mean.shape();
    let eps: Vec<f64> = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    let eps = g.mean.tape().constant(Tensor::matrix(rows, dim, eps));
    let scale = g.var.clamp_min(MIN_VARIANCE).sqrt();
    g.mean.add(scale.mul(eps)?)
}
