//! Iterative group-sparsity-residual denoising.
//!
//! Each outer iteration regularizes the current estimate back toward the
//! noisy input, re-estimates the working noise level, and processes every
//! reference patch group: select a prior mixture component, build the prior
//! and group PCA dictionaries, compute both code matrices, and soft-threshold
//! the noisy codes toward the prior-estimated ones before reconstructing and
//! aggregating.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{sym_eig, ComponentSelector, GmmModel};
use crate::grouping::{
    aggregate, block_match, reference_positions, subtract_group_mean, PatchGroup, PatchSpec,
};
use crate::image::GrayImage;
use crate::schedule;

/// Lower bound for per-row residual deviations, avoiding division by zero in
/// the threshold formula.
pub const SIGMA_FLOOR: f64 = 1e-4;

const TWO_SQRT_2: f64 = 2.0 * std::f64::consts::SQRT_2;

/// Denoising parameters: one schedule row plus iteration count, stride and
/// the component-weight switch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseParams {
    /// Noise standard deviation of the input, on the [0, 255] scale.
    pub sigma: f64,
    /// Mixture size the schedule prescribes for this noise level (used when
    /// training a matching prior; denoising takes whatever the model has).
    pub k: usize,
    /// Search window side in pixels.
    pub window: usize,
    /// Patch side in pixels.
    pub d: usize,
    /// Patches per group.
    pub m: usize,
    /// Threshold scale constant.
    pub c: f64,
    /// Iterative-regularization step.
    pub rho: f64,
    /// Noise-decay factor.
    pub gamma: f64,
    /// Outer iteration count.
    pub iters: usize,
    /// Reference-patch stride.
    pub stride: usize,
    /// Include log mixture weights in component selection.
    pub component_weights: bool,
}

impl DenoiseParams {
    /// Built-in schedule lookup by noise level.
    pub fn from_sigma(sigma: f64) -> Self {
        let row = schedule::row_for_sigma(sigma);
        DenoiseParams {
            sigma,
            k: row.k,
            window: row.window,
            d: row.d,
            m: row.m,
            c: row.c,
            rho: row.rho,
            gamma: row.gamma,
            iters: schedule::default_iters(sigma),
            stride: schedule::default_stride(row.d),
            component_weights: true,
        }
    }

    pub fn patch_spec(&self) -> Result<PatchSpec> {
        PatchSpec::new(self.d, self.m, self.window, self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(Error::InvalidSigma(self.sigma));
        }
        if !(self.c > 0.0) || !(self.gamma > 0.0) {
            return Err(Error::InvalidDenoiseParams(
                "c and gamma must be positive".into(),
            ));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidDenoiseParams(format!(
                "rho {} outside (0, 1]",
                self.rho
            )));
        }
        if self.iters == 0 {
            return Err(Error::InvalidDenoiseParams("iters must be >= 1".into()));
        }
        self.patch_spec().map(|_| ())
    }
}

/// Noisy codes, prior-estimated codes, their residual, and the per-row
/// deviations/thresholds driving the shrinkage.
#[derive(Debug, Clone)]
pub struct GroupCodes {
    /// Codes of the group under its own PCA dictionary.
    pub noisy: DMatrix<f64>,
    /// Codes of the group under the selected prior dictionary.
    pub estimated: DMatrix<f64>,
    /// `noisy - estimated`.
    pub residual: DMatrix<f64>,
    /// Per-row soft thresholds; zero until [`lambda_schedule`] runs.
    pub lambda_rows: DVector<f64>,
    /// Per-row residual deviations, floored at [`SIGMA_FLOOR`].
    pub sigma_rows: DVector<f64>,
}

/// State carried between outer iterations.
#[derive(Debug, Clone)]
pub struct IterationState {
    /// Current regularized image the groups are extracted from.
    pub regularized: GrayImage,
    /// Current estimate of the clean image.
    pub estimate: GrayImage,
    /// Working noise level for this iteration.
    pub sigma_t: f64,
    /// Iteration index, starting at 1.
    pub t: usize,
}

impl IterationState {
    /// First-iteration state: the estimate starts as the noisy image itself,
    /// so the regularized image equals the input and `sigma_t` the nominal
    /// noise level.
    pub fn initial(noisy: &GrayImage, sigma: f64) -> Self {
        IterationState {
            regularized: noisy.clone(),
            estimate: noisy.clone(),
            sigma_t: sigma,
            t: 1,
        }
    }

    /// Folds a new aggregate estimate in, blending a `rho` fraction of the
    /// input residue back and re-estimating the working noise level as
    /// `gamma * sqrt(max(sigma^2 - mean((noisy - estimate)^2), 0))`.
    pub fn advance(self, noisy: &GrayImage, estimate: GrayImage, p: &DenoiseParams) -> Self {
        let n = noisy.data().len() as f64;
        let mean_sq: f64 = noisy
            .data()
            .iter()
            .zip(estimate.data())
            .map(|(&y, &x)| (y - x) * (y - x))
            .sum::<f64>()
            / n;
        let sigma_t = p.gamma * (p.sigma * p.sigma - mean_sq).max(0.0).sqrt();
        let regularized_data = estimate
            .data()
            .iter()
            .zip(noisy.data())
            .map(|(&x, &y)| x + p.rho * (y - x))
            .collect();
        let regularized =
            GrayImage::new(noisy.width(), noisy.height(), regularized_data).expect("same shape");
        IterationState {
            regularized,
            estimate,
            sigma_t,
            t: self.t + 1,
        }
    }
}

/// PCA dictionary of a centered group: eigendecomposition of
/// `(1/m) * Y * Y^T`, with the same sorting and sign conventions as the prior
/// dictionaries.
pub fn group_dictionary(group: &PatchGroup) -> (DMatrix<f64>, DVector<f64>) {
    let scatter = &group.matrix * group.matrix.transpose();
    group_dictionary_from_scatter(&scatter, group.members())
}

fn group_dictionary_from_scatter(scatter: &DMatrix<f64>, members: usize) -> (DMatrix<f64>, DVector<f64>) {
    let cov = scatter / members as f64;
    sym_eig(&cov)
}

/// Computes both code matrices of a centered group; the dictionaries are
/// orthonormal, so the inverse is the transpose.
pub fn compute_codes(
    group: &PatchGroup,
    prior_basis: &DMatrix<f64>,
    group_basis: &DMatrix<f64>,
) -> GroupCodes {
    let noisy = group_basis.transpose() * &group.matrix;
    let estimated = prior_basis.transpose() * &group.matrix;
    let residual = &noisy - &estimated;
    let rows = group.patch_dim();
    GroupCodes {
        noisy,
        estimated,
        residual,
        lambda_rows: DVector::zeros(rows),
        sigma_rows: DVector::zeros(rows),
    }
}

/// Fills the per-row deviations and thresholds:
/// `sigma_row = max(sqrt(max(var(row of residual) - 2 * sigma_t^2, 0)), SIGMA_FLOOR)`
/// and `lambda_row = c * 2 * sqrt(2) * sigma_t^2 / sigma_row`.
///
/// `sigma_row` estimates the deviation the residual row would have without
/// noise: the noise reaching row `j` through the two dictionaries,
/// `(d_j - u_j)^T n`, carries variance `sigma_t^2 * ||d_j - u_j||^2`, which is
/// `2 * sigma_t^2` for incoherent orthonormal columns, so that much is
/// subtracted before the square root. Rows whose disagreement is explained by
/// noise alone hit the floor and collapse onto the prior estimate.
pub fn lambda_schedule(codes: &mut GroupCodes, sigma_t: f64, c: f64) {
    let m = codes.residual.ncols() as f64;
    let noise_var = 2.0 * sigma_t * sigma_t;
    for j in 0..codes.residual.nrows() {
        let row = codes.residual.row(j);
        let mean: f64 = row.iter().sum::<f64>() / m;
        let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let sigma_row = (var - noise_var).max(0.0).sqrt().max(SIGMA_FLOOR);
        codes.sigma_rows[j] = sigma_row;
        codes.lambda_rows[j] = c * TWO_SQRT_2 * sigma_t * sigma_t / sigma_row;
    }
}

#[inline]
fn soft(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

/// Per-coefficient shrinkage of the noisy codes toward the estimated ones:
/// `soft(noisy - estimated, lambda_row) + estimated`, the exact minimizer of
/// `0.5 * (x - noisy)^2 + lambda * |x - estimated|`.
pub fn shrink(codes: &GroupCodes) -> DMatrix<f64> {
    let mut out = codes.estimated.clone();
    for j in 0..out.nrows() {
        let lambda = codes.lambda_rows[j];
        for l in 0..out.ncols() {
            out[(j, l)] += soft(codes.noisy[(j, l)] - codes.estimated[(j, l)], lambda);
        }
    }
    out
}

/// Shrinkage objective `0.5 * ||noisy - X||_F^2 + sum_j lambda_j * ||X_j - estimated_j||_1`
/// used to check that the closed form really minimizes it.
#[cfg(any(test, debug_assertions))]
pub fn shrinkage_objective(codes: &GroupCodes, candidate: &DMatrix<f64>) -> f64 {
    let mut fidelity = 0.0;
    let mut penalty = 0.0;
    for j in 0..candidate.nrows() {
        for l in 0..candidate.ncols() {
            let x = candidate[(j, l)];
            let df = x - codes.noisy[(j, l)];
            fidelity += df * df;
            penalty += codes.lambda_rows[j] * (x - codes.estimated[(j, l)]).abs();
        }
    }
    0.5 * fidelity + penalty
}

/// Runs the full iterative denoiser and clamps the final estimate to
/// `[0, 255]`.
pub fn denoise(noisy: &GrayImage, model: &GmmModel, p: &DenoiseParams) -> Result<GrayImage> {
    p.validate()?;
    if model.patch_dim() != p.d * p.d {
        return Err(Error::ModelPatchMismatch {
            model_d: model.patch_side(),
            requested_d: p.d,
        });
    }
    let spec = p.patch_spec()?;
    let (width, height) = (noisy.width(), noisy.height());

    let mut state = IterationState::initial(noisy, p.sigma);
    for _ in 0..p.iters {
        let positions = reference_positions(&state.regularized, &spec)?;
        let selector = ComponentSelector::new(model, state.sigma_t, p.component_weights);
        let regularized = &state.regularized;
        let sigma_t = state.sigma_t;
        let processed: Result<Vec<PatchGroup>> = positions
            .into_par_iter()
            .map(|pos| {
                let group = block_match(regularized, pos, &spec)?;
                Ok(process_group(group, model, &selector, sigma_t, p.c))
            })
            .collect();
        let estimate = aggregate(&processed?, width, height, Some(regularized))?;
        state = state.advance(noisy, estimate, p);
    }
    Ok(state.estimate.clamped())
}

/// Centers one matched group, shrinks its codes, and reconstructs it with the
/// group mean restored.
fn process_group(
    group: PatchGroup,
    model: &GmmModel,
    selector: &ComponentSelector,
    sigma_t: f64,
    c: f64,
) -> PatchGroup {
    let mut group = subtract_group_mean(group);
    let scatter = &group.matrix * group.matrix.transpose();
    let component = selector.select_from_scatter(&scatter, group.members() as f64);
    let (prior_basis, _) = model.component_dictionary(component);
    let (group_basis, _) = group_dictionary_from_scatter(&scatter, group.members());
    let mut codes = compute_codes(&group, prior_basis, &group_basis);
    lambda_schedule(&mut codes, sigma_t, c);
    let shrunk = shrink(&codes);
    #[cfg(debug_assertions)]
    {
        let at_min = shrinkage_objective(&codes, &shrunk);
        let slack = 1e-9 * (1.0 + at_min.abs());
        debug_assert!(at_min <= shrinkage_objective(&codes, &codes.noisy) + slack);
        debug_assert!(at_min <= shrinkage_objective(&codes, &codes.estimated) + slack);
    }
    group.matrix = group_basis * shrunk;
    group.restore_mean();
    group
}
