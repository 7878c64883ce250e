//! Residual statistics and the PSNR benchmark harness.
//!
//! One pass of the group pipeline (no shrinkage) collects the code residuals
//! of a noisy image; Gaussian, Laplacian and hyper-Laplacian densities are
//! then fitted and compared by a log-domain histogram error. The heavier
//! side of the module benchmarks the denoiser over a directory of clean
//! images at several noise levels.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use statrs::function::gamma::{gamma, ln_gamma};

use crate::denoiser::{
    compute_codes, group_dictionary, DenoiseParams, GroupCodes, IterationState,
};
use crate::error::{Error, Result};
use crate::gmm::{ComponentSelector, GmmModel};
use crate::grouping::{block_match, reference_positions, subtract_group_mean};
use crate::image::{add_awgn, psnr, GrayImage, NoiseSpec};
use crate::schedule;

/// Number of histogram bins used for the log-domain fit error; odd so one
/// bin is centered on zero where the residual distribution peaks.
pub const FIT_BINS: usize = 129;

/// All residual entries gathered over the groups of one image at one noise
/// level.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    pub values: Vec<f64>,
    pub source: String,
    pub sigma: f64,
}

impl ResidualSample {
    pub fn new(values: Vec<f64>, source: impl Into<String>, sigma: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateSample("no residual values".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateSample(
                "non-finite residual values".into(),
            ));
        }
        Ok(ResidualSample {
            values,
            source: source.into(),
            sigma,
        })
    }
}

/// Runs one first-iteration pass of the group pipeline, without shrinkage,
/// and concatenates the residual entries of every group.
pub fn collect_residuals(
    noisy: &GrayImage,
    model: &GmmModel,
    p: &DenoiseParams,
    source: &str,
) -> Result<ResidualSample> {
    collect_residuals_inner(noisy, model, p, source, false)
}

/// `mirror_prior` substitutes the group's own dictionary for the prior one,
/// which forces every residual to zero; kept for tests.
pub(crate) fn collect_residuals_inner(
    noisy: &GrayImage,
    model: &GmmModel,
    p: &DenoiseParams,
    source: &str,
    mirror_prior: bool,
) -> Result<ResidualSample> {
    p.validate()?;
    if model.patch_dim() != p.d * p.d {
        return Err(Error::ModelPatchMismatch {
            model_d: model.patch_side(),
            requested_d: p.d,
        });
    }
    let spec = p.patch_spec()?;
    let state = IterationState::initial(noisy, p.sigma);
    let selector = ComponentSelector::new(model, state.sigma_t, p.component_weights);
    let positions = reference_positions(&state.regularized, &spec)?;
    let per_group: Result<Vec<Vec<f64>>> = positions
        .into_par_iter()
        .map(|pos| {
            let group = subtract_group_mean(block_match(&state.regularized, pos, &spec)?);
            let codes = residual_codes(&group, model, &selector, mirror_prior);
            Ok(codes.residual.as_slice().to_vec())
        })
        .collect();
    let mut values = Vec::new();
    for chunk in per_group? {
        values.extend(chunk);
    }
    ResidualSample::new(values, source, p.sigma)
}

fn residual_codes(
    group: &crate::grouping::PatchGroup,
    model: &GmmModel,
    selector: &ComponentSelector,
    mirror_prior: bool,
) -> GroupCodes {
    let (group_basis, _) = group_dictionary(group);
    if mirror_prior {
        compute_codes(group, &group_basis, &group_basis)
    } else {
        let component = selector.select(group);
        let (prior_basis, _) = model.component_dictionary(component);
        compute_codes(group, prior_basis, &group_basis)
    }
}

/// Candidate residual densities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistFamily {
    Gaussian,
    Laplacian,
    HyperLaplacian,
}

impl DistFamily {
    pub fn name(self) -> &'static str {
        match self {
            DistFamily::Gaussian => "gaussian",
            DistFamily::Laplacian => "laplacian",
            DistFamily::HyperLaplacian => "hyper-laplacian",
        }
    }
}

/// Family-specific fitted parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitParams {
    Gaussian { std: f64 },
    Laplacian { scale: f64 },
    HyperLaplacian { scale: f64, exponent: f64 },
}

/// A fitted density plus its log-domain histogram error.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionFit {
    pub family: DistFamily,
    pub params: FitParams,
    pub log_fit_error: f64,
}

impl DistributionFit {
    pub fn density(&self, x: f64) -> f64 {
        match self.params {
            FitParams::Gaussian { std } => {
                (-0.5 * (x / std) * (x / std)).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
            }
            FitParams::Laplacian { scale } => (-x.abs() / scale).exp() / (2.0 * scale),
            FitParams::HyperLaplacian { scale, exponent } => {
                let norm = 2.0 * scale * gamma(1.0 + 1.0 / exponent);
                (-(x.abs() / scale).powf(exponent)).exp() / norm
            }
        }
    }

    /// Numerically integrates the density over effectively all of its mass.
    ///
    /// Gaussian and Laplacian integrate directly over +-20 scale parameters.
    /// The hyper-Laplacian's tails reach far beyond that for exponents below
    /// one, so it is integrated under the substitution `u = (x/scale)^a`,
    /// which maps its whole mass onto a compact smooth integrand.
    pub fn integrate_density(&self) -> f64 {
        match self.params {
            FitParams::Gaussian { std } => 2.0 * trapezoid(0.0, 20.0 * std, 200_000, |x| self.density(x)),
            FitParams::Laplacian { scale } => {
                2.0 * trapezoid(0.0, 20.0 * scale, 200_000, |x| self.density(x))
            }
            FitParams::HyperLaplacian { scale, exponent } => {
                let a = exponent;
                let x_of_u = |u: f64| scale * u.powf(1.0 / a);
                // dx = (scale/a) * u^(1/a - 1) du
                let integrand = |u: f64| {
                    if u <= 0.0 {
                        return 0.0;
                    }
                    2.0 * self.density(x_of_u(u)) * (scale / a) * u.powf(1.0 / a - 1.0)
                };
                trapezoid(0.0, 200.0, 200_000, integrand)
            }
        }
    }
}

fn trapezoid(lo: f64, hi: f64, steps: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / steps as f64;
    let mut acc = 0.5 * (f(lo) + f(hi));
    for i in 1..steps {
        acc += f(lo + i as f64 * h);
    }
    acc * h
}

/// Fits one density family to a residual sample and scores it with the
/// log-domain histogram error.
///
/// Gaussian: maximum-likelihood deviation about zero. Laplacian:
/// maximum-likelihood scale `mean(|x|)`. Hyper-Laplacian: exponent grid
/// `0.1, 0.2, ..., 1.0` with a first-absolute-moment-matched scale per
/// exponent, scored by sample log-likelihood.
pub fn fit(sample: &ResidualSample, family: DistFamily) -> Result<DistributionFit> {
    const MIN_SAMPLES: usize = 100;
    if sample.values.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: sample.values.len(),
        });
    }
    // Sorting first makes every reduction independent of sample order.
    let mut sorted = sample.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = sorted.len() as f64;
    let max_abs = sorted
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::DegenerateSample(
            "all residual values are zero".into(),
        ));
    }
    let mean_abs = sorted.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = sorted.iter().map(|v| v * v).sum::<f64>() / n;

    let params = match family {
        DistFamily::Gaussian => FitParams::Gaussian {
            std: mean_sq.sqrt(),
        },
        DistFamily::Laplacian => FitParams::Laplacian { scale: mean_abs },
        DistFamily::HyperLaplacian => {
            let mut best: Option<(f64, FitParams)> = None;
            for step in 1..=10 {
                let a = step as f64 / 10.0;
                let scale = mean_abs * gamma(1.0 / a) / gamma(2.0 / a);
                let log_norm = (2.0 * scale).ln() + ln_gamma(1.0 + 1.0 / a);
                let ll = -sorted
                    .iter()
                    .map(|v| (v.abs() / scale).powf(a))
                    .sum::<f64>()
                    - n * log_norm;
                if best.as_ref().map_or(true, |(b, _)| ll > *b) {
                    best = Some((ll, FitParams::HyperLaplacian { scale, exponent: a }));
                }
            }
            best.expect("non-empty exponent grid").1
        }
    };

    let fit = DistributionFit {
        family,
        params,
        log_fit_error: 0.0,
    };
    let log_fit_error = log_histogram_error(&sorted, max_abs, &fit);
    Ok(DistributionFit {
        log_fit_error,
        ..fit
    })
}

/// Mean squared difference between log empirical and log model density over
/// the occupied bins of a symmetric 129-bin histogram.
fn log_histogram_error(values: &[f64], max_abs: f64, fit: &DistributionFit) -> f64 {
    let bins = bin_counts(values, max_abs, FIT_BINS);
    let width = 2.0 * max_abs / FIT_BINS as f64;
    let n = values.len() as f64;
    let mut err = 0.0;
    let mut occupied = 0usize;
    for (i, &count) in bins.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let center = -max_abs + (i as f64 + 0.5) * width;
        let empirical = count as f64 / (n * width);
        let model = fit.density(center);
        let diff = empirical.ln() - model.ln();
        err += diff * diff;
        occupied += 1;
    }
    err / occupied as f64
}

fn bin_counts(values: &[f64], max_abs: f64, bins: usize) -> Vec<u64> {
    let width = 2.0 * max_abs / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = (((v + max_abs) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// One histogram bin of a residual sample: center, raw count, and empirical
/// density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub center: f64,
    pub count: u64,
    pub density: f64,
}

/// The symmetric histogram backing the fit error, for plotting.
pub fn histogram(sample: &ResidualSample) -> Result<Vec<HistogramBin>> {
    let max_abs = sample.values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if max_abs == 0.0 {
        return Err(Error::DegenerateSample(
            "all residual values are zero".into(),
        ));
    }
    let counts = bin_counts(&sample.values, max_abs, FIT_BINS);
    let width = 2.0 * max_abs / FIT_BINS as f64;
    let n = sample.values.len() as f64;
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            center: -max_abs + (i as f64 + 0.5) * width,
            count,
            density: count as f64 / (n * width),
        })
        .collect())
}

/// One benchmark cell: an image at one noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub image: String,
    pub sigma: f64,
    pub psnr_noisy: f64,
    pub psnr_denoised: f64,
}

/// Per-cell rows plus per-noise-level averages.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub averages: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,sigma,psnr_noisy,psnr_denoised\n");
        for row in self.rows.iter().chain(&self.averages) {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4}",
                row.image, row.sigma, row.psnr_noisy, row.psnr_denoised
            );
        }
        out
    }
}

/// Benchmarks the denoiser over every PGM in `test_dir` (lexicographic
/// filename order) at each noise level.
///
/// Noise synthesis is seeded per cell from `seed`, so a rerun reproduces the
/// report exactly. The schedule supplies the per-level parameters, except
/// that the patch side always follows the supplied model.
pub fn bench(
    test_dir: impl AsRef<Path>,
    model: &GmmModel,
    sigmas: &[f64],
    seed: u64,
) -> Result<BenchReport> {
    let test_dir = test_dir.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(test_dir)
        .map_err(|e| Error::io(test_dir, e))?
        .filter_map(|entry| {
            let entry = entry.ok()?;
            let name = entry.file_name().into_string().ok()?;
            if name.to_ascii_lowercase().ends_with(".pgm") {
                Some(name)
            } else {
                None
            }
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut rows = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let clean = GrayImage::load_pgm(test_dir.join(name))?;
        for (j, &sigma) in sigmas.iter().enumerate() {
            let noise = NoiseSpec::new(sigma, cell_seed(seed, i, j))?;
            let noisy = add_awgn(&clean, &noise);
            let params = params_for_model(sigma, model);
            let denoised = crate::denoiser::denoise(&noisy, model, &params)?;
            rows.push(BenchRow {
                image: name.clone(),
                sigma,
                psnr_noisy: psnr(&clean, &noisy)?,
                psnr_denoised: psnr(&clean, &denoised)?,
            });
        }
    }

    let averages = sigmas
        .iter()
        .map(|&sigma| {
            let cells: Vec<&BenchRow> = rows.iter().filter(|r| r.sigma == sigma).collect();
            let n = cells.len() as f64;
            BenchRow {
                image: "average".into(),
                sigma,
                psnr_noisy: cells.iter().map(|r| r.psnr_noisy).sum::<f64>() / n,
                psnr_denoised: cells.iter().map(|r| r.psnr_denoised).sum::<f64>() / n,
            }
        })
        .collect();

    Ok(BenchReport { rows, averages })
}

/// Schedule parameters for `sigma` with the patch side pinned to the model.
pub fn params_for_model(sigma: f64, model: &GmmModel) -> DenoiseParams {
    let mut params = DenoiseParams::from_sigma(sigma);
    let model_d = model.patch_side();
    if params.d != model_d {
        params.d = model_d;
        params.stride = schedule::default_stride(model_d);
    }
    params
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn cell_seed(seed: u64, image_idx: usize, sigma_idx: usize) -> u64 {
    splitmix64(splitmix64(seed.wrapping_add(image_idx as u64 + 1)).wrapping_add(sigma_idx as u64 + 1))
}
