//! External nonlocal self-similarity prior: a zero-mean Gaussian mixture
//! over mean-subtracted patch groups, learned by EM from clean images.
//!
//! Component selection for a noisy group inflates each covariance by
//! `sigma^2 I` and picks the maximum-posterior component in the log domain.
//! Each component caches the eigendecomposition of its covariance, which is
//! the prior dictionary used by the denoiser.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::{self, PatchGroup, PatchSpec};
use crate::image::GrayImage;

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)
const MODEL_MAGIC: &[u8; 8] = b"GSR-GMM\0";
const MODEL_VERSION: u32 = 1;

/// One mixture component with cached eigendata of its covariance.
#[derive(Debug, Clone)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    basis: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl GmmComponent {
    /// Orthonormal eigenvector matrix, eigenvalues non-increasing, each
    /// column's first non-negligible entry non-negative.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }
}

/// A trained mixture model over centered patch vectors.
#[derive(Debug, Clone)]
pub struct GmmModel {
    patch_dim: usize,
    components: Vec<GmmComponent>,
}

impl GmmModel {
    /// Builds a model from raw parameters, computing eigendata and checking
    /// the model invariants.
    pub fn from_parameters(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::ModelValidation(
                "component parameter lists are empty or of differing lengths".into(),
            ));
        }
        let patch_dim = means[0].len();
        let mut components = Vec::with_capacity(k);
        for ((weight, mean), covariance) in weights.into_iter().zip(means).zip(covariances) {
            if mean.len() != patch_dim
                || covariance.nrows() != patch_dim
                || covariance.ncols() != patch_dim
            {
                return Err(Error::ModelValidation(
                    "component dimensions are inconsistent".into(),
                ));
            }
            if !weight.is_finite()
                || mean.iter().any(|v| !v.is_finite())
                || covariance.iter().any(|v| !v.is_finite())
            {
                return Err(Error::ModelValidation(
                    "non-finite value in component parameters".into(),
                ));
            }
            if weight <= 0.0 {
                return Err(Error::ModelValidation(format!(
                    "component weight {weight} is not positive"
                )));
            }
            let max_abs = covariance.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let sym_dev = (&covariance - covariance.transpose())
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            if sym_dev > 1e-10 * (1.0 + max_abs) {
                return Err(Error::ModelValidation(
                    "covariance is not symmetric".into(),
                ));
            }
            let (basis, eigenvalues) = sym_eig(&covariance);
            let lambda_max = eigenvalues[0].max(0.0);
            if eigenvalues.iter().any(|&v| v < -1e-10 * lambda_max.max(1.0)) {
                return Err(Error::ModelValidation(
                    "covariance has a negative eigenvalue".into(),
                ));
            }
            let eigenvalues = eigenvalues.map(|v| v.max(0.0));
            components.push(GmmComponent {
                weight,
                mean,
                covariance,
                basis,
                eigenvalues,
            });
        }
        let model = GmmModel {
            patch_dim,
            components,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    /// Patch side length, the square root of the patch dimension.
    pub fn patch_side(&self) -> usize {
        (self.patch_dim as f64).sqrt().round() as usize
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &GmmComponent {
        &self.components[k]
    }

    /// The prior dictionary of component `k`: orthonormal eigenvectors and
    /// non-increasing eigenvalues of its covariance.
    pub fn component_dictionary(&self, k: usize) -> (&DMatrix<f64>, &DVector<f64>) {
        let comp = &self.components[k];
        (&comp.basis, &comp.eigenvalues)
    }

    fn validate(&self) -> Result<()> {
        let weight_sum: f64 = self.components.iter().map(|c| c.weight).sum();
        if (weight_sum - 1.0).abs() > 1e-10 {
            return Err(Error::ModelValidation(format!(
                "component weights sum to {weight_sum}, expected 1"
            )));
        }
        for (k, comp) in self.components.iter().enumerate() {
            let ident_dev = orthonormality_deviation(&comp.basis);
            if ident_dev > 1e-8 {
                return Err(Error::ModelValidation(format!(
                    "component {k} basis deviates from orthonormal by {ident_dev:.2e}"
                )));
            }
            let recon = &comp.basis * DMatrix::from_diagonal(&comp.eigenvalues) * comp.basis.transpose();
            let denom = comp.covariance.norm().max(1e-300);
            let rel = (&recon - &comp.covariance).norm() / denom;
            if rel > 1e-6 {
                return Err(Error::ModelValidation(format!(
                    "component {k} eigendecomposition reconstructs covariance to {rel:.2e} only"
                )));
            }
        }
        Ok(())
    }

    /// Serializes the model: magic, little-endian `u32` version / k /
    /// patch_dim, then per component `f64` weight, mean, row-major
    /// covariance.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d2 = self.patch_dim;
        let mut out =
            Vec::with_capacity(8 + 12 + self.k() * 8 * (1 + d2 + d2 * d2));
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(d2 as u32).to_le_bytes());
        for comp in &self.components {
            out.extend_from_slice(&comp.weight.to_le_bytes());
            for v in comp.mean.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for r in 0..d2 {
                for c in 0..d2 {
                    out.extend_from_slice(&comp.covariance[(r, c)].to_le_bytes());
                }
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a model saved by [`GmmModel::save`], recomputing eigendata and
    /// revalidating all invariants.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let format_err = |detail: &str| Error::ModelFormat {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };

        if bytes.len() < 8 + 12 {
            return Err(format_err("file too short for header"));
        }
        if &bytes[..8] != MODEL_MAGIC {
            return Err(format_err("bad magic"));
        }
        let read_u32 = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = read_u32(8);
        if version != MODEL_VERSION {
            return Err(format_err(&format!("unsupported version {version}")));
        }
        let k = read_u32(12) as usize;
        let d2 = read_u32(16) as usize;
        if k == 0 || d2 == 0 {
            return Err(format_err("zero component count or patch dimension"));
        }
        let per_comp = 8 * (1 + d2 + d2 * d2);
        let expected = 20 + k * per_comp;
        if bytes.len() != expected {
            return Err(format_err(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }

        let mut off = 20;
        let read_f64 = |off: &mut usize| {
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v
        };
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for _ in 0..k {
            weights.push(read_f64(&mut off));
            means.push(DVector::from_fn(d2, |_, _| read_f64(&mut off)));
            let mut cov = DMatrix::zeros(d2, d2);
            for r in 0..d2 {
                for c in 0..d2 {
                    cov[(r, c)] = read_f64(&mut off);
                }
            }
            covs.push(cov);
        }
        GmmModel::from_parameters(weights, means, covs)
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted
/// non-increasing and each eigenvector's first non-negligible entry forced
/// non-negative.
pub fn sym_eig(mat: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let eig = mat.clone().symmetric_eigen();
    let n = mat.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let mut basis = DMatrix::zeros(n, n);
    let mut values = DVector::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        values[dst] = eig.eigenvalues[src];
        basis.set_column(dst, &eig.eigenvectors.column(src));
        let col = basis.column(dst);
        let first = col.iter().find(|v| v.abs() > 1e-12);
        if matches!(first, Some(v) if *v < 0.0) {
            basis.column_mut(dst).neg_mut();
        }
    }
    (basis, values)
}

fn orthonormality_deviation(basis: &DMatrix<f64>) -> f64 {
    let n = basis.ncols();
    let gram = basis.transpose() * basis;
    let mut dev = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let target = if r == c { 1.0 } else { 0.0 };
            dev = dev.max((gram[(r, c)] - target).abs());
        }
    }
    dev
}

/// Configuration for prior training.
#[derive(Debug, Clone)]
pub struct TrainingConfig {
    /// Number of training groups to sample.
    pub n_groups: usize,
    /// Grouping geometry used during sampling.
    pub spec: PatchSpec,
    /// EM iteration cap.
    pub max_em_iters: usize,
    /// Relative mean-log-likelihood tolerance for early stopping.
    pub tolerance: f64,
    /// Eigenvalue floor applied to every covariance after each M-step.
    pub covariance_floor: f64,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(n_groups: usize, spec: PatchSpec, seed: u64) -> Self {
        TrainingConfig {
            n_groups,
            spec,
            max_em_iters: 30,
            tolerance: 1e-6,
            covariance_floor: 1e-4,
            seed,
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.n_groups < k {
            return Err(Error::InvalidTrainingConfig(format!(
                "n_groups {} below component count {k}",
                self.n_groups
            )));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::InvalidTrainingConfig(
                "covariance floor must be positive".into(),
            ));
        }
        if self.max_em_iters == 0 {
            return Err(Error::InvalidTrainingConfig(
                "max_em_iters must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Draws `n_groups` centered training groups from uniformly random
/// (image, reference position) pairs; deterministic per seed.
pub fn sample_training_groups(
    corpus: &[GrayImage],
    cfg: &TrainingConfig,
) -> Result<Vec<PatchGroup>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let d = cfg.spec.d;
    for img in corpus {
        if img.width() < d || img.height() < d {
            return Err(Error::ImageTooSmall {
                width: img.width(),
                height: img.height(),
                d,
            });
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let draws: Vec<(usize, (usize, usize))> = (0..cfg.n_groups)
        .map(|_| {
            let idx = rng.random_range(0..corpus.len());
            let img = &corpus[idx];
            let r = rng.random_range(0..=img.height() - d);
            let c = rng.random_range(0..=img.width() - d);
            (idx, (r, c))
        })
        .collect();
    draws
        .into_par_iter()
        .map(|(idx, pos)| {
            let group = grouping::block_match(&corpus[idx], pos, &cfg.spec)?;
            Ok(grouping::subtract_group_mean(group))
        })
        .collect()
}

/// Per-iteration mean log-likelihood trace of an EM run.
#[derive(Debug, Clone)]
pub struct EmReport {
    /// Mean per-group log-likelihood after each E-step; non-decreasing.
    pub mean_log_likelihood: Vec<f64>,
}

struct GroupStats {
    scatter: DMatrix<f64>,
    members: f64,
}

struct ComponentScorer {
    log_weight: f64,
    log_det: f64,
    precision: DMatrix<f64>,
}

impl ComponentScorer {
    fn new(weight: f64, basis: &DMatrix<f64>, eigenvalues: &DVector<f64>, sigma_sq: f64) -> Self {
        let inflated = eigenvalues.map(|v| (v + sigma_sq).max(1e-12));
        let log_det = inflated.iter().map(|v| v.ln()).sum();
        let scaled = DMatrix::from_fn(basis.nrows(), basis.ncols(), |r, c| {
            basis[(r, c)] / inflated[c]
        });
        let precision = scaled * basis.transpose();
        ComponentScorer {
            log_weight: weight.ln(),
            log_det,
            precision,
        }
    }

    /// Joint log-density of a group's patches plus the log mixture weight.
    fn score(&self, stats_scatter: &DMatrix<f64>, members: f64, include_weight: bool) -> f64 {
        let d2 = self.precision.nrows() as f64;
        let quad = self.precision.dot(stats_scatter);
        let base = -0.5 * (members * d2 * LN_2PI + members * self.log_det + quad);
        if include_weight {
            base + self.log_weight
        } else {
            base
        }
    }
}

fn log_softmax(scores: &[f64]) -> (Vec<f64>, f64) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let resp = scores.iter().map(|s| (s - lse).exp()).collect();
    (resp, lse)
}

/// Learns a zero-mean mixture over centered groups by EM.
///
/// Each group carries one responsibility vector computed from the sum of its
/// members' per-patch Gaussian log-densities plus the log mixture weight.
/// Covariances are symmetrized and eigenvalue-floored after every M-step;
/// component means stay pinned at zero. Returns the model together with the
/// mean log-likelihood trace.
pub fn train_em(
    groups: Vec<PatchGroup>,
    k: usize,
    cfg: &TrainingConfig,
) -> Result<(GmmModel, EmReport)> {
    cfg.validate(k)?;
    let n = groups.len();
    if n < k || n == 0 {
        return Err(Error::InvalidTrainingConfig(format!(
            "{n} groups cannot support {k} components"
        )));
    }
    let d2 = groups[0].patch_dim();
    if groups.iter().any(|g| g.patch_dim() != d2) {
        return Err(Error::InvalidTrainingConfig(
            "groups have differing patch dimensions".into(),
        ));
    }

    // Reduce each group to the sufficient statistics of a zero-mean model.
    let stats: Vec<GroupStats> = groups
        .into_par_iter()
        .map(|g| GroupStats {
            members: g.members() as f64,
            scatter: &g.matrix * g.matrix.transpose(),
        })
        .collect();
    let total_energy: f64 = stats.iter().map(|s| s.scatter.trace()).sum();
    if total_energy <= 1e-12 {
        return Err(Error::DegenerateTrainingData(
            "all training groups are zero after centering".into(),
        ));
    }

    // Shuffled round-robin hard init: random per seed, and every component
    // starts non-empty so all weights stay positive.
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut assignment: Vec<usize> = (0..n).map(|i| i % k).collect();
    assignment.shuffle(&mut rng);
    let mut responsibilities: Vec<Vec<f64>> = assignment
        .iter()
        .map(|&z| {
            let mut r = vec![0.0; k];
            r[z] = 1.0;
            r
        })
        .collect();

    let m_step = |responsibilities: &[Vec<f64>]| -> (Vec<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let per_component: Vec<(f64, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> = (0..k)
            .into_par_iter()
            .map(|comp| {
                let mut acc = DMatrix::zeros(d2, d2);
                let mut group_mass = 0.0;
                let mut patch_mass = 0.0;
                for (resp, st) in responsibilities.iter().zip(&stats) {
                    let r = resp[comp];
                    if r > 0.0 {
                        acc += &st.scatter * r;
                        group_mass += r;
                        patch_mass += r * st.members;
                    }
                }
                let mut cov = if patch_mass > 0.0 {
                    acc / patch_mass
                } else {
                    DMatrix::zeros(d2, d2)
                };
                // exact symmetry, then eigenvalue floor
                cov = (&cov + cov.transpose()) * 0.5;
                let (basis, values) = sym_eig(&cov);
                let floored = values.map(|v| v.max(cfg.covariance_floor));
                let cov = &basis * DMatrix::from_diagonal(&floored) * basis.transpose();
                let cov = (&cov + cov.transpose()) * 0.5;
                (group_mass, cov, basis, floored)
            })
            .collect();
        let mut w: Vec<f64> = per_component.iter().map(|c| (c.0 / n as f64).max(1e-12)).collect();
        let w_sum: f64 = w.iter().sum();
        for v in &mut w {
            *v /= w_sum;
        }
        let mut cs = Vec::with_capacity(k);
        let mut bs = Vec::with_capacity(k);
        let mut es = Vec::with_capacity(k);
        for (_, cov, basis, values) in per_component {
            cs.push(cov);
            bs.push(basis);
            es.push(values);
        }
        (w, cs, bs, es)
    };

    let (mut weights, mut covs, mut bases, mut eigvals) = m_step(&responsibilities);

    let mut trace = Vec::new();
    for _ in 0..cfg.max_em_iters {
        // E-step under the current parameters.
        let scorers: Vec<ComponentScorer> = (0..k)
            .map(|comp| ComponentScorer::new(weights[comp], &bases[comp], &eigvals[comp], 0.0))
            .collect();
        let e_results: Vec<(Vec<f64>, f64)> = stats
            .par_iter()
            .map(|st| {
                let scores: Vec<f64> = scorers
                    .iter()
                    .map(|s| s.score(&st.scatter, st.members, true))
                    .collect();
                log_softmax(&scores)
            })
            .collect();
        let mean_ll =
            e_results.iter().map(|(_, lse)| lse).sum::<f64>() / n as f64;
        trace.push(mean_ll);
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if (mean_ll - prev).abs() <= cfg.tolerance * prev.abs().max(1.0) {
                break;
            }
        }
        responsibilities = e_results.into_iter().map(|(r, _)| r).collect();
        (weights, covs, bases, eigvals) = m_step(&responsibilities);
    }
    if trace.is_empty() || trace.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateTrainingData(
            "EM log-likelihood became non-finite".into(),
        ));
    }

    let means = vec![DVector::zeros(d2); k];
    let model = GmmModel::from_parameters(weights, means, covs)?;
    Ok((
        model,
        EmReport {
            mean_log_likelihood: trace,
        },
    ))
}

/// Precomputed per-noise-level state for posterior component selection.
pub struct ComponentSelector {
    scorers: Vec<ComponentScorer>,
    include_weights: bool,
    patch_dim: usize,
}

impl ComponentSelector {
    pub fn new(model: &GmmModel, sigma: f64, include_weights: bool) -> Self {
        let sigma_sq = sigma * sigma;
        let scorers = model
            .components()
            .iter()
            .map(|c| ComponentScorer::new(c.weight, &c.basis, &c.eigenvalues, sigma_sq))
            .collect();
        ComponentSelector {
            scorers,
            include_weights,
            patch_dim: model.patch_dim(),
        }
    }

    /// Maximum-posterior component for a centered noisy group; ties go to the
    /// smallest index.
    pub fn select(&self, group: &PatchGroup) -> usize {
        debug_assert_eq!(group.patch_dim(), self.patch_dim);
        let scatter = &group.matrix * group.matrix.transpose();
        self.select_from_scatter(&scatter, group.members() as f64)
    }

    pub fn select_from_scatter(&self, scatter: &DMatrix<f64>, members: f64) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, scorer) in self.scorers.iter().enumerate() {
            let s = scorer.score(scatter, members, self.include_weights);
            if s > best_score {
                best = k;
                best_score = s;
            }
        }
        best
    }

    /// Log-domain posterior scores, one per component (unnormalized).
    pub fn scores(&self, group: &PatchGroup) -> Vec<f64> {
        let scatter = &group.matrix * group.matrix.transpose();
        self.scorers
            .iter()
            .map(|s| s.score(&scatter, group.members() as f64, self.include_weights))
            .collect()
    }
}

/// Posterior component selection with noise-inflated covariances, including
/// the log mixture weight.
pub fn select_component(model: &GmmModel, group: &PatchGroup, sigma: f64) -> usize {
    ComponentSelector::new(model, sigma, true).select(group)
}
