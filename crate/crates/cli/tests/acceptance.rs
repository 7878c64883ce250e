//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its runtime.
//!
//! Run with `cargo test -p gsr-cli --test acceptance -- --nocapture` to see
//! the per-criterion lines. The heavier criteria share one trained prior.

use std::panic::{catch_unwind, resume_unwind, UnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use gsr_core::analysis::{collect_residuals, fit, DistFamily};
use gsr_core::denoiser::{denoise, group_dictionary, DenoiseParams};
use gsr_core::gmm::{sym_eig, train_em, GmmModel, TrainingConfig};
use gsr_core::grouping::{block_match, PatchGroup, PatchSpec};
use gsr_core::image::{add_awgn, psnr, GrayImage, NoiseSpec};
use gsr_core::schedule::SCHEDULE;

fn criterion(name: &str, budget_secs: f64, body: impl FnOnce() + UnwindSafe) {
    let start = Instant::now();
    let result = catch_unwind(body);
    let elapsed = start.elapsed().as_secs_f64();
    match result {
        Ok(()) if elapsed < budget_secs => {
            println!("[acceptance] {name}: PASS ({elapsed:.1} s, budget {budget_secs:.0} s)");
        }
        Ok(()) => {
            println!(
                "[acceptance] {name}: FAIL (passed checks but took {elapsed:.1} s, budget {budget_secs:.0} s)"
            );
            panic!("{name} exceeded its runtime budget");
        }
        Err(cause) => {
            println!("[acceptance] {name}: FAIL ({elapsed:.1} s)");
            resume_unwind(cause);
        }
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn soft(x: f64, lambda: f64) -> f64 {
    x.signum() * (x.abs() - lambda).max(0.0)
}

// ---------------------------------------------------------------------------
// 1. Shrinkage closed form vs a 1e-4-step grid-search oracle
// ---------------------------------------------------------------------------

/// Argmin over the lattice x = -100 + k * 1e-4. The objective is strictly
/// convex, so a coarse scan plus a lattice-aligned refinement around the
/// coarse winner visits the global lattice minimizer.
fn grid_search_minimizer(a: f64, b: f64, lambda: f64) -> f64 {
    const FINE: f64 = 1e-4;
    const COARSE_EVERY: usize = 1000; // 0.1 spacing on the same lattice
    const K_MAX: usize = 2_000_000;
    let objective = |x: f64| 0.5 * (x - a) * (x - a) + lambda * (x - b).abs();
    let x_of = |k: usize| -100.0 + k as f64 * FINE;

    let mut best_k = 0;
    let mut best = f64::INFINITY;
    let mut k = 0;
    while k <= K_MAX {
        let f = objective(x_of(k));
        if f < best {
            best = f;
            best_k = k;
        }
        k += COARSE_EVERY;
    }
    // the fine winner lies within one coarse step of the coarse winner
    let lo = best_k.saturating_sub(COARSE_EVERY + 10);
    let hi = (best_k + COARSE_EVERY + 10).min(K_MAX);
    let mut fine_best = f64::INFINITY;
    let mut fine_x = 0.0;
    for k in lo..=hi {
        let x = x_of(k);
        let f = objective(x);
        if f < fine_best {
            fine_best = f;
            fine_x = x;
        }
    }
    fine_x
}

#[test]
fn criterion_1_shrinkage_matches_grid_oracle() {
    criterion("1 shrinkage oracle (10^4 triples, 2e-4)", 10.0, || {
        let mut rng = ChaCha12Rng::seed_from_u64(0xACCE01);
        for trial in 0..10_000 {
            let a = rng.random_range(-50.0..50.0);
            let b = rng.random_range(-50.0..50.0);
            let lambda = rng.random_range(0.0..20.0);
            let closed = soft(a - b, lambda) + b;
            let grid = grid_search_minimizer(a, b, lambda);
            assert!(
                (closed - grid).abs() < 2e-4,
                "trial {trial}: a={a} b={b} lambda={lambda}: {closed} vs {grid}"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 2. Block matching vs exhaustive search
// ---------------------------------------------------------------------------

/// Independent exhaustive oracle: every candidate in the clipped window,
/// naive distances, selection by insertion into a list ordered on
/// (distance, raster index).
fn exhaustive_match(
    img: &GrayImage,
    ref_pos: (usize, usize),
    d: usize,
    window: usize,
    m: usize,
) -> Vec<(usize, usize)> {
    let max_off = img.height() - d; // square images only
    let lo = |center: usize| center.saturating_sub((window - 1) / 2);
    let hi = |center: usize| (center + window / 2).min(max_off);
    let mut ranked: Vec<(f64, usize, (usize, usize))> = Vec::new();
    let mut raster = 0usize;
    for r in lo(ref_pos.0)..=hi(ref_pos.0) {
        for c in lo(ref_pos.1)..=hi(ref_pos.1) {
            let mut dist = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let diff = img.get(r + i, c + j) - img.get(ref_pos.0 + i, ref_pos.1 + j);
                    dist += diff * diff;
                }
            }
            let at = ranked
                .iter()
                .position(|e| (e.0, e.1) > (dist, raster))
                .unwrap_or(ranked.len());
            ranked.insert(at, (dist, raster, (r, c)));
            raster += 1;
        }
    }
    (0..m).map(|j| ranked[j % ranked.len()].2).collect()
}

#[test]
fn criterion_2_block_matching_matches_exhaustive_search() {
    criterion("2 block-matching oracle (1000 trials)", 30.0, || {
        let spec = PatchSpec::new(4, 8, 16, 4).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0xACCE02);
        for trial in 0..1000 {
            let data: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..255.0)).collect();
            let img = GrayImage::new(16, 16, data).unwrap();
            let ref_pos = (rng.random_range(0..13), rng.random_range(0..13));
            let group = block_match(&img, ref_pos, &spec).unwrap();
            let oracle = exhaustive_match(&img, ref_pos, 4, 16, 8);
            assert_eq!(group.positions, oracle, "trial {trial} ref {ref_pos:?}");
        }
    });
}

// ---------------------------------------------------------------------------
// 3. EM properties
// ---------------------------------------------------------------------------

fn gaussian_groups(
    cov: &DMatrix<f64>,
    n_groups: usize,
    m: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<PatchGroup> {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (basis, values) = sym_eig(cov);
    let scale = values.map(|v| v.max(0.0).sqrt());
    let d2 = cov.nrows();
    let d = (d2 as f64).sqrt() as usize;
    (0..n_groups)
        .map(|_| {
            let mut matrix = DMatrix::zeros(d2, m);
            for j in 0..m {
                let z = DVector::from_fn(d2, |i, _| scale[i] * normal.sample(rng));
                matrix.set_column(j, &(&basis * z));
            }
            PatchGroup {
                matrix,
                positions: vec![(0, 0); m],
                mean_patch: DVector::zeros(d2),
                reference_index: 0,
                d,
            }
        })
        .collect()
}

fn rotated_spectrum_cov(spectrum: &[f64], seed: u64) -> DMatrix<f64> {
    let n = spectrum.len();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let (basis, _) = sym_eig(&(&a * a.transpose()));
    let lambda = DVector::from_column_slice(spectrum);
    &basis * DMatrix::from_diagonal(&lambda) * basis.transpose()
}

#[test]
fn criterion_3_em_monotone_and_recovers_planted_mixture() {
    criterion("3 EM properties (monotone + planted recovery)", 120.0, || {
        let spectrum_a: Vec<f64> = (0..16).map(|i| 400.0 - 18.0 * i as f64).collect();
        let spectrum_b: Vec<f64> = (0..16).map(|i| 16.0 - 0.7 * i as f64).collect();
        let cov_a = rotated_spectrum_cov(&spectrum_a, 11);
        let cov_b = rotated_spectrum_cov(&spectrum_b, 12);
        let spec = PatchSpec::new(4, 8, 16, 1).unwrap();

        // mean log-likelihood is non-decreasing on 10 seeded runs
        for seed in 0..10u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(1000 + seed);
            let mut groups = gaussian_groups(&cov_a, 1000, 8, &mut rng);
            groups.extend(gaussian_groups(&cov_b, 1000, 8, &mut rng));
            let mut cfg = TrainingConfig::new(2000, spec, seed);
            cfg.max_em_iters = 12;
            cfg.tolerance = 0.0;
            let (_, report) = train_em(groups, 4, &cfg).unwrap();
            assert!(report.mean_log_likelihood.len() >= 2);
            for pair in report.mean_log_likelihood.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-6,
                    "seed {seed}: {:?}",
                    report.mean_log_likelihood
                );
            }
        }

        // planted two-component covariances are recovered within 10%
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut groups = gaussian_groups(&cov_a, 1000, 8, &mut rng);
        groups.extend(gaussian_groups(&cov_b, 1000, 8, &mut rng));
        let mut cfg = TrainingConfig::new(2000, spec, 42);
        cfg.max_em_iters = 30;
        let (model, _) = train_em(groups, 2, &cfg).unwrap();

        let rel = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x - y).norm() / y.norm();
        let (c0, c1) = (&model.component(0).covariance, &model.component(1).covariance);
        let direct = rel(c0, &cov_a).max(rel(c1, &cov_b));
        let swapped = rel(c0, &cov_b).max(rel(c1, &cov_a));
        let err = direct.min(swapped);
        assert!(err <= 0.10, "worst matched relative error {err:.4}");
    });
}

// ---------------------------------------------------------------------------
// 4. Dictionary invariants
// ---------------------------------------------------------------------------

fn max_abs_gram_deviation(basis: &DMatrix<f64>) -> f64 {
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

#[test]
fn criterion_4_dictionary_invariants() {
    criterion("4 dictionary invariants (100 instances)", 60.0, || {
        let mut rng = ChaCha12Rng::seed_from_u64(0xACCE04);
        for instance in 0..100 {
            // group dictionary from a random group
            let d = 7;
            let matrix = DMatrix::from_fn(d * d, 20, |_, _| rng.random_range(-40.0..40.0));
            let group = PatchGroup {
                mean_patch: DVector::zeros(d * d),
                positions: vec![(0, 0); 20],
                reference_index: 0,
                d,
                matrix,
            };
            let (basis, values) = group_dictionary(&group);
            assert!(max_abs_gram_deviation(&basis) <= 1e-8, "instance {instance}");
            let cov = &group.matrix * group.matrix.transpose() / 20.0;
            let recon = &basis * DMatrix::from_diagonal(&values) * basis.transpose();
            assert!(
                (&recon - &cov).norm() / cov.norm() <= 1e-6,
                "instance {instance}"
            );

            // prior dictionary from a random SPD covariance
            let a = DMatrix::from_fn(d * d, d * d, |_, _| rng.random_range(-1.0..1.0));
            let spd = &a * a.transpose() * 25.0 + DMatrix::identity(d * d, d * d) * 0.5;
            let spd = (&spd + spd.transpose()) * 0.5;
            let model = GmmModel::from_parameters(
                vec![1.0],
                vec![DVector::zeros(d * d)],
                vec![spd.clone()],
            )
            .unwrap();
            let (prior_basis, prior_values) = model.component_dictionary(0);
            assert!(max_abs_gram_deviation(prior_basis) <= 1e-8, "instance {instance}");
            let recon =
                prior_basis * DMatrix::from_diagonal(prior_values) * prior_basis.transpose();
            assert!(
                (&recon - &spd).norm() / spd.norm() <= 1e-6,
                "instance {instance}"
            );
        }
    });
}

// ---------------------------------------------------------------------------
// 5 & 6. End-to-end floor and residual statistics, sharing one trained prior
// ---------------------------------------------------------------------------

/// Prior for the sigma-30 geometry (d=7), K=16, 20k groups, trained on the
/// four-image clean corpus that is disjoint from every test image.
fn shared_prior() -> &'static GmmModel {
    static MODEL: OnceLock<GmmModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus: Vec<GrayImage> = ["camera_256.pgm", "brick_256.pgm", "grass_256.pgm", "gravel_256.pgm"]
            .iter()
            .map(|name| GrayImage::load_pgm(fixture(name)).expect("training fixture"))
            .collect();
        let spec = PatchSpec::new(7, 90, 50, 1).unwrap();
        let cfg = TrainingConfig::new(20_000, spec, 2024);
        let groups = gsr_core::gmm::sample_training_groups(&corpus, &cfg).expect("sampling");
        let (model, report) = train_em(groups, 16, &cfg).expect("training");
        println!(
            "[acceptance] shared prior: K=16, d=7, 20000 groups, {} EM iterations",
            report.mean_log_likelihood.len()
        );
        model
    })
}

#[test]
fn criterion_5_end_to_end_denoising_floor() {
    criterion("5 end-to-end floor (sigma 30, +7 dB)", 300.0, || {
        let model = shared_prior();
        let clean = GrayImage::load_pgm(fixture("coins_128.pgm")).unwrap();
        let noisy = add_awgn(&clean, &NoiseSpec::new(30.0, 77).unwrap());
        let params = DenoiseParams::from_sigma(30.0);
        let denoised = denoise(&noisy, model, &params).unwrap();
        let noisy_db = psnr(&clean, &noisy).unwrap();
        let denoised_db = psnr(&clean, &denoised).unwrap();
        println!("[acceptance]   noisy {noisy_db:.2} dB -> denoised {denoised_db:.2} dB");
        assert!(
            denoised_db >= noisy_db + 7.0,
            "floor missed: noisy {noisy_db:.2} dB, denoised {denoised_db:.2} dB"
        );
    });
}

#[test]
fn criterion_6_laplacian_fits_residuals_better_than_gaussian() {
    criterion("6 residual statistics (laplacian < gaussian, 2 of 3)", 180.0, || {
        let model = shared_prior();
        let params = DenoiseParams::from_sigma(30.0);
        let mut wins = 0;
        for (idx, name) in ["coins_128.pgm", "clock_128.pgm", "moon_128.pgm"]
            .iter()
            .enumerate()
        {
            let clean = GrayImage::load_pgm(fixture(name)).unwrap();
            let noisy = add_awgn(&clean, &NoiseSpec::new(30.0, 500 + idx as u64).unwrap());
            let sample = collect_residuals(&noisy, model, &params, name).unwrap();
            let laplacian = fit(&sample, DistFamily::Laplacian).unwrap();
            let gaussian = fit(&sample, DistFamily::Gaussian).unwrap();
            println!(
                "[acceptance]   {name}: laplacian {:.4} vs gaussian {:.4}",
                laplacian.log_fit_error, gaussian.log_fit_error
            );
            if laplacian.log_fit_error < gaussian.log_fit_error {
                wins += 1;
            }
        }
        assert!(wins >= 2, "laplacian won on {wins}/3 images only");
    });
}

// ---------------------------------------------------------------------------
// 7. CLI determinism
// ---------------------------------------------------------------------------

fn run_gsr(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_gsr"))
        .args(args)
        .output()
        .expect("spawn gsr")
}

fn textured_image(w: usize, h: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let base = 100.0
                + 60.0 * ((r as f64 / 7.0).sin() + (c as f64 / 9.0).cos())
                + if (r / 8 + c / 8) % 2 == 0 { 20.0 } else { -20.0 };
            data.push((base + rng.random_range(-4.0..4.0)).clamp(0.0, 255.0));
        }
    }
    GrayImage::new(w, h, data).unwrap()
}

#[test]
fn criterion_7_cli_train_and_bench_are_seed_deterministic() {
    criterion("7 CLI determinism (train + bench, same seed)", 300.0, || {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        std::fs::create_dir_all(&corpus).unwrap();
        for i in 0..2 {
            textured_image(96, 96, 300 + i)
                .save_pgm(corpus.join(format!("t{i}.pgm")))
                .unwrap();
        }

        let train = |name: &str| -> Vec<u8> {
            let model = dir.path().join(name);
            let out = run_gsr(&[
                "train",
                "--corpus",
                corpus.to_str().unwrap(),
                "--model",
                model.to_str().unwrap(),
                "--k",
                "4",
                "--d",
                "5",
                "--m",
                "20",
                "--window",
                "20",
                "--n-groups",
                "500",
                "--max-em-iters",
                "8",
                "--seed",
                "9",
                "--threads",
                "2",
            ]);
            assert_eq!(out.status.code(), Some(0));
            std::fs::read(&model).unwrap()
        };
        let first = train("m1.gsr");
        assert_eq!(first, train("m2.gsr"), "model files differ across runs");

        let images = dir.path().join("testset");
        std::fs::create_dir_all(&images).unwrap();
        textured_image(48, 48, 400)
            .save_pgm(images.join("a.pgm"))
            .unwrap();
        let bench = |name: &str| -> String {
            let csv = dir.path().join(name);
            let out = run_gsr(&[
                "bench",
                "--dir",
                images.to_str().unwrap(),
                "--model",
                dir.path().join("m1.gsr").to_str().unwrap(),
                "--sigmas",
                "20,30",
                "--seed",
                "5",
                "--out",
                csv.to_str().unwrap(),
                "--threads",
                "2",
            ]);
            assert_eq!(out.status.code(), Some(0));
            std::fs::read_to_string(&csv).unwrap()
        };
        let first = bench("r1.csv");
        assert_eq!(first, bench("r2.csv"), "bench reports differ across runs");
    });
}

// ---------------------------------------------------------------------------
// 8. Schedule fidelity
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_schedule_reproduces_every_parameter_cell() {
    criterion("8 schedule fidelity (all seven rows)", 10.0, || {
        let expected: [(f64, f64, usize, usize, usize, usize, f64, f64, f64); 7] = [
            (0.01, 10.0, 64, 50, 6, 80, 0.14, 0.19, 1.08),
            (10.0, 20.0, 64, 50, 6, 80, 0.13, 0.20, 1.05),
            (20.0, 30.0, 64, 50, 7, 90, 0.12, 0.21, 1.05),
            (30.0, 40.0, 64, 50, 8, 100, 0.11, 0.22, 1.05),
            (40.0, 50.0, 64, 50, 8, 100, 0.10, 0.23, 1.05),
            (50.0, 75.0, 64, 50, 9, 120, 0.09, 0.24, 1.00),
            (75.0, 100.0, 64, 50, 9, 120, 0.08, 0.25, 1.00),
        ];
        assert_eq!(SCHEDULE.len(), expected.len());
        for (row, &(lo, hi, k, w, d, m, c, rho, gamma)) in expected.iter().enumerate() {
            // probe the interval interior and its inclusive upper bound
            for sigma in [0.5 * (lo + hi), hi] {
                let p = DenoiseParams::from_sigma(sigma);
                assert_eq!(p.k, k, "row {row} sigma {sigma}: k");
                assert_eq!(p.window, w, "row {row} sigma {sigma}: window");
                assert_eq!(p.d, d, "row {row} sigma {sigma}: d");
                assert_eq!(p.m, m, "row {row} sigma {sigma}: m");
                assert_eq!(p.c, c, "row {row} sigma {sigma}: c");
                assert_eq!(p.rho, rho, "row {row} sigma {sigma}: rho");
                assert_eq!(p.gamma, gamma, "row {row} sigma {sigma}: gamma");
            }
            // just above the upper bound falls into the next row
            if row + 1 < expected.len() {
                let p = DenoiseParams::from_sigma(hi + 1e-9);
                assert_eq!(p.c, expected[row + 1].6, "row {row} upper boundary");
            }
        }
    });
}
