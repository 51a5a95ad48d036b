//! Acceptance suite: twelve end-to-end criteria covering the filter, the
//! Laplace approximation, the particle filters, the surface calibration,
//! and the scenario studies.
//!
//! Each criterion prints one `pass`/`FAIL` line with its measured numbers
//! (run with `-- --nocapture` to see them) and asserts the pinned
//! tolerances below.  The study-backed criteria share one joint-study run
//! and take tens of minutes on a single worker.

use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use transition_calib_core::calibrate::{
    likelihood_profile, scenario_study, LikelihoodProfile, ProfileMethod, StudyConfig,
    StudyMethod, StudyResult,
};
use transition_calib_core::domain::{
    Levels, Loading, MigrationSeries, ModelParameters, ObservedFactors,
};
use transition_calib_core::gpr::{
    gpr_fit, gpr_predict, grid_fit, kernel_eval, CartesianGrid, KernelSpec, NOISE_STD_FLOOR,
};
use transition_calib_core::kalman::{kalman_filter, LinearGaussianSsm};
use transition_calib_core::laplace::{
    laplace_loglik_for_series, parameters_from_free, MleOptions, ModeOptions,
};
use transition_calib_core::math::{
    ln_binomial_coef, ln_norm_pdf, log_sum_exp, mean_std, norm_cdf, norm_pdf, norm_quantile,
};
use transition_calib_core::models::{
    MultinomialObservations, ObservationModel, PeriodGradHess,
};
use transition_calib_core::simulate::simulate_migrations;
use transition_calib_core::models::ModelFamily;

// ---------------------------------------------------------------------------
// Pinned tolerances and reference targets
// ---------------------------------------------------------------------------

/// Criterion 1: filter vs dense joint-Gaussian log-likelihood.
const KALMAN_ORACLE_TOL: f64 = 1e-10;
/// Criterion 2: analytic gradient vs central differences (relative).
const GRAD_REL_TOL: f64 = 1e-6;
/// Criterion 2: analytic Hessian vs differenced analytic gradient.
const HESS_REL_TOL: f64 = 1e-5;
/// Criterion 3: Laplace vs adaptive tensor quadrature (relative).
const LAPLACE_QUADRATURE_REL_TOL: f64 = 1e-3;
/// Criteria 4 and 12: allowed deviation in standard errors.
const SE_MULTIPLE: f64 = 3.0;
/// Criterion 6: minimum width of the per-parameter mean band.
const JOINT_MEAN_BAND_FLOOR: f64 = 0.02;
/// Criterion 7: dispersion cap on the loading estimates under exact-moment
/// innovations.
const RENORMALIZED_LOADING_STD_MAX: f64 = 0.015;
/// Criterion 8: mean absolute stepwise-vs-joint deviation per parameter.
const STEPWISE_JOINT_MAD_MAX: f64 = 0.03;
/// Criterion 9: band around the high-default surface-calibration targets.
const HIGH_DEFAULT_SURFACE_BAND: f64 = 0.04;
/// Criterion 10: band around the low-default surface-calibration targets.
const LOW_DEFAULT_SURFACE_BAND: f64 = 0.06;
/// Criterion 11: Kronecker/dense and analytic-oracle agreement.
const GPR_EQUIVALENCE_TOL: f64 = 1e-8;
/// Criterion 11: reconstruction error with noise at the floor.
const GPR_INTERPOLATION_TOL: f64 = 1e-4;

/// Reference statistics for the two-factor joint calibration, estimated
/// from large independent runs of the same design (1000 scenarios).
const JOINT_MEAN_TARGETS: [f64; 5] = [0.6768, 0.7732, 0.2962, 0.1976, 0.3998];
const JOINT_REFERENCE_STDS: [f64; 5] = [0.0550, 0.0493, 0.0264, 0.0217, 0.0705];
/// Reference means for the surface calibration on the two panel designs.
const HIGH_DEFAULT_SURFACE_TARGETS: [f64; 2] = [0.6720, 0.2903];
const LOW_DEFAULT_SURFACE_TARGETS: [f64; 2] = [0.7211, 0.5518];

// ---------------------------------------------------------------------------
// Shared configuration and helpers
// ---------------------------------------------------------------------------

const N_PERIODS: usize = 150;
const HIGH_DEFAULT_PD: [f64; 3] = [0.01, 0.04, 0.1];
const HIGH_DEFAULT_POPULATIONS: [i64; 3] = [100_000, 10_000, 5_000];
const LOW_DEFAULT_PD: [f64; 3] = [0.001, 0.004, 0.01];
const LOW_DEFAULT_POPULATIONS: [i64; 3] = [5_000, 1_000, 500];
const STUDY_MASTER_SEED: u64 = 2026;
const JOINT_STUDY_SCENARIOS: usize = 200;
const SURFACE_STUDY_SCENARIOS: usize = 100;

/// Print the per-criterion verdict line, then enforce it.
fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "pass" } else { "FAIL" };
    println!("acceptance {criterion:>2} ({name}): {verdict} - {detail}");
    assert!(pass, "criterion {criterion} ({name}): {detail}");
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn default_only_truth(a: f64, k: f64, pd: &[f64]) -> ModelParameters {
    parameters_from_free(ModelFamily::DefaultOnlyProbit, &[a, k], pd, &[])
        .expect("default-only truth")
}

fn two_factor_truth() -> ModelParameters {
    parameters_from_free(
        ModelFamily::TwoFactorProbit,
        &[0.7, 0.8, 0.3, 0.2, 0.4],
        &HIGH_DEFAULT_PD,
        &[vec![0.15, 0.05], vec![0.8, 0.2], vec![0.9, 0.7]],
    )
    .expect("two-factor truth")
}

fn simulate_panel(truth: &ModelParameters, populations: &[i64], seed: u64) -> MigrationSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_migrations(
        ModelFamily::DefaultOnlyProbit,
        truth,
        &ObservedFactors::none(N_PERIODS, 0),
        populations,
        N_PERIODS,
        false,
        &mut rng,
    )
    .expect("panel simulation")
    .series
}

/// Pull a fully evaluated profile into plain values.
fn profile_values(profile: &LikelihoodProfile) -> Result<Vec<f64>, String> {
    if profile.n_failed > 0 {
        return Err(format!(
            "{} of {} profile points failed",
            profile.n_failed,
            profile.points.len()
        ));
    }
    Ok(profile.points.iter().map(|p| p.loglik.unwrap()).collect())
}

// ---------------------------------------------------------------------------
// Criterion 1: Kalman filter vs dense joint-Gaussian oracle
// ---------------------------------------------------------------------------

/// Log-density of the stacked observations under the model's exact joint
/// Gaussian law, built from first principles without any filtering.
fn dense_joint_loglik(ssm: &LinearGaussianSsm) -> f64 {
    let n = ssm.n_periods();
    let s = ssm.state_dim();
    // State means and the full cross-period covariance, x_0 included.
    let mut means = vec![ssm.init_mean.clone()];
    for k in 0..n {
        means.push(&ssm.transitions[k] * &means[k]);
    }
    let mut blocks = vec![vec![DMatrix::<f64>::zeros(s, s); n + 1]; n + 1];
    blocks[0][0] = ssm.init_cov.clone();
    for k in 1..=n {
        let a = &ssm.transitions[k - 1];
        for l in 0..k {
            blocks[k][l] = a * &blocks[k - 1][l];
            blocks[l][k] = blocks[k][l].transpose();
        }
        blocks[k][k] = a * &blocks[k - 1][k] + &ssm.innovations[k - 1];
    }
    // Stacked observation moments: y_k = c_k + Z_k x_k + eps_k.
    let obs_dims: Vec<usize> = ssm.obs_map.iter().map(|z| z.nrows()).collect();
    let total: usize = obs_dims.iter().sum();
    let offsets: Vec<usize> = obs_dims
        .iter()
        .scan(0, |acc, &d| {
            let start = *acc;
            *acc += d;
            Some(start)
        })
        .collect();
    let mut mean_y = DVector::zeros(total);
    let mut cov_y = DMatrix::zeros(total, total);
    let mut resid = DVector::zeros(total);
    for k in 0..n {
        let zk = &ssm.obs_map[k];
        let m = zk * &means[k + 1] + &ssm.offsets[k];
        for i in 0..obs_dims[k] {
            mean_y[offsets[k] + i] = m[i];
            resid[offsets[k] + i] = ssm.observations[k][i] - m[i];
        }
        for l in 0..n {
            let mut block = zk * &blocks[k + 1][l + 1] * ssm.obs_map[l].transpose();
            if k == l {
                block += &ssm.obs_noise[k];
            }
            for i in 0..obs_dims[k] {
                for j in 0..obs_dims[l] {
                    cov_y[(offsets[k] + i, offsets[l] + j)] = block[(i, j)];
                }
            }
        }
    }
    let chol = Cholesky::new(cov_y).expect("joint observation covariance");
    let ln_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let solved = chol.solve(&resid);
    -0.5 * (total as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + resid.dot(&solved))
}

#[test]
fn criterion_01_kalman_matches_dense_gaussian_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = rng.gen_range(1..=3);
        let n = rng.gen_range(1..=5);
        let mut rand_mat =
            |r: usize, c: usize, rng: &mut ChaCha8Rng| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let mut spd = |d: usize, rng: &mut ChaCha8Rng| {
            let b = DMatrix::<f64>::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
            &b * b.transpose() + DMatrix::identity(d, d) * 0.5
        };
        let obs_dims: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=3)).collect();
        let ssm = LinearGaussianSsm {
            obs_map: obs_dims.iter().map(|&m| rand_mat(m, s, &mut rng)).collect(),
            obs_noise: obs_dims.iter().map(|&m| spd(m, &mut rng)).collect(),
            offsets: obs_dims
                .iter()
                .map(|&m| DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
            observations: obs_dims
                .iter()
                .map(|&m| DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)))
                .collect(),
            transitions: (0..n)
                .map(|_| DMatrix::from_fn(s, s, |_, _| rng.gen_range(-0.9..0.9)))
                .collect(),
            innovations: (0..n).map(|_| spd(s, &mut rng)).collect(),
            init_mean: DVector::from_fn(s, |_, _| rng.gen_range(-1.0..1.0)),
            init_cov: spd(s, &mut rng),
        };
        let filter = kalman_filter(&ssm).expect("filter");
        let oracle = dense_joint_loglik(&ssm);
        worst = worst.max((filter.loglik - oracle).abs());
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        1,
        "kalman oracle equivalence",
        worst <= KALMAN_ORACLE_TOL && elapsed < 5.0,
        &format!("max |delta loglik| = {worst:.2e} over 100 instances, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: observation derivatives vs finite differences
// ---------------------------------------------------------------------------

fn assemble(gh: &PeriodGradHess) -> (DVector<f64>, DMatrix<f64>) {
    let mut g = DVector::zeros(gh.dim);
    let mut h = DMatrix::zeros(gh.dim, gh.dim);
    for b in &gh.blocks {
        let d = b.grad.len();
        for i in 0..d {
            g[b.offset + i] = b.grad[i];
            for j in 0..d {
                h[(b.offset + i, b.offset + j)] = b.hess[(i, j)];
            }
        }
    }
    (g, h)
}

fn random_levels(family: ModelFamily, r: usize, rng: &mut ChaCha8Rng) -> Levels {
    match family {
        ModelFamily::DefaultOnlyProbit => {
            Levels::PerRowDefault((0..r - 1).map(|_| rng.gen_range(-2.5..-1.0)).collect())
        }
        ModelFamily::TwoFactorProbit => {
            let default = (0..r - 1).map(|_| rng.gen_range(-2.5..-1.5)).collect();
            let cumulative = (0..r - 1)
                .map(|_| {
                    let mut v = Vec::with_capacity(r - 2);
                    let mut top = rng.gen_range(0.2..1.2);
                    for _ in 0..r - 2 {
                        v.push(top);
                        top -= rng.gen_range(0.4..1.0);
                    }
                    v
                })
                .collect();
            Levels::Thresholds {
                default,
                cumulative,
            }
        }
        ModelFamily::MultiFactorLogistic => {
            Levels::PerCell(DMatrix::from_fn(r - 1, r, |_, _| rng.gen_range(-1.0..1.0)))
        }
    }
}

#[test]
fn criterion_02_derivatives_match_finite_differences() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let families = [
        ModelFamily::DefaultOnlyProbit,
        ModelFamily::TwoFactorProbit,
        ModelFamily::MultiFactorLogistic,
    ];
    let h = 1e-5;
    let (mut worst_grad, mut worst_hess) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let family = families[case % families.len()];
        let r = match family {
            ModelFamily::TwoFactorProbit => rng.gen_range(3..=4),
            _ => rng.gen_range(2..=4),
        };
        let counts: Vec<DMatrix<i64>> = (0..2)
            .map(|_| DMatrix::from_fn(r - 1, r, |_, _| rng.gen_range(0..30)))
            .collect();
        let series = MigrationSeries::from_counts(counts).expect("series");
        let levels = random_levels(family, r, &mut rng);
        let obs = MultinomialObservations::new(family, &series, levels).expect("observations");
        for k in 0..2 {
            let dim = obs.signal_dim(k);
            let theta: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.7..0.7)).collect();
            let (grad, hess) = assemble(&obs.grad_hess(k, &theta));
            // Central differences of the log-likelihood against the
            // analytic gradient.
            let mut fd_grad = DVector::zeros(dim);
            for i in 0..dim {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[i] += h;
                minus[i] -= h;
                fd_grad[i] = (obs.ln_likelihood(k, &plus) - obs.ln_likelihood(k, &minus))
                    / (2.0 * h);
            }
            let scale = fd_grad.amax().max(1.0);
            worst_grad = worst_grad.max((&grad - &fd_grad).amax() / scale);
            // Differenced analytic gradient against the analytic Hessian.
            let mut fd_hess = DMatrix::zeros(dim, dim);
            for i in 0..dim {
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                plus[i] += h;
                minus[i] -= h;
                let (gp, _) = assemble(&obs.grad_hess(k, &plus));
                let (gm, _) = assemble(&obs.grad_hess(k, &minus));
                for j in 0..dim {
                    fd_hess[(j, i)] = (gp[j] - gm[j]) / (2.0 * h);
                }
            }
            let scale = fd_hess.amax().max(1.0);
            worst_hess = worst_hess.max((&hess - &fd_hess).amax() / scale);
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        2,
        "derivative checks",
        worst_grad <= GRAD_REL_TOL && worst_hess <= HESS_REL_TOL && elapsed < 10.0,
        &format!(
            "grad rel err = {worst_grad:.2e}, hess rel err = {worst_hess:.2e}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: Laplace vs adaptive tensor quadrature
// ---------------------------------------------------------------------------

/// Gauss-Hermite nodes and weights for `int exp(-u^2) f(u) du`.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for i in 1..n {
        let b = (i as f64 / 2.0).sqrt();
        j[(i - 1, i)] = b;
        j[(i, i - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            (
                eig.eigenvalues[i],
                std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

fn binom_ln(m: i64, n: i64, p: f64) -> f64 {
    ln_binomial_coef(n, m) + m as f64 * p.ln() + (n - m) as f64 * (1.0 - p).ln()
}

/// Two-period tensor quadrature for the single-rating default-only model.
///
/// Nodes are centered and scaled per period on a crude posterior
/// localization, so the narrow likelihood peak at large exposure stays
/// resolved; the change of measure is reweighted exactly in log space.
fn quadrature_loglik(series: &MigrationSeries, d: f64, k_load: f64, a: f64) -> f64 {
    let (nodes, weights) = gauss_hermite(64);
    let q = 1.0 - a * a;
    let localize = |k: usize| -> (f64, f64) {
        let n = series.row_total(k, 0) as f64;
        let m = series.count(k, 0, 1) as f64;
        let p_hat = (m + 0.5) / (n + 1.0);
        let theta = norm_quantile(p_hat);
        let sd_lik = (p_hat * (1.0 - p_hat) / n).sqrt() / (norm_pdf(theta) * k_load);
        ((theta - d) / k_load, (1.5 * sd_lik).min(0.9))
    };
    let (c1, s1) = localize(0);
    let (c2, s2) = localize(1);
    let (n1, m1) = (series.row_total(0, 0), series.count(0, 0, 1));
    let (n2, m2) = (series.row_total(1, 0), series.count(1, 0, 1));
    let ln_jacobian = (2.0 * s1 * s2).ln();
    let mut terms = Vec::with_capacity(nodes.len() * nodes.len());
    for (u1, w1) in nodes.iter().zip(&weights) {
        let x1 = c1 + std::f64::consts::SQRT_2 * s1 * u1;
        let l1 = binom_ln(m1, n1, norm_cdf(d + k_load * x1)) + ln_norm_pdf(x1, 0.0, 1.0);
        for (u2, w2) in nodes.iter().zip(&weights) {
            let x2 = c2 + std::f64::consts::SQRT_2 * s2 * u2;
            let l2 = binom_ln(m2, n2, norm_cdf(d + k_load * x2)) + ln_norm_pdf(x2, a * x1, q);
            terms.push(w1.ln() + u1 * u1 + w2.ln() + u2 * u2 + ln_jacobian + l1 + l2);
        }
    }
    log_sum_exp(&terms)
}

#[test]
fn criterion_03_laplace_matches_quadrature() {
    let t0 = Instant::now();
    let (d, k, a) = (-2.2, 0.3, 0.7);
    let series = MigrationSeries::from_counts(vec![
        DMatrix::from_row_slice(1, 2, &[9_880, 120]),
        DMatrix::from_row_slice(1, 2, &[9_740, 260]),
    ])
    .expect("two-period series");
    let psi = ModelParameters::unit_variance(
        Levels::PerRowDefault(vec![d]),
        Loading::Scalar(k),
        Loading::zero(1),
        &[a],
        0.0,
    )
    .expect("parameters");
    let lap = laplace_loglik_for_series(
        ModelFamily::DefaultOnlyProbit,
        &series,
        &psi,
        &ObservedFactors::none(2, 0),
        &ModeOptions::default(),
    )
    .expect("laplace")
    .loglik;
    let reference = quadrature_loglik(&series, d, k, a);
    let rel = (lap - reference).abs() / reference.abs();
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        3,
        "laplace vs quadrature",
        rel <= LAPLACE_QUADRATURE_REL_TOL && elapsed < 10.0,
        &format!(
            "laplace = {lap:.6}, quadrature = {reference:.6}, rel = {rel:.2e}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: Laplace and importance-filter profiles agree
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_laplace_and_importance_profiles_agree() {
    let t0 = Instant::now();
    let truth = default_only_truth(0.7, 0.3, &HIGH_DEFAULT_PD);
    let series = simulate_panel(&truth, &HIGH_DEFAULT_POPULATIONS, 404);
    let family = ModelFamily::DefaultOnlyProbit;
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let reruns = 10;
    let mut pass = true;
    let mut detail = String::new();
    for (axis, values) in [
        ("k", linspace(0.15, 0.45, 15)),
        ("a", linspace(0.45, 0.85, 15)),
    ] {
        let lap = likelihood_profile(
            family,
            &series,
            &truth,
            axis,
            &values,
            ProfileMethod::Laplace,
            &mut rng,
        )
        .expect("laplace profile");
        let lap = profile_values(&lap).expect("laplace profile values");
        let mut reps: Vec<Vec<f64>> = Vec::with_capacity(reruns);
        for _ in 0..reruns {
            let p = likelihood_profile(
                family,
                &series,
                &truth,
                axis,
                &values,
                ProfileMethod::PfImportance { n_particles: 2000 },
                &mut rng,
            )
            .expect("importance profile");
            reps.push(profile_values(&p).expect("importance profile values"));
        }
        let mut worst_ratio = 0.0f64;
        let mut worst_dev = 0.0f64;
        for i in 0..values.len() {
            let sample: Vec<f64> = reps.iter().map(|r| r[i]).collect();
            let (mean, sd) = mean_std(&sample);
            let se = sd / (reruns as f64).sqrt();
            let dev = (lap[i] - mean).abs();
            worst_dev = worst_dev.max(dev);
            let ratio = dev / (SE_MULTIPLE * se);
            worst_ratio = worst_ratio.max(ratio);
            if ratio > 1.0 {
                pass = false;
            }
        }
        detail.push_str(&format!(
            "{axis}: max|dev| = {worst_dev:.4}, max dev/3SE = {worst_ratio:.2}; "
        ));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!("{elapsed:.0}s"));
    report(
        4,
        "laplace/importance profile agreement",
        pass && elapsed < 600.0,
        &detail,
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: bootstrap-filter gap shrinks with more particles
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_bootstrap_gap_shrinks_with_more_particles() {
    let t0 = Instant::now();
    let truth = default_only_truth(0.7, 0.6, &LOW_DEFAULT_PD);
    let series = simulate_panel(&truth, &LOW_DEFAULT_POPULATIONS, 505);
    let family = ModelFamily::DefaultOnlyProbit;
    let values = linspace(0.2, 0.45, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    // Reference: importance filter, averaged over reruns to tame its own
    // (already small) noise.
    let mut reference = vec![0.0f64; values.len()];
    let ref_runs = 5;
    for _ in 0..ref_runs {
        let p = likelihood_profile(
            family,
            &series,
            &truth,
            "k",
            &values,
            ProfileMethod::PfImportance { n_particles: 2000 },
            &mut rng,
        )
        .expect("importance reference");
        for (r, v) in reference.iter_mut().zip(profile_values(&p).expect("reference values")) {
            *r += v / ref_runs as f64;
        }
    }
    let mut gaps = Vec::new();
    for n_particles in [5_000usize, 50_000, 100_000] {
        let p = likelihood_profile(
            family,
            &series,
            &truth,
            "k",
            &values,
            ProfileMethod::PfBootstrap { n_particles },
            &mut rng,
        )
        .expect("bootstrap profile");
        let boot = profile_values(&p).expect("bootstrap values");
        let gap = boot
            .iter()
            .zip(&reference)
            .map(|(b, r)| (b - r).abs())
            .sum::<f64>()
            / values.len() as f64;
        gaps.push(gap);
    }
    let ordered = gaps[0] > gaps[1] && gaps[1] > gaps[2];
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        5,
        "bootstrap convergence ordering",
        ordered && elapsed < 1200.0,
        &format!(
            "mean gaps at N = 5e3/5e4/1e5: {:.3}/{:.3}/{:.3}, {elapsed:.0}s",
            gaps[0], gaps[1], gaps[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criteria 6-8: two-factor scenario studies
// ---------------------------------------------------------------------------

static JOINT_STUDY: OnceLock<StudyResult> = OnceLock::new();

/// The 200-scenario joint Laplace study shared by criteria 6, 7, and 8.
fn joint_study() -> &'static StudyResult {
    JOINT_STUDY.get_or_init(|| {
        scenario_study(&StudyConfig {
            family: ModelFamily::TwoFactorProbit,
            truth: two_factor_truth(),
            populations: HIGH_DEFAULT_POPULATIONS.to_vec(),
            n_periods: N_PERIODS,
            n_scenarios: JOINT_STUDY_SCENARIOS,
            renormalize: true,
            method: StudyMethod::Laplace(MleOptions::default()),
            master_seed: STUDY_MASTER_SEED,
        })
        .expect("joint study")
    })
}

#[test]
fn criterion_06_joint_study_recovers_two_factor_parameters() {
    let t0 = Instant::now();
    let study = joint_study();
    let mut pass = study.n_failed == 0;
    let mut detail = String::new();
    for (i, name) in study.parameter_names.iter().enumerate() {
        let band = (SE_MULTIPLE * JOINT_REFERENCE_STDS[i]
            / (JOINT_STUDY_SCENARIOS as f64).sqrt())
        .max(JOINT_MEAN_BAND_FLOOR);
        let dev = (study.means[i] - JOINT_MEAN_TARGETS[i]).abs();
        if dev > band {
            pass = false;
        }
        detail.push_str(&format!("{name} = {:.4} ", study.means[i]));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!(
        "(targets {JOINT_MEAN_TARGETS:?} +- 0.02, {} failed, {elapsed:.0}s)",
        study.n_failed
    ));
    report(6, "joint two-factor recovery", pass, &detail);
}

#[test]
fn criterion_07_renormalization_tightens_loading_dispersion() {
    let study = joint_study();
    // Loadings are the third and fourth free parameters.
    let k_stds = [study.stds[2], study.stds[3]];
    let pass = k_stds.iter().all(|&s| s <= RENORMALIZED_LOADING_STD_MAX);
    report(
        7,
        "loading dispersion under exact innovations",
        pass,
        &format!(
            "std(k_d) = {:.4}, std(k_p) = {:.4} (cap {RENORMALIZED_LOADING_STD_MAX})",
            k_stds[0], k_stds[1]
        ),
    );
}

#[test]
fn criterion_08_stepwise_tracks_joint_estimates() {
    let t0 = Instant::now();
    let joint = joint_study();
    // Same master seed: scenario i draws the identical panel before the
    // method-specific calibration consumes any randomness.
    let stepwise = scenario_study(&StudyConfig {
        family: ModelFamily::TwoFactorProbit,
        truth: two_factor_truth(),
        populations: HIGH_DEFAULT_POPULATIONS.to_vec(),
        n_periods: N_PERIODS,
        n_scenarios: JOINT_STUDY_SCENARIOS,
        renormalize: true,
        method: StudyMethod::Stepwise(MleOptions::default()),
        master_seed: STUDY_MASTER_SEED,
    })
    .expect("stepwise study");
    let n_params = joint.parameter_names.len();
    let mut sums = vec![0.0f64; n_params];
    let mut n_paired = 0usize;
    for (j, s) in joint.estimates.iter().zip(&stepwise.estimates) {
        if let (Some(j), Some(s)) = (j, s) {
            n_paired += 1;
            for p in 0..n_params {
                sums[p] += (j[p] - s[p]).abs();
            }
        }
    }
    let mut pass = n_paired >= JOINT_STUDY_SCENARIOS * 9 / 10;
    let mut detail = String::new();
    for (p, name) in joint.parameter_names.iter().enumerate() {
        let mad = sums[p] / n_paired as f64;
        if mad > STEPWISE_JOINT_MAD_MAX {
            pass = false;
        }
        detail.push_str(&format!("{name}: {mad:.4} "));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!(
        "(cap {STEPWISE_JOINT_MAD_MAX}, {n_paired} pairs, {elapsed:.0}s)"
    ));
    report(
        8,
        "stepwise vs joint deviation",
        pass && elapsed < 2700.0,
        &detail,
    );
}

// ---------------------------------------------------------------------------
// Criteria 9-10: surface calibration studies
// ---------------------------------------------------------------------------

fn surface_study(pd: &[f64], populations: &[i64], k_true: f64, master_seed: u64) -> StudyResult {
    scenario_study(&StudyConfig {
        family: ModelFamily::DefaultOnlyProbit,
        truth: default_only_truth(0.7, k_true, pd),
        populations: populations.to_vec(),
        n_periods: N_PERIODS,
        n_scenarios: SURFACE_STUDY_SCENARIOS,
        renormalize: false,
        method: StudyMethod::PfGpr {
            grid: CartesianGrid::uniform(&[(0.1, 0.9), (0.1, 0.9)], &[20, 20])
                .expect("surface grid"),
            n_particles: 1000,
        },
        master_seed,
    })
    .expect("surface study")
}

#[test]
fn criterion_09_surface_calibration_high_default() {
    let t0 = Instant::now();
    let study = surface_study(&HIGH_DEFAULT_PD, &HIGH_DEFAULT_POPULATIONS, 0.3, 909);
    let devs: Vec<f64> = study
        .means
        .iter()
        .zip(&HIGH_DEFAULT_SURFACE_TARGETS)
        .map(|(m, t)| (m - t).abs())
        .collect();
    let pass = devs.iter().all(|&d| d <= HIGH_DEFAULT_SURFACE_BAND);
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        9,
        "surface calibration, high default",
        pass,
        &format!(
            "mean a = {:.4}, mean k = {:.4} (targets {:?} +- {HIGH_DEFAULT_SURFACE_BAND}, {} failed, {elapsed:.0}s)",
            study.means[0], study.means[1], HIGH_DEFAULT_SURFACE_TARGETS, study.n_failed
        ),
    );
}

#[test]
fn criterion_10_surface_calibration_low_default() {
    let t0 = Instant::now();
    let study = surface_study(&LOW_DEFAULT_PD, &LOW_DEFAULT_POPULATIONS, 0.6, 910);
    let devs: Vec<f64> = study
        .means
        .iter()
        .zip(&LOW_DEFAULT_SURFACE_TARGETS)
        .map(|(m, t)| (m - t).abs())
        .collect();
    // The loading stays biased low at this exposure; the mean must sit
    // strictly below the generating value.
    let pass = devs.iter().all(|&d| d <= LOW_DEFAULT_SURFACE_BAND) && study.means[1] < 0.6;
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        10,
        "surface calibration, low default",
        pass,
        &format!(
            "mean a = {:.4}, mean k = {:.4} (targets {:?} +- {LOW_DEFAULT_SURFACE_BAND}, k < 0.6, {} failed, {elapsed:.0}s)",
            study.means[0], study.means[1], LOW_DEFAULT_SURFACE_TARGETS, study.n_failed
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: GPR unit suite
// ---------------------------------------------------------------------------

/// Marginal log-likelihood computed directly from the kernel matrix.
fn gpr_loglik_oracle(inputs: &[Vec<f64>], targets: &[f64], spec: &KernelSpec) -> f64 {
    let n = inputs.len();
    let y_mean = targets.iter().sum::<f64>() / n as f64;
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - y_mean));
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = kernel_eval(spec, &inputs[i], &inputs[j]);
        }
        k[(i, i)] += spec.sigma_noise * spec.sigma_noise;
    }
    let chol = Cholesky::new(k).expect("kernel matrix");
    let ln_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let alpha = chol.solve(&y);
    -0.5 * (y.dot(&alpha) + ln_det + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn criterion_11_gpr_unit_suite() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut detail = String::new();

    // Kronecker and dense paths agree on a non-uniform product grid.
    let grid = CartesianGrid::new(vec![
        vec![0.0, 0.45, 1.0],
        vec![0.0, 0.3, 0.7, 1.0],
        vec![0.2, 0.5, 0.8],
    ])
    .expect("grid");
    let points = grid.points();
    let f = |x: &[f64]| (2.0 * x[0]).sin() + 0.5 * (3.0 * x[1]).cos() + x[2] * x[2]
        + 0.2 * x[0] * x[2];
    let targets: Vec<f64> = points.iter().map(|p| f(p)).collect();
    let spec = KernelSpec::new(1.3, vec![0.7, 0.6, 0.9], 0.05).expect("spec");
    let kron = grid_fit(&grid, &targets, &spec).expect("kronecker fit");
    let dense = gpr_fit(&points, &targets, &spec, false).expect("dense fit");
    let loglik_gap = (kron.loglik - dense.loglik).abs();
    let queries: Vec<Vec<f64>> = vec![
        vec![0.21, 0.11, 0.31],
        vec![0.5, 0.52, 0.49],
        vec![0.87, 0.93, 0.23],
        vec![0.05, 0.74, 0.66],
        vec![0.63, 0.35, 0.77],
    ];
    let pk = gpr_predict(&kron, &queries);
    let pd_ = gpr_predict(&dense, &queries);
    let pred_gap = pk
        .iter()
        .zip(&pd_)
        .map(|((mk, vk), (md, vd))| (mk - md).abs().max((vk - vd).abs()))
        .fold(0.0f64, f64::max);
    if loglik_gap > GPR_EQUIVALENCE_TOL || pred_gap > GPR_EQUIVALENCE_TOL {
        pass = false;
    }
    detail.push_str(&format!(
        "kron/dense: loglik {loglik_gap:.1e}, pred {pred_gap:.1e}; "
    ));

    // Noise at the floor reproduces the training targets.
    let inputs: Vec<Vec<f64>> = vec![
        vec![0.1, 0.2],
        vec![0.35, 0.8],
        vec![0.5, 0.4],
        vec![0.7, 0.15],
        vec![0.85, 0.65],
        vec![0.95, 0.35],
    ];
    let values: Vec<f64> = inputs.iter().map(|p| (3.0 * p[0]).sin() + p[1]).collect();
    let tight = KernelSpec::new(1.0, vec![0.8, 0.8], NOISE_STD_FLOOR).expect("tight spec");
    let interp = gpr_fit(&inputs, &values, &tight, false).expect("interpolating fit");
    let recon = gpr_predict(&interp, &inputs);
    let interp_err = recon
        .iter()
        .zip(&values)
        .map(|((m, _), v)| (m - v).abs())
        .fold(0.0f64, f64::max);
    if interp_err > GPR_INTERPOLATION_TOL {
        pass = false;
    }
    detail.push_str(&format!("interp {interp_err:.1e}; "));

    // Marginal likelihood against the direct dense formula.
    let line_inputs: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 * 0.15]).collect();
    let line_targets: Vec<f64> = line_inputs
        .iter()
        .map(|p| (2.5 * p[0]).sin() * 0.8 + 0.1 * p[0])
        .collect();
    let line_spec = KernelSpec::new(1.1, vec![0.4], 0.2).expect("line spec");
    let line_fit = gpr_fit(&line_inputs, &line_targets, &line_spec, false).expect("line fit");
    let oracle = gpr_loglik_oracle(&line_inputs, &line_targets, &line_spec);
    let oracle_gap = (line_fit.loglik - oracle).abs();
    if oracle_gap > GPR_EQUIVALENCE_TOL {
        pass = false;
    }
    detail.push_str(&format!("marginal {oracle_gap:.1e}; "));

    // Smooth fitted cross-section through a noisy surface, emitted for
    // plotting: fitted values along k at fixed a.
    let surface_grid =
        CartesianGrid::uniform(&[(0.1, 0.9), (0.1, 0.9)], &[20, 20]).expect("surface grid");
    let mut noise_rng = ChaCha8Rng::seed_from_u64(1111);
    let surface_targets: Vec<f64> = surface_grid
        .points()
        .iter()
        .map(|p| {
            let (a, k) = (p[0], p[1]);
            let ridge = k - (0.55 + 0.25 * (a - 0.7));
            -40.0 * ridge * ridge - 25.0 * (a - 0.72) * (a - 0.72) - 480.0
                + noise_rng.gen_range(-0.4..0.4)
        })
        .collect();
    let centered: Vec<f64> = {
        let m = surface_targets.iter().sum::<f64>() / surface_targets.len() as f64;
        surface_targets.iter().map(|t| t - m).collect()
    };
    let rms = (centered.iter().map(|c| c * c).sum::<f64>() / centered.len() as f64).sqrt();
    let surface_spec = KernelSpec::new(rms.max(1e-2), vec![0.2, 0.2], 0.5).expect("surface spec");
    let surface_fit = grid_fit(&surface_grid, &surface_targets, &surface_spec).expect("surface");
    let cut_a = 0.73;
    let ks = linspace(0.1, 0.9, 200);
    let cut: Vec<(f64, f64)> = gpr_predict(
        &surface_fit,
        &ks.iter().map(|&k| vec![cut_a, k]).collect::<Vec<_>>(),
    );
    let fitted: Vec<f64> = cut.iter().map(|(m, _)| *m).collect();
    let range = fitted.iter().cloned().fold(f64::MIN, f64::max)
        - fitted.iter().cloned().fold(f64::MAX, f64::min);
    let max_second_diff = fitted
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
        .fold(0.0f64, f64::max);
    let smooth = fitted.iter().all(|v| v.is_finite()) && max_second_diff <= 0.05 * range;
    if !smooth {
        pass = false;
    }
    let out_dir = std::env::var("CARGO_TARGET_TMPDIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::env::temp_dir());
    let cut_path = out_dir.join("gpr_cross_section.csv");
    let mut text = String::from("k,fitted_loglik\n");
    for (k, v) in ks.iter().zip(&fitted) {
        text.push_str(&format!("{k},{v}\n"));
    }
    std::fs::write(&cut_path, text).expect("write cross-section");
    let emitted = std::fs::metadata(&cut_path).map(|m| m.len() > 0).unwrap_or(false);
    if !emitted {
        pass = false;
    }
    detail.push_str(&format!(
        "cross-section d2 max {max_second_diff:.1e} (range {range:.1}) -> {}; ",
        cut_path.display()
    ));

    let elapsed = t0.elapsed().as_secs_f64();
    detail.push_str(&format!("{elapsed:.1}s"));
    report(11, "gpr unit suite", pass && elapsed < 30.0, &detail);
}

// ---------------------------------------------------------------------------
// Criterion 12: Gaussian-probit mixture identity
// ---------------------------------------------------------------------------

#[test]
fn criterion_12_probit_mixture_identity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let draws = 1_000_000usize;
    let mut pass = true;
    let mut worst_z = 0.0f64;
    for _ in 0..10 {
        let mu = rng.gen_range(-2.0..2.0);
        let sigma = rng.gen_range(0.1..2.0);
        let normal = rand_distr::Normal::new(mu, sigma).expect("normal");
        let (mut sum, mut sum_sq) = (0.0f64, 0.0f64);
        for _ in 0..draws {
            let p = norm_cdf(rng.sample(normal));
            sum += p;
            sum_sq += p * p;
        }
        let mean = sum / draws as f64;
        let var = (sum_sq - sum * sum / draws as f64) / (draws as f64 - 1.0);
        let se = (var / draws as f64).sqrt();
        let target = norm_cdf(mu / (1.0 + sigma * sigma).sqrt());
        let z = (mean - target).abs() / se;
        worst_z = worst_z.max(z);
        if z > SE_MULTIPLE {
            pass = false;
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        12,
        "probit mixture identity",
        pass && elapsed < 10.0,
        &format!("max |z| = {worst_z:.2} over 10 settings x 1e6 draws, {elapsed:.1}s"),
    );
}
