//! Laplace approximation of the data likelihood: posterior signal modes by
//! iterated Kalman smoothing, the auxiliary linear-Gaussian model built at
//! the mode, and the resulting marginal likelihood and its maximization.
//!
//! Each Newton step replaces the observation log-likelihood by its local
//! second-order expansion, which turns the smoothing problem into a linear
//! state-space model with per-period pseudo-observations
//! `y_k = theta_k - H_k^{-1} g_k` and noise `-H_k^{-1}`, assembled from the
//! informative blocks only.  When the observation model is itself Gaussian
//! the expansion is exact, the iteration converges immediately and the
//! approximated likelihood equals the Kalman likelihood; those identities
//! anchor the test suite.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::domain::{Levels, Loading, MigrationSeries, ModelParameters, ObservedFactors, SignalPath};
use crate::error::CalibError;
use crate::kalman::{kalman_filter, rts_smoother, FilterOutput, LinearGaussianSsm};
use crate::models::{
    latent_signal_model, LatentSignalModel, ModelFamily, MultinomialObservations, ObservationModel,
    PeriodGradHess,
};
use crate::optimize::{default_starts, nelder_mead_multistart, NelderMeadOptions};
use crate::simulate::{default_levels_from_averages, two_factor_levels_from_averages};
use crate::Result;

/// Newton iteration controls for the posterior mode search.
#[derive(Debug, Clone)]
pub struct ModeOptions {
    /// Stop once the sup-norm change of the signal path falls below this.
    pub step_tol: f64,
    /// Maximum number of smoothing passes.
    pub max_iters: usize,
    /// Acceptance bound on the posterior gradient at the returned mode.
    pub grad_tol: f64,
}

impl Default for ModeOptions {
    fn default() -> Self {
        Self {
            step_tol: 1e-8,
            max_iters: 100,
            grad_tol: 1e-6,
        }
    }
}

/// Posterior mode of the signal path with its auxiliary model.
#[derive(Debug, Clone)]
pub struct ModeResult {
    /// Flattened mode signals per period, `theta_k = c_k + Z x_k` at the
    /// smoothed latent means.
    pub signals: Vec<DVector<f64>>,
    /// Smoothed latent means consistent with `signals`.
    pub latent_means: Vec<DVector<f64>>,
    /// Smoothing passes performed (the count includes the pass that
    /// detected convergence, not the final re-linearization).
    pub iterations: usize,
    /// Sup-norm of the last signal update.
    pub final_step_norm: f64,
    /// Sup-norm of the latent-space posterior gradient at the mode.
    pub grad_norm: f64,
    /// Auxiliary linear-Gaussian model linearized at the mode.
    pub aux: LinearGaussianSsm,
    /// Kalman filter output on `aux`.
    pub filter: FilterOutput,
    /// Observation derivatives at the mode, one entry per period.
    pub derivs: Vec<PeriodGradHess>,
}

impl ModeResult {
    /// The mode signals reshaped into the family layout.
    pub fn signal_path(&self, family: ModelFamily, r: usize) -> SignalPath {
        let (rows, cols) = family.signal_shape(r);
        let theta = self
            .signals
            .iter()
            .map(|v| {
                let mut m = DMatrix::zeros(rows, cols);
                let mut idx = 0;
                for i in 0..rows {
                    for j in 0..cols {
                        m[(i, j)] = v[idx];
                        idx += 1;
                    }
                }
                m
            })
            .collect();
        SignalPath { theta }
    }
}

/// Build the auxiliary model linearized at `signals`, keeping only the
/// informative blocks of every period, together with the derivatives.
fn build_aux<O: ObservationModel + ?Sized>(
    obs: &O,
    lat: &LatentSignalModel,
    signals: &[DVector<f64>],
) -> Result<(LinearGaussianSsm, Vec<PeriodGradHess>)> {
    let n = obs.n_periods();
    let s = lat.ar.nrows();
    let mut obs_maps = Vec::with_capacity(n);
    let mut obs_noises = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut observations = Vec::with_capacity(n);
    let mut derivs = Vec::with_capacity(n);
    for k in 0..n {
        let gh = obs.grad_hess(k, signals[k].as_slice());
        let mut rows: Vec<usize> = Vec::new();
        let mut y_parts: Vec<DVector<f64>> = Vec::new();
        let mut v_parts: Vec<DMatrix<f64>> = Vec::new();
        for (b_idx, b) in gh.blocks.iter().enumerate() {
            if !b.informative {
                continue;
            }
            let dim = b.grad.len();
            let neg_h = -&b.hess;
            let chol = Cholesky::new(neg_h).ok_or(CalibError::StepRejection {
                period: k + 1,
                block: b_idx,
            })?;
            // Pseudo-observation y = theta + (-H)^{-1} g, noise (-H)^{-1}.
            let theta_b = DVector::from_iterator(
                dim,
                (0..dim).map(|t| signals[k][b.offset + t]),
            );
            let y_b = &theta_b + chol.solve(&b.grad);
            y_parts.push(y_b);
            v_parts.push(chol.inverse());
            rows.extend(b.offset..b.offset + dim);
        }
        let m = rows.len();
        let mut z_k = DMatrix::zeros(m, s);
        let mut c_k = DVector::zeros(m);
        let mut y_k = DVector::zeros(m);
        let mut v_k = DMatrix::zeros(m, m);
        for (t, &row) in rows.iter().enumerate() {
            for j in 0..s {
                z_k[(t, j)] = lat.obs_map[(row, j)];
            }
            c_k[t] = lat.offsets[k][row];
        }
        let mut at = 0;
        for (y_b, v_b) in y_parts.iter().zip(&v_parts) {
            let d = y_b.len();
            y_k.rows_mut(at, d).copy_from(y_b);
            v_k.view_mut((at, at), (d, d)).copy_from(v_b);
            at += d;
        }
        obs_maps.push(z_k);
        obs_noises.push(v_k);
        offsets.push(c_k);
        observations.push(y_k);
        derivs.push(gh);
    }
    let ssm = LinearGaussianSsm::with_constant_dynamics(
        obs_maps,
        obs_noises,
        offsets,
        observations,
        lat.ar.clone(),
        lat.innovation_cov.clone(),
        lat.init_mean.clone(),
        lat.init_cov.clone(),
    );
    Ok((ssm, derivs))
}

/// Sup-norm of the posterior gradient in latent space at the smoothed path
/// `x`, using observation derivatives evaluated at `theta(x)`.
fn latent_grad_norm(
    lat: &LatentSignalModel,
    derivs: &[PeriodGradHess],
    x: &[DVector<f64>],
) -> Result<f64> {
    let n = x.len();
    let a = &lat.ar;
    let q = &lat.innovation_cov;
    let q_chol = Cholesky::new(q.clone())
        .ok_or_else(|| CalibError::NotPositiveDefinite("Q in the gradient check".into()))?;
    let p1 = a * &lat.init_cov * a.transpose() + q;
    let p1_chol = Cholesky::new(p1)
        .ok_or_else(|| CalibError::NotPositiveDefinite("first prediction covariance".into()))?;
    let m1 = a * &lat.init_mean;
    let mut worst = 0.0f64;
    for k in 0..n {
        // Data part: Z' D_k with the full stacked gradient (uninformative
        // blocks carry zeros).
        let dim = derivs[k].dim;
        let mut d_full = DVector::zeros(dim);
        for b in &derivs[k].blocks {
            for t in 0..b.grad.len() {
                d_full[b.offset + t] = b.grad[t];
            }
        }
        let mut g = lat.obs_map.transpose() * d_full;
        // Prior part of the AR recursion.
        let e_k = if k == 0 {
            &x[0] - &m1
        } else {
            &x[k] - a * &x[k - 1]
        };
        if k == 0 {
            g -= p1_chol.solve(&e_k);
        } else {
            g -= q_chol.solve(&e_k);
        }
        if k + 1 < n {
            let e_next = &x[k + 1] - a * &x[k];
            g += a.transpose() * q_chol.solve(&e_next);
        }
        worst = worst.max(g.amax());
    }
    Ok(worst)
}

/// Find the posterior mode of the latent signal path by iterated Kalman
/// smoothing of the linearized model.
///
/// Starts from the prior mean path, alternates linearization and smoothing
/// until the signal update drops below `step_tol`, then re-linearizes at
/// the mode so the returned auxiliary model, filter output and derivatives
/// are all evaluated there.  The posterior gradient at the result is
/// checked against `grad_tol`.
pub fn estimate_mode<O: ObservationModel + ?Sized>(
    obs: &O,
    lat: &LatentSignalModel,
    opts: &ModeOptions,
) -> Result<ModeResult> {
    let n = obs.n_periods();
    if lat.n_periods() != n {
        return Err(CalibError::Dimension(format!(
            "observation model covers {n} periods, signal model {}",
            lat.n_periods()
        )));
    }
    if opts.max_iters == 0 {
        return Err(CalibError::Invalid("mode search needs at least one iteration".into()));
    }
    // Prior mean path of the signals.
    let mut prior_mean = lat.init_mean.clone();
    let mut signals: Vec<DVector<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        prior_mean = &lat.ar * prior_mean;
        signals.push(lat.signal_at(k, &prior_mean));
    }

    let mut step = f64::INFINITY;
    let mut converged_at = None;
    let mut latent_means: Vec<DVector<f64>> = Vec::new();
    for it in 1..=opts.max_iters {
        let (aux, _) = build_aux(obs, lat, &signals)?;
        let filt = kalman_filter(&aux)?;
        let smooth = rts_smoother(&aux, &filt)?;
        step = 0.0;
        for k in 0..n {
            let new_k = lat.signal_at(k, &smooth.means[k]);
            step = step.max((&new_k - &signals[k]).amax());
            signals[k] = new_k;
        }
        latent_means = smooth.means;
        if step <= opts.step_tol {
            converged_at = Some(it);
            break;
        }
    }
    // Re-linearize at the accepted mode so all returned pieces refer to it.
    let (aux, derivs) = build_aux(obs, lat, &signals)?;
    let filter = kalman_filter(&aux)?;
    let grad_norm = latent_grad_norm(lat, &derivs, &latent_means)?;
    let iterations = match converged_at {
        Some(it) => it,
        None => {
            return Err(CalibError::NonConvergence {
                iterations: opts.max_iters,
                step_norm: step,
                grad_norm,
            })
        }
    };
    if grad_norm > opts.grad_tol {
        return Err(CalibError::NonConvergence {
            iterations,
            step_norm: step,
            grad_norm,
        });
    }
    Ok(ModeResult {
        signals,
        latent_means,
        iterations,
        final_step_norm: step,
        grad_norm,
        aux,
        filter,
        derivs,
    })
}

/// Posterior signal mode for a migration series under `family`.
pub fn estimate_mode_for_series(
    family: ModelFamily,
    series: &MigrationSeries,
    psi: &ModelParameters,
    u: &ObservedFactors,
    opts: &ModeOptions,
) -> Result<ModeResult> {
    let r = series.n_ratings();
    let lat = latent_signal_model(family, psi, u, r, series.n_periods())?;
    let obs = MultinomialObservations::new(family, series, psi.levels.clone())?;
    estimate_mode(&obs, &lat, opts)
}

/// The Laplace-approximated log-likelihood and its pieces.
#[derive(Debug, Clone)]
pub struct LaplaceLikelihood {
    /// Approximated marginal data log-likelihood.
    pub loglik: f64,
    /// Log of the matching constant between the observation likelihood and
    /// its Gaussian expansion at the mode; exactly zero when the
    /// observation model is Gaussian.
    pub log_c: f64,
    /// Kalman log-likelihood of the auxiliary model at the mode.
    pub aux_loglik: f64,
    /// The underlying mode fit.
    pub mode: ModeResult,
}

/// Laplace approximation of `ln p(M)`: the matching constant at the mode
/// plus the Kalman likelihood of the auxiliary model.
pub fn laplace_loglik<O: ObservationModel + ?Sized>(
    obs: &O,
    lat: &LatentSignalModel,
    opts: &ModeOptions,
) -> Result<LaplaceLikelihood> {
    let mode = estimate_mode(obs, lat, opts)?;
    let mut log_c = 0.0;
    for (k, gh) in mode.derivs.iter().enumerate() {
        let mut dim = 0usize;
        let mut ln_det_neg_h = 0.0;
        let mut quad = 0.0;
        for b in &gh.blocks {
            if !b.informative {
                continue;
            }
            dim += b.grad.len();
            let neg_h = -&b.hess;
            let chol = Cholesky::new(neg_h).ok_or(CalibError::StepRejection {
                period: k + 1,
                block: 0,
            })?;
            ln_det_neg_h += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            quad += b.grad.dot(&chol.solve(&b.grad));
        }
        // ln c_k = (m/2) ln 2 pi - (1/2) ln det(-H) + ln p(M_k | theta_k)
        //        + (1/2) g' (-H)^{-1} g over the informative blocks.
        log_c += 0.5 * dim as f64 * crate::math::LN_2PI - 0.5 * ln_det_neg_h
            + obs.ln_likelihood(k, mode.signals[k].as_slice())
            + 0.5 * quad;
    }
    let aux_loglik = mode.filter.loglik;
    Ok(LaplaceLikelihood {
        loglik: log_c + aux_loglik,
        log_c,
        aux_loglik,
        mode,
    })
}

/// Laplace log-likelihood for a migration series under `family`.
pub fn laplace_loglik_for_series(
    family: ModelFamily,
    series: &MigrationSeries,
    psi: &ModelParameters,
    u: &ObservedFactors,
    opts: &ModeOptions,
) -> Result<LaplaceLikelihood> {
    let r = series.n_ratings();
    let lat = latent_signal_model(family, psi, u, r, series.n_periods())?;
    let obs = MultinomialObservations::new(family, series, psi.levels.clone())?;
    laplace_loglik(&obs, &lat, opts)
}

/// Observed average default rates, one per performing row.
pub fn observed_default_averages(series: &MigrationSeries) -> Vec<f64> {
    (0..series.n_performing())
        .map(|i| series.average_default_rate(i))
        .collect()
}

/// Observed average cumulative migration probabilities conditional on
/// survival: entry `[i][j]` targets destination `j + 2` or worse (1-based),
/// matching the cumulative threshold layout.
pub fn observed_cumulative_averages(series: &MigrationSeries) -> Vec<Vec<f64>> {
    let r = series.n_ratings();
    (0..series.n_performing())
        .map(|i| {
            (0..r.saturating_sub(2))
                .map(|j| series.average_cumulative_migration(i, j + 1))
                .collect()
        })
        .collect()
}

/// Options for the Laplace maximum-likelihood driver.
#[derive(Debug, Clone)]
pub struct MleOptions {
    /// Mode-search controls used inside every objective evaluation.
    pub mode: ModeOptions,
    /// Simplex controls for the outer search.
    pub nm: NelderMeadOptions,
    /// Box for autoregression coefficients.
    pub ar_bounds: (f64, f64),
    /// Box for factor loadings.
    pub loading_bounds: (f64, f64),
    /// Box for the innovation correlation (two-factor family).
    pub rho_bounds: (f64, f64),
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            mode: ModeOptions::default(),
            nm: NelderMeadOptions {
                max_iters: 400,
                x_tol: 1e-4,
                f_tol: 1e-7,
                initial_step: 0.10,
            },
            ar_bounds: (0.01, 0.99),
            loading_bounds: (0.01, 2.0),
            rho_bounds: (-0.95, 0.95),
        }
    }
}

/// A fitted model: free parameters at the optimum plus the full parameter
/// set they induce.
#[derive(Debug, Clone)]
pub struct MleFit {
    /// Names of the free parameters, in estimate order.
    pub parameter_names: Vec<&'static str>,
    /// Estimated free parameters.
    pub estimates: Vec<f64>,
    /// Full parameters at the optimum (levels re-derived from the data
    /// averages at the estimated loadings).
    pub psi: ModelParameters,
    /// Laplace log-likelihood at the optimum.
    pub loglik: f64,
    /// Smoothed latent means at the optimum.
    pub latent_means: Vec<DVector<f64>>,
    /// Objective evaluations spent across all restarts.
    pub evaluations: usize,
    /// Whether the best restart converged by tolerance.
    pub converged: bool,
}

/// Build full parameters from the free ones, re-deriving the levels from
/// observed averages so the average rates stay matched at any loading.
pub fn parameters_from_free(
    family: ModelFamily,
    free: &[f64],
    default_targets: &[f64],
    cumulative_targets: &[Vec<f64>],
) -> Result<ModelParameters> {
    match family {
        ModelFamily::DefaultOnlyProbit => {
            let (a, k) = (free[0], free[1]);
            let d = default_levels_from_averages(default_targets, k)?;
            ModelParameters::unit_variance(
                Levels::PerRowDefault(d),
                Loading::Scalar(k),
                Loading::zero(1),
                &[a],
                0.0,
            )
        }
        ModelFamily::TwoFactorProbit => {
            let (a_d, a_p, k_d, k_p, rho) = (free[0], free[1], free[2], free[3], free[4]);
            let levels =
                two_factor_levels_from_averages(default_targets, cumulative_targets, k_d, k_p)?;
            ModelParameters::unit_variance(
                levels,
                Loading::Diagonal(DVector::from_column_slice(&[k_d, k_p])),
                Loading::zero(2),
                &[a_d, a_p],
                rho,
            )
        }
        ModelFamily::MultiFactorLogistic => Err(CalibError::Unsupported(
            "maximum likelihood is implemented for the probit families only".into(),
        )),
    }
}

/// Names and box bounds of the free parameters of `family`.
pub fn free_parameters(
    family: ModelFamily,
    opts: &MleOptions,
) -> Result<(Vec<&'static str>, Vec<(f64, f64)>)> {
    match family {
        ModelFamily::DefaultOnlyProbit => Ok((
            vec!["a", "k"],
            vec![opts.ar_bounds, opts.loading_bounds],
        )),
        ModelFamily::TwoFactorProbit => Ok((
            vec!["a_d", "a_p", "k_d", "k_p", "rho"],
            vec![
                opts.ar_bounds,
                opts.ar_bounds,
                opts.loading_bounds,
                opts.loading_bounds,
                opts.rho_bounds,
            ],
        )),
        ModelFamily::MultiFactorLogistic => Err(CalibError::Unsupported(
            "maximum likelihood is implemented for the probit families only".into(),
        )),
    }
}

/// Maximize the Laplace log-likelihood over the free parameters of
/// `family`, with levels re-derived from the observed averages at every
/// trial point.
///
/// The search runs from three fixed starting points (the box quarter, mid
/// and three-quarter points) and keeps the best optimum.  Errors raised by
/// inner mode searches propagate instead of being masked.
pub fn mle_laplace(
    family: ModelFamily,
    series: &MigrationSeries,
    u: &ObservedFactors,
    opts: &MleOptions,
) -> Result<MleFit> {
    if u.dim() != 0 {
        return Err(CalibError::Unsupported(
            "observed-factor loadings are not estimated; calibrate without observed factors"
                .into(),
        ));
    }
    let (names, bounds) = free_parameters(family, opts)?;
    let default_targets = observed_default_averages(series);
    let cumulative_targets = observed_cumulative_averages(series);
    let objective = |v: &[f64]| -> Result<f64> {
        let psi = parameters_from_free(family, v, &default_targets, &cumulative_targets)?;
        let ll = laplace_loglik_for_series(family, series, &psi, u, &opts.mode)?;
        Ok(-ll.loglik)
    };
    let starts = default_starts(&bounds);
    let best = nelder_mead_multistart(objective, &starts, &bounds, &opts.nm)?;
    let psi = parameters_from_free(family, &best.x, &default_targets, &cumulative_targets)?;
    let fit = laplace_loglik_for_series(family, series, &psi, u, &opts.mode)?;
    Ok(MleFit {
        parameter_names: names,
        estimates: best.x,
        psi,
        loglik: fit.loglik,
        latent_means: fit.mode.latent_means,
        evaluations: best.evaluations,
        converged: best.converged,
    })
}
