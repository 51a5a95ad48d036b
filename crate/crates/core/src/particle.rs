//! Particle-filter likelihood estimators: a bootstrap filter and an
//! importance filter whose proposals come from the Laplace auxiliary model.
//!
//! Both estimators share the same skeleton — propagate or propose, weight,
//! estimate the per-period conditional likelihood by the weight mean, then
//! resample multinomially every period.  The importance filter proposes
//! each period from the filtered posterior `N(x_{k|k}, P_{k|k})` of the
//! auxiliary model at the posterior mode, independently of the particle
//! history, and corrects with the exact transition and proposal densities;
//! on data with rare events this shrinks the weight variance by orders of
//! magnitude relative to blind propagation.
//!
//! Determinism: all random draws happen on the caller's RNG in a fixed
//! sequential order, while the weight evaluations are pure and mapped in
//! index order (in parallel when the `parallel` feature is active), so
//! results are bit-identical for any worker count.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::domain::{MigrationSeries, ModelParameters, ObservedFactors};
use crate::error::CalibError;
use crate::laplace::{estimate_mode, ModeOptions};
use crate::math::log_sum_exp;
use crate::models::{
    latent_signal_model, LatentSignalModel, ModelFamily, MultinomialObservations, ObservationModel,
};
use crate::parallel::par_map_indexed;
use crate::Result;

/// Particle-filter likelihood estimate with per-period diagnostics.
#[derive(Debug, Clone)]
pub struct PfLikelihood {
    /// Estimated data log-likelihood (sum of the per-period terms).
    pub loglik: f64,
    /// Per-period conditional log-likelihood estimates.
    pub per_period: Vec<f64>,
    /// Effective sample size after weighting, per period.
    pub ess: Vec<f64>,
    /// Periods (1-based) where the importance proposal degenerated and the
    /// filter fell back to bootstrap propagation.
    pub fallback_periods: Vec<usize>,
}

/// Small dense Gaussian evaluator: precomputed inverse Cholesky factor and
/// log normalization for repeated density evaluations.
struct SmallGauss {
    dim: usize,
    /// Row-major inverse of the lower Cholesky factor.
    lower_inv: Vec<f64>,
    ln_norm: f64,
}

impl SmallGauss {
    fn new(cov: &DMatrix<f64>, what: &str) -> Result<Self> {
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| CalibError::NotPositiveDefinite(what.into()))?;
        let dim = cov.nrows();
        let l = chol.l();
        let ln_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
        let l_inv = l.try_inverse().ok_or_else(|| {
            CalibError::NotPositiveDefinite(format!("{what}: factor not invertible"))
        })?;
        let mut lower_inv = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                lower_inv[i * dim + j] = l_inv[(i, j)];
            }
        }
        Ok(Self {
            dim,
            lower_inv,
            ln_norm: -0.5 * dim as f64 * crate::math::LN_2PI - ln_det,
        })
    }

    /// `ln N(resid; 0, cov)` for a residual slice of length `dim`.
    fn ln_density(&self, resid: &[f64]) -> f64 {
        let mut quad = 0.0;
        for i in 0..self.dim {
            let mut w = 0.0;
            for j in 0..=i {
                w += self.lower_inv[i * self.dim + j] * resid[j];
            }
            quad += w * w;
        }
        self.ln_norm - 0.5 * quad
    }
}

/// Shared per-filter precomputation on the latent model.
struct Dynamics {
    s: usize,
    /// Row-major `A`.
    a: Vec<f64>,
    /// Row-major lower Cholesky factor of `Q` (for propagation draws).
    q_lower: Vec<f64>,
    trans: SmallGauss,
}

impl Dynamics {
    fn new(lat: &LatentSignalModel) -> Result<Self> {
        let s = lat.ar.nrows();
        let chol_q = Cholesky::new(lat.innovation_cov.clone())
            .ok_or_else(|| CalibError::NotPositiveDefinite("Q".into()))?;
        let mut a = vec![0.0; s * s];
        let mut q_lower = vec![0.0; s * s];
        let l = chol_q.l();
        for i in 0..s {
            for j in 0..s {
                a[i * s + j] = lat.ar[(i, j)];
                q_lower[i * s + j] = l[(i, j)];
            }
        }
        Ok(Self {
            s,
            a,
            q_lower,
            trans: SmallGauss::new(&lat.innovation_cov, "Q")?,
        })
    }

    /// `out = A x`.
    fn apply_a(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.s {
            let mut v = 0.0;
            for j in 0..self.s {
                v += self.a[i * self.s + j] * x[j];
            }
            out[i] = v;
        }
    }
}

fn draw_standard<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Draw initial particles from `N(a0, P0)` into flat storage.
fn init_particles<R: Rng + ?Sized>(
    lat: &LatentSignalModel,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = lat.ar.nrows();
    let chol = Cholesky::new(lat.init_cov.clone())
        .ok_or_else(|| CalibError::NotPositiveDefinite("P0".into()))?;
    let l = chol.l();
    let mut lower = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            lower[i * s + j] = l[(i, j)];
        }
    }
    let mut particles = vec![0.0; n * s];
    let mut z = vec![0.0; s];
    for p in 0..n {
        draw_standard(rng, &mut z);
        let x = &mut particles[p * s..(p + 1) * s];
        for i in 0..s {
            let mut v = lat.init_mean[i];
            for j in 0..=i {
                v += lower[i * s + j] * z[j];
            }
            x[i] = v;
        }
    }
    Ok(particles)
}

/// Weight normalization, conditional likelihood term and effective sample
/// size for one period; errors once every weight vanishes.
fn weigh_period(ln_w: &[f64], period: usize) -> Result<(Vec<f64>, f64, f64)> {
    let n = ln_w.len() as f64;
    let lse = log_sum_exp(ln_w);
    if !lse.is_finite() {
        return Err(CalibError::WeightCollapse { period });
    }
    let mut weights: Vec<f64> = ln_w.iter().map(|&w| (w - lse).exp()).collect();
    let mut sum_sq = 0.0;
    let mut total = 0.0;
    for w in &weights {
        total += w;
        sum_sq += w * w;
    }
    for w in weights.iter_mut() {
        *w /= total;
    }
    let ess = total * total / sum_sq;
    Ok((weights, lse - n.ln(), ess))
}

/// Multinomial resampling: `n` independent draws from `weights` by binary
/// search in the cumulative sum, copying stride-`s` states.
fn resample<R: Rng + ?Sized>(
    src: &[f64],
    weights: &[f64],
    s: usize,
    rng: &mut R,
    dst: &mut Vec<f64>,
) {
    let n = weights.len();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &w in weights {
        acc += w;
        cum.push(acc);
    }
    let total = acc;
    dst.clear();
    dst.reserve(n * s);
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        let idx = cum.partition_point(|&c| c < u).min(n - 1);
        dst.extend_from_slice(&src[idx * s..(idx + 1) * s]);
    }
}

/// Bootstrap particle filter: blind propagation through the state
/// recursion, observation weights, multinomial resampling every period.
pub fn bootstrap_pf<O: ObservationModel + ?Sized, R: Rng + ?Sized>(
    obs: &O,
    lat: &LatentSignalModel,
    n_particles: usize,
    rng: &mut R,
) -> Result<PfLikelihood> {
    let n_periods = obs.n_periods();
    if lat.n_periods() != n_periods {
        return Err(CalibError::Dimension(
            "observation model and signal model cover different periods".into(),
        ));
    }
    if n_particles == 0 {
        return Err(CalibError::Invalid("need at least one particle".into()));
    }
    let dyn_ = Dynamics::new(lat)?;
    let s = dyn_.s;
    let mut particles = init_particles(lat, n_particles, rng)?;
    let mut propagated = vec![0.0; n_particles * s];
    let mut resampled = Vec::with_capacity(n_particles * s);
    let mut per_period = Vec::with_capacity(n_periods);
    let mut ess_trace = Vec::with_capacity(n_periods);
    let mut z = vec![0.0; s];
    for k in 0..n_periods {
        // Sequential propagation draws keep the RNG stream layout fixed.
        for p in 0..n_particles {
            draw_standard(rng, &mut z);
            let x = &particles[p * s..(p + 1) * s];
            let out = &mut propagated[p * s..(p + 1) * s];
            dyn_.apply_a(x, out);
            for i in 0..s {
                for j in 0..=i {
                    out[i] += dyn_.q_lower[i * s + j] * z[j];
                }
            }
        }
        let prop_ref = &propagated;
        let ln_w = par_map_indexed(n_particles, |p| {
            let x = &prop_ref[p * s..(p + 1) * s];
            let theta = lat.signal_at(k, &DVector::from_column_slice(x));
            obs.ln_likelihood(k, theta.as_slice())
        });
        let (weights, ll_k, ess) = weigh_period(&ln_w, k + 1)?;
        per_period.push(ll_k);
        ess_trace.push(ess);
        resample(&propagated, &weights, s, rng, &mut resampled);
        std::mem::swap(&mut particles, &mut resampled);
    }
    Ok(PfLikelihood {
        loglik: per_period.iter().sum(),
        per_period,
        ess: ess_trace,
        fallback_periods: Vec::new(),
    })
}

/// Importance particle filter with Laplace-posterior proposals.
///
/// Runs the posterior mode search, takes the filtered per-period posteriors
/// `N(x_{k|k}, P_{k|k})` of the auxiliary model as independent proposals,
/// and weights with the exact ratio `p(M_k | x) p(x | x_prev) / q(x)`.
/// Periods whose proposal covariance is not positive definite fall back to
/// bootstrap propagation and are recorded in the result.
pub fn pf_importance<O: ObservationModel + ?Sized, R: Rng + ?Sized>(
    obs: &O,
    lat: &LatentSignalModel,
    n_particles: usize,
    mode_opts: &ModeOptions,
    rng: &mut R,
) -> Result<PfLikelihood> {
    let n_periods = obs.n_periods();
    if n_particles == 0 {
        return Err(CalibError::Invalid("need at least one particle".into()));
    }
    let mode = estimate_mode(obs, lat, mode_opts)?;
    let dyn_ = Dynamics::new(lat)?;
    let s = dyn_.s;

    // Per-period proposal pieces; a degenerate covariance marks a fallback.
    let mut proposals: Vec<Option<(Vec<f64>, Vec<f64>, SmallGauss)>> =
        Vec::with_capacity(n_periods);
    for k in 0..n_periods {
        let mean = &mode.filter.filtered_means[k];
        let cov = &mode.filter.filtered_covs[k];
        match (
            Cholesky::new(cov.clone()),
            SmallGauss::new(cov, "proposal covariance"),
        ) {
            (Some(chol), Ok(gauss)) => {
                let l = chol.l();
                let mut lower = vec![0.0; s * s];
                for i in 0..s {
                    for j in 0..s {
                        lower[i * s + j] = l[(i, j)];
                    }
                }
                let mean_v: Vec<f64> = mean.iter().copied().collect();
                proposals.push(Some((mean_v, lower, gauss)));
            }
            _ => proposals.push(None),
        }
    }

    let mut particles = init_particles(lat, n_particles, rng)?;
    let mut proposed = vec![0.0; n_particles * s];
    let mut resampled = Vec::with_capacity(n_particles * s);
    let mut per_period = Vec::with_capacity(n_periods);
    let mut ess_trace = Vec::with_capacity(n_periods);
    let mut fallback_periods = Vec::new();
    let mut z = vec![0.0; s];
    for k in 0..n_periods {
        let ln_w = match &proposals[k] {
            Some((mean, lower, prop_gauss)) => {
                for p in 0..n_particles {
                    draw_standard(rng, &mut z);
                    let out = &mut proposed[p * s..(p + 1) * s];
                    for i in 0..s {
                        let mut v = mean[i];
                        for j in 0..=i {
                            v += lower[i * s + j] * z[j];
                        }
                        out[i] = v;
                    }
                }
                let prop_ref = &proposed;
                let prev_ref = &particles;
                par_map_indexed(n_particles, |p| {
                    let x = &prop_ref[p * s..(p + 1) * s];
                    let x_prev = &prev_ref[p * s..(p + 1) * s];
                    let theta = lat.signal_at(k, &DVector::from_column_slice(x));
                    let mut resid_t = [0.0; 8];
                    let resid_t = &mut resid_t[..s];
                    dyn_.apply_a(x_prev, resid_t);
                    for i in 0..s {
                        resid_t[i] = x[i] - resid_t[i];
                    }
                    let mut resid_q = [0.0; 8];
                    let resid_q = &mut resid_q[..s];
                    for i in 0..s {
                        resid_q[i] = x[i] - mean[i];
                    }
                    obs.ln_likelihood(k, theta.as_slice()) + dyn_.trans.ln_density(resid_t)
                        - prop_gauss.ln_density(resid_q)
                })
            }
            None => {
                // Bootstrap step for this period.
                fallback_periods.push(k + 1);
                for p in 0..n_particles {
                    draw_standard(rng, &mut z);
                    let x = &particles[p * s..(p + 1) * s];
                    let out = &mut proposed[p * s..(p + 1) * s];
                    dyn_.apply_a(x, out);
                    for i in 0..s {
                        for j in 0..=i {
                            out[i] += dyn_.q_lower[i * s + j] * z[j];
                        }
                    }
                }
                let prop_ref = &proposed;
                par_map_indexed(n_particles, |p| {
                    let x = &prop_ref[p * s..(p + 1) * s];
                    let theta = lat.signal_at(k, &DVector::from_column_slice(x));
                    obs.ln_likelihood(k, theta.as_slice())
                })
            }
        };
        let (weights, ll_k, ess) = weigh_period(&ln_w, k + 1)?;
        per_period.push(ll_k);
        ess_trace.push(ess);
        resample(&proposed, &weights, s, rng, &mut resampled);
        std::mem::swap(&mut particles, &mut resampled);
    }
    Ok(PfLikelihood {
        loglik: per_period.iter().sum(),
        per_period,
        ess: ess_trace,
        fallback_periods,
    })
}

/// Bootstrap filter likelihood for a migration series under `family`.
pub fn bootstrap_pf_for_series<R: Rng + ?Sized>(
    family: ModelFamily,
    series: &MigrationSeries,
    psi: &ModelParameters,
    u: &ObservedFactors,
    n_particles: usize,
    rng: &mut R,
) -> Result<PfLikelihood> {
    let r = series.n_ratings();
    let lat = latent_signal_model(family, psi, u, r, series.n_periods())?;
    let obs = MultinomialObservations::new(family, series, psi.levels.clone())?;
    bootstrap_pf(&obs, &lat, n_particles, rng)
}

/// Importance filter likelihood for a migration series under `family`.
pub fn pf_importance_for_series<R: Rng + ?Sized>(
    family: ModelFamily,
    series: &MigrationSeries,
    psi: &ModelParameters,
    u: &ObservedFactors,
    n_particles: usize,
    mode_opts: &ModeOptions,
    rng: &mut R,
) -> Result<PfLikelihood> {
    let r = series.n_ratings();
    let lat = latent_signal_model(family, psi, u, r, series.n_periods())?;
    let obs = MultinomialObservations::new(family, series, psi.levels.clone())?;
    pf_importance(&obs, &lat, n_particles, mode_opts, rng)
}
