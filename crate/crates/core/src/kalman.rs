//! Exact inference for linear-Gaussian state-space models.
//!
//! The model is, for periods `k = 1..=n`,
//!
//! ```text
//! y_k = Z_k x_k + c_k + eps_k,   eps_k ~ N(0, H_k)
//! x_k = A_k x_{k-1} + eta_k,     eta_k ~ N(0, Q_k),   x_0 ~ N(a0, P0)
//! ```
//!
//! The filter returns predicted and filtered moments together with the exact
//! log-likelihood; the fixed-interval smoother refines every period with all
//! observations.  Innovation covariances are handled through symmetric
//! Cholesky factorizations — never an explicit inverse — and covariance
//! updates are re-symmetrized to keep round-off from accumulating.
//!
//! Periods may carry an empty observation vector (dimension zero); they
//! contribute nothing to the likelihood and leave the prediction unchanged.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::CalibError;
use crate::math::{symmetrize, LN_2PI};
use crate::Result;

/// A linear-Gaussian state-space model with per-period system matrices.
#[derive(Debug, Clone)]
pub struct LinearGaussianSsm {
    /// Observation matrices `Z_k`, one per period (`m_k x s`).
    pub obs_map: Vec<DMatrix<f64>>,
    /// Observation noise covariances `H_k` (`m_k x m_k`).
    pub obs_noise: Vec<DMatrix<f64>>,
    /// Observation offsets `c_k`.
    pub offsets: Vec<DVector<f64>>,
    /// Observations `y_k`.
    pub observations: Vec<DVector<f64>>,
    /// Transition matrices `A_k` (`s x s`); `A_1` maps `x_0` to `x_1`.
    pub transitions: Vec<DMatrix<f64>>,
    /// Innovation covariances `Q_k`.
    pub innovations: Vec<DMatrix<f64>>,
    /// Initial mean `a0`.
    pub init_mean: DVector<f64>,
    /// Initial covariance `P0`.
    pub init_cov: DMatrix<f64>,
}

impl LinearGaussianSsm {
    /// Model with time-invariant dynamics `A`, `Q`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_constant_dynamics(
        obs_map: Vec<DMatrix<f64>>,
        obs_noise: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        observations: Vec<DVector<f64>>,
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        init_mean: DVector<f64>,
        init_cov: DMatrix<f64>,
    ) -> Self {
        let n = observations.len();
        Self {
            obs_map,
            obs_noise,
            offsets,
            observations,
            transitions: vec![a; n],
            innovations: vec![q; n],
            init_mean,
            init_cov,
        }
    }

    /// Number of periods.
    pub fn n_periods(&self) -> usize {
        self.observations.len()
    }

    /// State dimension.
    pub fn state_dim(&self) -> usize {
        self.init_mean.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.observations.len();
        let s = self.state_dim();
        if self.obs_map.len() != n
            || self.obs_noise.len() != n
            || self.offsets.len() != n
            || self.transitions.len() != n
            || self.innovations.len() != n
        {
            return Err(CalibError::Dimension(
                "state-space components must all cover the same periods".into(),
            ));
        }
        for k in 0..n {
            let m = self.observations[k].len();
            if self.obs_map[k].shape() != (m, s)
                || self.obs_noise[k].shape() != (m, m)
                || self.offsets[k].len() != m
                || self.transitions[k].shape() != (s, s)
                || self.innovations[k].shape() != (s, s)
            {
                return Err(CalibError::Dimension(format!(
                    "inconsistent dimensions at period {}",
                    k + 1
                )));
            }
        }
        if self.init_cov.shape() != (s, s) {
            return Err(CalibError::Dimension("P0 must be s x s".into()));
        }
        Ok(())
    }
}

/// Moments produced by the forward pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// One-step predictions `x_{k|k-1}`.
    pub predicted_means: Vec<DVector<f64>>,
    /// Prediction covariances `P_{k|k-1}`.
    pub predicted_covs: Vec<DMatrix<f64>>,
    /// Filtered means `x_{k|k}`.
    pub filtered_means: Vec<DVector<f64>>,
    /// Filtered covariances `P_{k|k}`.
    pub filtered_covs: Vec<DMatrix<f64>>,
    /// Exact log-likelihood `ln p(y_{1:n})`.
    pub loglik: f64,
}

/// Run the Kalman filter over all periods.
pub fn kalman_filter(ssm: &LinearGaussianSsm) -> Result<FilterOutput> {
    ssm.validate()?;
    let n = ssm.n_periods();
    let mut predicted_means = Vec::with_capacity(n);
    let mut predicted_covs = Vec::with_capacity(n);
    let mut filtered_means = Vec::with_capacity(n);
    let mut filtered_covs = Vec::with_capacity(n);
    let mut loglik = 0.0;

    let mut mean = ssm.init_mean.clone();
    let mut cov = ssm.init_cov.clone();
    for k in 0..n {
        // Predict.
        let a = &ssm.transitions[k];
        let x_pred = a * &mean;
        let mut p_pred = a * &cov * a.transpose() + &ssm.innovations[k];
        symmetrize(&mut p_pred);
        predicted_means.push(x_pred.clone());
        predicted_covs.push(p_pred.clone());

        let m = ssm.observations[k].len();
        if m == 0 {
            filtered_means.push(x_pred.clone());
            filtered_covs.push(p_pred.clone());
            mean = x_pred;
            cov = p_pred;
            continue;
        }

        // Update.
        let z = &ssm.obs_map[k];
        let innovation = &ssm.observations[k] - (z * &x_pred + &ssm.offsets[k]);
        let zp = z * &p_pred;
        let mut s_mat = &zp * z.transpose() + &ssm.obs_noise[k];
        symmetrize(&mut s_mat);
        let chol = Cholesky::new(s_mat).ok_or_else(|| CalibError::Conditioning {
            period: k + 1,
            detail: "innovation covariance is not positive definite".into(),
        })?;
        let ln_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let white = chol.solve(&innovation);
        loglik -= 0.5 * (m as f64 * LN_2PI + ln_det + innovation.dot(&white));

        // Gain G = P Z' S^{-1}, computed as (S^{-1} Z P)'.
        let gain = chol.solve(&zp).transpose();
        let x_filt = &x_pred + &gain * &innovation;
        let mut p_filt = &p_pred - &gain * &zp;
        symmetrize(&mut p_filt);

        filtered_means.push(x_filt.clone());
        filtered_covs.push(p_filt.clone());
        mean = x_filt;
        cov = p_filt;
    }

    Ok(FilterOutput {
        predicted_means,
        predicted_covs,
        filtered_means,
        filtered_covs,
        loglik,
    })
}

/// Moments produced by the backward pass.
#[derive(Debug, Clone)]
pub struct SmootherOutput {
    /// Smoothed means `x_{k|n}`.
    pub means: Vec<DVector<f64>>,
    /// Smoothed covariances `P_{k|n}`.
    pub covs: Vec<DMatrix<f64>>,
}

/// Fixed-interval (RTS) smoother over a completed filter pass.
pub fn rts_smoother(ssm: &LinearGaussianSsm, filter: &FilterOutput) -> Result<SmootherOutput> {
    let n = ssm.n_periods();
    let mut means = filter.filtered_means.clone();
    let mut covs = filter.filtered_covs.clone();
    for k in (0..n.saturating_sub(1)).rev() {
        let a_next = &ssm.transitions[k + 1];
        let p_pred_next = &filter.predicted_covs[k + 1];
        let chol = Cholesky::new(p_pred_next.clone()).ok_or_else(|| CalibError::Conditioning {
            period: k + 2,
            detail: "prediction covariance is not positive definite in the smoother".into(),
        })?;
        // C = P_{k|k} A' P_{k+1|k}^{-1}, via the symmetric solve.
        let ap = a_next * &filter.filtered_covs[k]; // s x s
        let c = chol.solve(&ap).transpose();
        means[k] = &filter.filtered_means[k] + &c * (&means[k + 1] - &filter.predicted_means[k + 1]);
        let mut cov = &filter.filtered_covs[k]
            + &c * (&covs[k + 1] - p_pred_next) * c.transpose();
        symmetrize(&mut cov);
        covs[k] = cov;
    }
    Ok(SmootherOutput { means, covs })
}

/// Draw `n_draws` samples from each per-period filtered posterior
/// `N(x_{k|k}, P_{k|k})`.
///
/// Covariances only need to be positive semi-definite: rank-deficient
/// directions simply stay at the mean.
pub fn kalman_posterior_draws<R: Rng + ?Sized>(
    filter: &FilterOutput,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let mut out = Vec::with_capacity(filter.filtered_means.len());
    for (mean, cov) in filter.filtered_means.iter().zip(&filter.filtered_covs) {
        let factor = psd_factor(cov)?;
        let s = mean.len();
        let mut draws = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let z = DVector::from_iterator(s, (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)));
            draws.push(mean + &factor * z);
        }
        out.push(draws);
    }
    Ok(out)
}

/// A square root of a symmetric PSD matrix: Cholesky when positive definite,
/// eigenvalue square root with clamped small negatives otherwise.
pub fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok(chol.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig
        .eigenvalues
        .iter()
        .fold(1.0f64, |a, &b| a.max(b.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(CalibError::NotPositiveDefinite(
            "covariance has a significantly negative eigenvalue".into(),
        ));
    }
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals))
}
