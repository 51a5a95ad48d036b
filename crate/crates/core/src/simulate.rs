//! Synthetic panel generation under the mixture transition model, plus the
//! moment-matching derivation of level parameters from average rates.
//!
//! The level derivation inverts `E[Phi(d + k X)] = Phi(d / sqrt(1 + k^2))`
//! for a standard normal `X`, so a target long-run average rate pins down
//! `d` once the loading is fixed.  The simulators draw a latent factor path
//! and then per-row multinomial counts through sequential conditional
//! binomials; exposures are reset to the configured populations every
//! period.  Optional renormalization rescales the drawn innovations so
//! their sample mean and covariance match the model exactly, which removes
//! path-level sampling noise from repeated-scenario studies.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};

use crate::domain::{
    LatentPath, Levels, MigrationSeries, ModelParameters, ObservedFactors, SignalPath,
};
use crate::error::CalibError;
use crate::math::norm_quantile;
use crate::models::{signal_from_factors, transition_row, ModelFamily};
use crate::Result;

/// Level parameters for the default-only probit family from target average
/// default rates: `d_i = sqrt(1 + k^2) * Phi^{-1}(rbar_i)`.
///
/// Valid for the unit-variance convention, where the stationary latent
/// factor is standard normal.  Every rate must lie strictly in `(0, 1)`.
pub fn default_levels_from_averages(rbar: &[f64], k: f64) -> Result<Vec<f64>> {
    let scale = (1.0 + k * k).sqrt();
    rbar.iter()
        .enumerate()
        .map(|(i, &r)| {
            if !(r > 0.0 && r < 1.0) {
                return Err(CalibError::Invalid(format!(
                    "average rate {r} of row {} is outside (0, 1)",
                    i + 1
                )));
            }
            Ok(scale * norm_quantile(r))
        })
        .collect()
}

/// Level parameters for the two-factor probit family from target average
/// default rates and average cumulative migration probabilities.
///
/// `cumulative[i][j]` is the target probability of moving to destination
/// `j + 2` or worse (1-based), conditional on survival, so each row holds
/// `R - 2` strictly decreasing values in `(0, 1)`.  The thresholds come out
/// as `sqrt(1 + k_d^2) * Phi^{-1}(pdbar_i)` and
/// `sqrt(1 + k_p^2) * Phi^{-1}(cumulative[i][j])`.
pub fn two_factor_levels_from_averages(
    pdbar: &[f64],
    cumulative: &[Vec<f64>],
    k_d: f64,
    k_p: f64,
) -> Result<Levels> {
    if cumulative.len() != pdbar.len() {
        return Err(CalibError::Dimension(format!(
            "{} default rates but {} cumulative rows",
            pdbar.len(),
            cumulative.len()
        )));
    }
    let default = default_levels_from_averages(pdbar, k_d)?;
    let scale = (1.0 + k_p * k_p).sqrt();
    let mut cum = Vec::with_capacity(cumulative.len());
    for (i, row) in cumulative.iter().enumerate() {
        let mut out = Vec::with_capacity(row.len());
        for &c in row {
            if !(c > 0.0 && c < 1.0) {
                return Err(CalibError::Invalid(format!(
                    "cumulative target {c} of row {} is outside (0, 1)",
                    i + 1
                )));
            }
            out.push(scale * norm_quantile(c));
        }
        for w in out.windows(2) {
            if !(w[0] > w[1]) {
                return Err(CalibError::Invalid(format!(
                    "cumulative targets of row {} must be strictly decreasing",
                    i + 1
                )));
            }
        }
        cum.push(out);
    }
    Ok(Levels::Thresholds {
        default,
        cumulative: cum,
    })
}

/// Stationary covariance of `x_k = A x_{k-1} + eta_k`, `eta ~ N(0, Q)`:
/// the solution of the discrete Lyapunov equation `S = A S A' + Q`.
pub fn stationary_covariance(ar: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = ar.nrows();
    if ar.ncols() != s || q.shape() != (s, s) {
        return Err(CalibError::Dimension("A and Q must be square s x s".into()));
    }
    if crate::domain::spectral_radius(ar) >= 1.0 {
        return Err(CalibError::NonStationary {
            rho: crate::domain::spectral_radius(ar),
        });
    }
    // vec(S) = (I - A (x) A)^{-1} vec(Q), column-major vectorization.
    let kron = ar.kronecker(ar);
    let lhs = DMatrix::identity(s * s, s * s) - kron;
    let vec_q = DVector::from_iterator(s * s, q.iter().copied());
    let vec_s = lhs.lu().solve(&vec_q).ok_or_else(|| {
        CalibError::NotPositiveDefinite("Lyapunov system for the stationary covariance".into())
    })?;
    let mut out = DMatrix::from_iterator(s, s, vec_s.iter().copied());
    crate::math::symmetrize(&mut out);
    Ok(out)
}

fn psd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(m.clone())
        .ok_or_else(|| CalibError::NotPositiveDefinite(format!("{what} has no Cholesky factor")))
}

fn draw_gaussian<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let s = mean.len();
    let z = DVector::from_iterator(s, (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)));
    mean + chol.l() * z
}

/// Rescale innovations in place so their sample mean is exactly zero and
/// their sample covariance (denominator `n`) is exactly `Q`.
///
/// Centers the draws, whitens with the Cholesky factor of the realized
/// covariance and recolors with the factor of `Q`.  Needs more draws than
/// factor dimensions for the realized covariance to be invertible.
pub fn renormalize_innovations(innovations: &mut [DVector<f64>], q: &DMatrix<f64>) -> Result<()> {
    let n = innovations.len();
    let s = q.nrows();
    if n <= s {
        return Err(CalibError::Invalid(format!(
            "renormalization needs more than {s} innovation draws, got {n}"
        )));
    }
    let mut mean = DVector::zeros(s);
    for e in innovations.iter() {
        mean += e;
    }
    mean /= n as f64;
    for e in innovations.iter_mut() {
        *e -= &mean;
    }
    let mut cov = DMatrix::zeros(s, s);
    for e in innovations.iter() {
        cov += e * e.transpose();
    }
    cov /= n as f64;
    let chol_sample = psd_cholesky(&cov, "realized innovation covariance")?;
    let chol_q = psd_cholesky(q, "Q")?;
    // e -> Lq Ls^{-1} e maps the realized second moments onto Q.
    let ls_inv = chol_sample
        .l()
        .try_inverse()
        .ok_or_else(|| CalibError::NotPositiveDefinite("realized innovation factor".into()))?;
    let map = chol_q.l() * ls_inv;
    for e in innovations.iter_mut() {
        *e = &map * &*e;
    }
    Ok(())
}

fn simulate_latent_from_init<R: Rng + ?Sized>(
    ar: &DMatrix<f64>,
    q: &DMatrix<f64>,
    init_mean: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    n_periods: usize,
    renormalize: bool,
    rng: &mut R,
) -> Result<LatentPath> {
    if n_periods == 0 {
        return Err(CalibError::Invalid("need at least one period".into()));
    }
    let chol_q = psd_cholesky(q, "Q")?;
    let chol_p0 = psd_cholesky(init_cov, "initial covariance")?;
    let initial = draw_gaussian(init_mean, &chol_p0, rng);
    let zero = DVector::zeros(q.nrows());
    let mut innovations: Vec<DVector<f64>> = (0..n_periods)
        .map(|_| draw_gaussian(&zero, &chol_q, rng))
        .collect();
    if renormalize {
        renormalize_innovations(&mut innovations, q)?;
    }
    let mut states = Vec::with_capacity(n_periods);
    let mut prev = initial.clone();
    for e in &innovations {
        let x = ar * &prev + e;
        states.push(x.clone());
        prev = x;
    }
    Ok(LatentPath {
        states,
        innovations,
        initial,
    })
}

/// Draw a latent factor path of length `n_periods` with the initial state
/// drawn from the stationary law of the recursion.
pub fn simulate_latent<R: Rng + ?Sized>(
    ar: &DMatrix<f64>,
    q: &DMatrix<f64>,
    n_periods: usize,
    renormalize: bool,
    rng: &mut R,
) -> Result<LatentPath> {
    let stat = stationary_covariance(ar, q)?;
    let zero = DVector::zeros(ar.nrows());
    simulate_latent_from_init(ar, q, &zero, &stat, n_periods, renormalize, rng)
}

/// A simulated migration panel with its generating path.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    /// Migration counts, exposures reset to the populations every period.
    pub series: MigrationSeries,
    /// The latent factor path behind the counts.
    pub latent: LatentPath,
    /// The signal path implied by the parameters and the latent path.
    pub signals: SignalPath,
}

/// Draw one multinomial row through sequential conditional binomials: cell
/// `j` is binomial on the units left after cells `0..j`, with the
/// conditional probability `p_j / (1 - p_0 - .. - p_{j-1})`.
fn draw_multinomial_row<R: Rng + ?Sized>(n: i64, probs: &[f64], rng: &mut R) -> Vec<i64> {
    let cells = probs.len();
    let mut out = vec![0i64; cells];
    let mut remaining = n as u64;
    let mut mass_left = 1.0f64;
    for j in 0..cells - 1 {
        if remaining == 0 {
            break;
        }
        let p_cond = if mass_left > 0.0 {
            (probs[j] / mass_left).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let draw = if p_cond >= 1.0 {
            remaining
        } else if p_cond <= 0.0 {
            0
        } else {
            Binomial::new(remaining, p_cond)
                .expect("conditional probability is in [0, 1]")
                .sample(rng)
        };
        out[j] = draw as i64;
        remaining -= draw;
        mass_left -= probs[j];
    }
    out[cells - 1] = remaining as i64;
    out
}

/// Simulate a migration panel of `n_periods` periods under `family` with
/// parameters `psi` and observed factors `u`.
///
/// `populations[i]` is the exposure of performing rating `i + 1`, applied
/// afresh every period.  The latent path starts from the initial law in
/// `psi`; with `renormalize` the innovation draws are rescaled to match
/// `Q` exactly before the path is built.
pub fn simulate_migrations<R: Rng + ?Sized>(
    family: ModelFamily,
    psi: &ModelParameters,
    u: &ObservedFactors,
    populations: &[i64],
    n_periods: usize,
    renormalize: bool,
    rng: &mut R,
) -> Result<SimulatedPanel> {
    let r = psi.levels.n_rows() + 1;
    crate::models::check_family_compat(family, psi, r)?;
    if populations.len() != r - 1 {
        return Err(CalibError::Dimension(format!(
            "{} populations for {} performing ratings",
            populations.len(),
            r - 1
        )));
    }
    if populations.iter().any(|&n| n < 0) {
        return Err(CalibError::Invalid("populations must be non-negative".into()));
    }
    let latent = simulate_latent_from_init(
        &psi.ar,
        &psi.innovation_cov,
        &psi.init_mean,
        &psi.init_cov,
        n_periods,
        renormalize,
        rng,
    )?;
    let signals = signal_from_factors(family, psi, &latent.states, u, r)?;
    let mut counts = Vec::with_capacity(n_periods);
    for k in 0..n_periods {
        let theta_k = &signals.theta[k];
        let mut m = DMatrix::zeros(r - 1, r);
        for i in 0..r - 1 {
            let t_row = transition_row(family, &psi.levels, i, theta_k, r);
            let row = draw_multinomial_row(populations[i], &t_row, rng);
            for j in 0..r {
                m[(i, j)] = row[j];
            }
        }
        counts.push(m);
    }
    Ok(SimulatedPanel {
        series: MigrationSeries::from_counts(counts)?,
        latent,
        signals,
    })
}
