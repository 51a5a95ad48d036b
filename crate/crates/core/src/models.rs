//! Model families: how signals become transition probabilities and how
//! migration counts enter the likelihood.
//!
//! Three families are supported.
//!
//! * [`ModelFamily::DefaultOnlyProbit`] — one signal per performing row,
//!   `theta_{i,k} = d_i + K x_k + L u_k`; a client defaults with probability
//!   `Phi(theta_{i,k})` and otherwise keeps its rating.  Counts enter as
//!   binomials in the default column.
//! * [`ModelFamily::TwoFactorProbit`] — one shared signal pair
//!   `(theta^D_k, theta^P_k) = K x_k + L u_k` per period.  Row `i` defaults
//!   with probability `Phi(dD_i + theta^D_k)`; survivors migrate by an
//!   ordered probit over strictly decreasing cumulative thresholds, with the
//!   boundary conventions `+inf` before the first destination and `-inf`
//!   after the last.  The levels enter the probabilities, not the signal.
//! * [`ModelFamily::MultiFactorLogistic`] — one signal per cell,
//!   `theta_{ij,k} = d_{ij} + K_{ij}' x_k + L_{ij}' u_k`, mapped through a
//!   row softmax (evaluated with max subtraction).
//!
//! The period signal vector is the row-major flattening of the family's
//! signal matrix; gradients, Hessian blocks and auxiliary observation
//! vectors all use that one ordering.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::domain::{
    Levels, Loading, MigrationSeries, ModelParameters, ObservedFactors, SignalPath,
};
use crate::error::CalibError;
use crate::math::{ln_multinomial_coef, log_sum_exp, norm_cdf, norm_pdf, norm_sf};
use crate::Result;

/// Response family of a transition model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// Binomial default/no-default with probit link (`s = 1`).
    DefaultOnlyProbit,
    /// Ordered probit with separate default and migration factors (`s = 2`).
    TwoFactorProbit,
    /// Per-cell softmax with free factor dimension.
    MultiFactorLogistic,
}

impl ModelFamily {
    /// Shape `(rows, cols)` of the per-period signal matrix for a scheme
    /// with `r` ratings.
    pub fn signal_shape(&self, r: usize) -> (usize, usize) {
        match self {
            ModelFamily::DefaultOnlyProbit => (r - 1, 1),
            ModelFamily::TwoFactorProbit => (1, 2),
            ModelFamily::MultiFactorLogistic => (r - 1, r),
        }
    }

    /// Flattened per-period signal dimension.
    pub fn signal_dim(&self, r: usize) -> usize {
        let (rows, cols) = self.signal_shape(r);
        rows * cols
    }
}

/// Check that parameters are structurally compatible with `family` and a
/// series with `r` ratings.
pub fn check_family_compat(family: ModelFamily, psi: &ModelParameters, r: usize) -> Result<()> {
    psi.validate()?;
    let s = psi.factor_dim();
    match family {
        ModelFamily::DefaultOnlyProbit => {
            if s != 1 {
                return Err(CalibError::Dimension(format!(
                    "default-only family uses one latent factor, parameters have {s}"
                )));
            }
            match &psi.levels {
                Levels::PerRowDefault(d) if d.len() == r - 1 => {}
                Levels::PerRowDefault(d) => {
                    return Err(CalibError::Dimension(format!(
                        "levels cover {} rows, series has {}",
                        d.len(),
                        r - 1
                    )))
                }
                _ => {
                    return Err(CalibError::Invalid(
                        "default-only family requires per-row default levels".into(),
                    ))
                }
            }
            if !matches!(psi.factor_loading, Loading::Scalar(_)) {
                return Err(CalibError::Invalid(
                    "default-only family requires a scalar factor loading".into(),
                ));
            }
        }
        ModelFamily::TwoFactorProbit => {
            if s != 2 {
                return Err(CalibError::Dimension(format!(
                    "two-factor family uses two latent factors, parameters have {s}"
                )));
            }
            if r < 3 {
                return Err(CalibError::Invalid(
                    "two-factor family needs at least two performing ratings".into(),
                ));
            }
            match &psi.levels {
                Levels::Thresholds {
                    default,
                    cumulative,
                } => {
                    if default.len() != r - 1
                        || cumulative.len() != r - 1
                        || cumulative.iter().any(|c| c.len() != r - 2)
                    {
                        return Err(CalibError::Dimension(
                            "two-factor levels must hold R-1 default thresholds and R-2 cumulative thresholds per row"
                                .into(),
                        ));
                    }
                }
                _ => {
                    return Err(CalibError::Invalid(
                        "two-factor family requires threshold levels".into(),
                    ))
                }
            }
            if !matches!(&psi.factor_loading, Loading::Diagonal(v) if v.len() == 2) {
                return Err(CalibError::Invalid(
                    "two-factor family requires a diagonal loading of dimension 2".into(),
                ));
            }
        }
        ModelFamily::MultiFactorLogistic => {
            match &psi.levels {
                Levels::PerCell(d) if d.nrows() == r - 1 && d.ncols() == r => {}
                _ => {
                    return Err(CalibError::Invalid(
                        "logistic family requires per-cell levels of shape (R-1) x R".into(),
                    ))
                }
            }
            match &psi.factor_loading {
                Loading::PerCell(m) if m.nrows() == (r - 1) * r && m.ncols() == s => {}
                _ => {
                    return Err(CalibError::Invalid(
                        "logistic family requires per-cell loadings of shape (R-1)R x s".into(),
                    ))
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Signals and transition probabilities
// ---------------------------------------------------------------------------

fn observed_offset(loading: &Loading, u: &DVector<f64>) -> Result<f64> {
    match loading {
        Loading::Scalar(l) => {
            if u.len() > 1 {
                return Err(CalibError::Dimension(
                    "scalar observed loading with multi-dimensional factors".into(),
                ));
            }
            Ok(if u.len() == 1 { l * u[0] } else { 0.0 })
        }
        Loading::Diagonal(v) => {
            if u.len() != v.len() && u.len() != 0 {
                return Err(CalibError::Dimension(format!(
                    "observed loading has {} entries, factors have {}",
                    v.len(),
                    u.len()
                )));
            }
            Ok(v.iter().zip(u.iter()).map(|(a, b)| a * b).sum())
        }
        Loading::PerCell(_) => Err(CalibError::Invalid(
            "per-cell observed loading cannot be contracted to one offset".into(),
        )),
    }
}

/// The linear-Gaussian state side of a transition model: the AR(1) factor
/// law plus the affine map `theta_k = c_k + Z_k x_k` from states to the
/// flattened period signals.
#[derive(Debug, Clone)]
pub struct LatentSignalModel {
    /// Autoregressive matrix `A`.
    pub ar: DMatrix<f64>,
    /// Innovation covariance `Q`.
    pub innovation_cov: DMatrix<f64>,
    /// Initial mean `a0`.
    pub init_mean: DVector<f64>,
    /// Initial covariance `P0`.
    pub init_cov: DMatrix<f64>,
    /// Signal map `Z_k` (constant across periods for every family).
    pub obs_map: DMatrix<f64>,
    /// Per-period signal offsets `c_k` (levels and observed factors).
    pub offsets: Vec<DVector<f64>>,
}

/// Build the latent signal model of `family` for `n_periods` periods on a
/// scheme with `r` ratings.
pub fn latent_signal_model(
    family: ModelFamily,
    psi: &ModelParameters,
    u: &ObservedFactors,
    r: usize,
    n_periods: usize,
) -> Result<LatentSignalModel> {
    check_family_compat(family, psi, r)?;
    if u.values.len() != n_periods && !u.values.is_empty() {
        return Err(CalibError::Dimension(format!(
            "observed factors cover {} periods, series has {n_periods}",
            u.values.len()
        )));
    }
    let empty = DVector::zeros(0);
    let u_at = |k: usize| -> &DVector<f64> {
        if u.values.is_empty() {
            &empty
        } else {
            &u.values[k]
        }
    };
    let s = psi.factor_dim();
    let dim = family.signal_dim(r);
    let mut z = DMatrix::zeros(dim, s);
    let mut offsets = Vec::with_capacity(n_periods);
    match family {
        ModelFamily::DefaultOnlyProbit => {
            let k = match psi.factor_loading {
                Loading::Scalar(k) => k,
                _ => unreachable!("checked by compat"),
            };
            let d = match &psi.levels {
                Levels::PerRowDefault(d) => d,
                _ => unreachable!("checked by compat"),
            };
            for i in 0..dim {
                z[(i, 0)] = k;
            }
            for t in 0..n_periods {
                let lu = observed_offset(&psi.observed_loading, u_at(t))?;
                offsets.push(DVector::from_iterator(dim, d.iter().map(|di| di + lu)));
            }
        }
        ModelFamily::TwoFactorProbit => {
            let kv = match &psi.factor_loading {
                Loading::Diagonal(v) => v,
                _ => unreachable!("checked by compat"),
            };
            z[(0, 0)] = kv[0];
            z[(1, 1)] = kv[1];
            for t in 0..n_periods {
                let c = match &psi.observed_loading {
                    Loading::Diagonal(l) => {
                        let uv = u_at(t);
                        if uv.len() == 0 {
                            DVector::zeros(2)
                        } else if uv.len() == l.len() && l.len() == 2 {
                            DVector::from_column_slice(&[l[0] * uv[0], l[1] * uv[1]])
                        } else {
                            return Err(CalibError::Dimension(
                                "two-factor observed loading must be diagonal of dimension 2"
                                    .into(),
                            ));
                        }
                    }
                    Loading::Scalar(l) => {
                        let uv = u_at(t);
                        if uv.len() == 0 || *l == 0.0 {
                            DVector::zeros(2)
                        } else {
                            return Err(CalibError::Invalid(
                                "two-factor family needs one observed loading per signal".into(),
                            ));
                        }
                    }
                    Loading::PerCell(_) => {
                        return Err(CalibError::Invalid(
                            "two-factor family cannot use per-cell observed loadings".into(),
                        ))
                    }
                };
                offsets.push(c);
            }
        }
        ModelFamily::MultiFactorLogistic => {
            let km = match &psi.factor_loading {
                Loading::PerCell(m) => m,
                _ => unreachable!("checked by compat"),
            };
            z.copy_from(km);
            let d = match &psi.levels {
                Levels::PerCell(d) => d,
                _ => unreachable!("checked by compat"),
            };
            for t in 0..n_periods {
                let mut c = DVector::zeros(dim);
                let uv = u_at(t);
                for i in 0..r - 1 {
                    for j in 0..r {
                        let cell = i * r + j;
                        let obs = match &psi.observed_loading {
                            Loading::PerCell(lm) => {
                                if lm.ncols() != uv.len() && uv.len() != 0 {
                                    return Err(CalibError::Dimension(
                                        "logistic observed loading columns must match factor dimension"
                                            .into(),
                                    ));
                                }
                                (0..uv.len()).map(|m| lm[(cell, m)] * uv[m]).sum::<f64>()
                            }
                            Loading::Scalar(l) => {
                                if uv.len() == 0 || *l == 0.0 {
                                    0.0
                                } else {
                                    return Err(CalibError::Invalid(
                                        "logistic family needs per-cell observed loadings".into(),
                                    ));
                                }
                            }
                            Loading::Diagonal(_) => {
                                return Err(CalibError::Invalid(
                                    "logistic family needs per-cell observed loadings".into(),
                                ))
                            }
                        };
                        c[cell] = d[(i, j)] + obs;
                    }
                }
                offsets.push(c);
            }
        }
    }
    Ok(LatentSignalModel {
        ar: psi.ar.clone(),
        innovation_cov: psi.innovation_cov.clone(),
        init_mean: psi.init_mean.clone(),
        init_cov: psi.init_cov.clone(),
        obs_map: z,
        offsets,
    })
}

impl LatentSignalModel {
    /// Number of periods covered by the offsets.
    pub fn n_periods(&self) -> usize {
        self.offsets.len()
    }

    /// Flattened signal `c_k + Z_k x` for period `k` (0-based).
    pub fn signal_at(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        &self.offsets[k] + &self.obs_map * x
    }
}

/// Signals along a latent path: `theta_k` in family layout for each period.
pub fn signal_from_factors(
    family: ModelFamily,
    psi: &ModelParameters,
    latent: &[DVector<f64>],
    u: &ObservedFactors,
    r: usize,
) -> Result<SignalPath> {
    let model = latent_signal_model(family, psi, u, r, latent.len())?;
    let (rows, cols) = family.signal_shape(r);
    let mut theta = Vec::with_capacity(latent.len());
    for (k, x) in latent.iter().enumerate() {
        if x.len() != psi.factor_dim() {
            return Err(CalibError::Dimension(format!(
                "latent state at period {} has dimension {}, expected {}",
                k + 1,
                x.len(),
                psi.factor_dim()
            )));
        }
        let flat = model.signal_at(k, x);
        let mut m = DMatrix::zeros(rows, cols);
        let mut idx = 0;
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = flat[idx];
                idx += 1;
            }
        }
        theta.push(m);
    }
    Ok(SignalPath { theta })
}

/// Transition probability row for source rating `i` (0-based) given the
/// period signal matrix; returns all `R` destination probabilities.
pub fn transition_row(
    family: ModelFamily,
    levels: &Levels,
    i: usize,
    theta_k: &DMatrix<f64>,
    r: usize,
) -> Vec<f64> {
    let mut row = vec![0.0; r];
    match family {
        ModelFamily::DefaultOnlyProbit => {
            let pd = norm_cdf(theta_k[(i, 0)]);
            row[i] = norm_sf(theta_k[(i, 0)]);
            row[r - 1] = pd;
        }
        ModelFamily::TwoFactorProbit => {
            let (default, cumulative) = match levels {
                Levels::Thresholds {
                    default,
                    cumulative,
                } => (default, cumulative),
                _ => panic!("two-factor transition probabilities need threshold levels"),
            };
            let (td, tp) = (theta_k[(0, 0)], theta_k[(0, 1)]);
            let pd = norm_cdf(default[i] + td);
            let survive = norm_sf(default[i] + td);
            // Cumulative values v_j = Phi(c_{i,j} + theta^P) with v = 1 at the
            // first destination and 0 past the last.
            let mut prev = 1.0;
            for j in 0..r - 1 {
                let next = if j + 1 <= r - 2 {
                    norm_cdf(cumulative[i][j] + tp)
                } else {
                    0.0
                };
                row[j] = survive * (prev - next).max(0.0);
                prev = next;
            }
            row[r - 1] = pd;
        }
        ModelFamily::MultiFactorLogistic => {
            let logits: Vec<f64> = (0..r).map(|j| theta_k[(i, j)]).collect();
            let lse = log_sum_exp(&logits);
            for j in 0..r {
                row[j] = (logits[j] - lse).exp();
            }
        }
    }
    row
}

/// Full `(R-1) x R` transition matrix at one period's signals.
pub fn transition_matrix(
    family: ModelFamily,
    levels: &Levels,
    theta_k: &DMatrix<f64>,
    r: usize,
) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(r - 1, r);
    for i in 0..r - 1 {
        let row = transition_row(family, levels, i, theta_k, r);
        for j in 0..r {
            t[(i, j)] = row[j];
        }
    }
    t
}

/// Multinomial log-likelihood of one observed count row against a
/// probability row, combinatorial coefficient included.
///
/// For the default-only family the row is read as a binomial in the default
/// column (survivors are not distinguished).  A positive count on a
/// zero-probability cell yields `-inf`.
pub fn row_loglik(family: ModelFamily, m_row: &[i64], t_row: &[f64]) -> f64 {
    debug_assert_eq!(m_row.len(), t_row.len());
    let r = m_row.len();
    match family {
        ModelFamily::DefaultOnlyProbit => {
            let n: i64 = m_row.iter().sum();
            let defaults = m_row[r - 1];
            let pd = t_row[r - 1];
            binomial_loglik(defaults, n, pd)
        }
        ModelFamily::TwoFactorProbit | ModelFamily::MultiFactorLogistic => {
            let mut ll = ln_multinomial_coef(m_row);
            for j in 0..r {
                if m_row[j] > 0 {
                    if t_row[j] <= 0.0 {
                        return f64::NEG_INFINITY;
                    }
                    ll += m_row[j] as f64 * t_row[j].ln();
                }
            }
            ll
        }
    }
}

fn binomial_loglik(m: i64, n: i64, p: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let mut ll = crate::math::ln_binomial_coef(n, m);
    if m > 0 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += m as f64 * p.ln();
    }
    if n - m > 0 {
        let q = 1.0 - p;
        if q <= 0.0 {
            return f64::NEG_INFINITY;
        }
        ll += (n - m) as f64 * q.ln();
    }
    ll
}

// ---------------------------------------------------------------------------
// Observation models: likelihood, gradient and Hessian in signal space
// ---------------------------------------------------------------------------

/// One curvature block of a period's log-likelihood in signal space.
#[derive(Debug, Clone)]
pub struct GradHessBlock {
    /// Offset of the block within the flattened period signal vector.
    pub offset: usize,
    /// Gradient of `ln p(M_k | theta_k)` over the block coordinates.
    pub grad: DVector<f64>,
    /// Hessian over the block coordinates (negative semi-definite).
    pub hess: DMatrix<f64>,
    /// True when the block carries observation information; uninformative
    /// blocks (no exposure) are excluded from the auxiliary model.
    pub informative: bool,
}

/// Gradient and Hessian blocks of one period.
#[derive(Debug, Clone)]
pub struct PeriodGradHess {
    /// Blocks in offset order, jointly covering the signal vector.
    pub blocks: Vec<GradHessBlock>,
    /// Flattened signal dimension of the period.
    pub dim: usize,
}

/// A per-period observation model for the latent signals: everything the
/// Laplace approximation and the particle filters need to know about
/// `p(M_k | theta_k)`.
pub trait ObservationModel: Sync {
    /// Number of observed periods.
    fn n_periods(&self) -> usize;

    /// Flattened signal dimension of period `k`.
    fn signal_dim(&self, k: usize) -> usize;

    /// `ln p(M_k | theta_k)` for the flattened signal `theta`.
    fn ln_likelihood(&self, k: usize, theta: &[f64]) -> f64;

    /// Gradient and Hessian blocks of `ln p(M_k | theta_k)`.
    fn grad_hess(&self, k: usize, theta: &[f64]) -> PeriodGradHess;
}

/// Multinomial migration observations under a model family.
///
/// Wraps a count series together with the level parameters and caches the
/// per-row log combinatorial coefficients, which do not depend on the
/// signals.
pub struct MultinomialObservations<'a> {
    family: ModelFamily,
    series: &'a MigrationSeries,
    levels: Levels,
    /// Cached log multinomial/binomial coefficients per (period, row).
    ln_coefs: Vec<Vec<f64>>,
}

impl<'a> MultinomialObservations<'a> {
    /// Bundle a series with the levels of `family`.
    pub fn new(family: ModelFamily, series: &'a MigrationSeries, levels: Levels) -> Result<Self> {
        let r = series.n_ratings();
        if levels.n_rows() != r - 1 {
            return Err(CalibError::Dimension(format!(
                "levels cover {} rows, series has {}",
                levels.n_rows(),
                r - 1
            )));
        }
        if family == ModelFamily::TwoFactorProbit && r < 3 {
            return Err(CalibError::Invalid(
                "two-factor family needs at least two performing ratings".into(),
            ));
        }
        let mut ln_coefs = Vec::with_capacity(series.n_periods());
        for k in 0..series.n_periods() {
            let mut per_row = Vec::with_capacity(r - 1);
            for i in 0..r - 1 {
                let row = series.row(k, i);
                let c = match family {
                    ModelFamily::DefaultOnlyProbit => {
                        crate::math::ln_binomial_coef(row.iter().sum(), row[r - 1])
                    }
                    _ => ln_multinomial_coef(&row),
                };
                per_row.push(c);
            }
            ln_coefs.push(per_row);
        }
        Ok(Self {
            family,
            series,
            levels,
            ln_coefs,
        })
    }

    /// The family the observations are read under.
    pub fn family(&self) -> ModelFamily {
        self.family
    }

    /// The wrapped series.
    pub fn series(&self) -> &MigrationSeries {
        self.series
    }

    /// The level parameters.
    pub fn levels(&self) -> &Levels {
        &self.levels
    }
}

/// Gradient and curvature of `m ln Phi(t) + (n - m) ln(1 - Phi(t))`.
#[inline]
fn binom_probit_grad_hess(t: f64, m: f64, n: f64) -> (f64, f64) {
    let pdf = norm_pdf(t);
    let r1 = pdf / norm_cdf(t);
    let r2 = pdf / norm_sf(t);
    let g = m * r1 - (n - m) * r2;
    let h = m * (-t * r1 - r1 * r1) + (n - m) * (t * r2 - r2 * r2);
    (g, h)
}

impl ObservationModel for MultinomialObservations<'_> {
    fn n_periods(&self) -> usize {
        self.series.n_periods()
    }

    fn signal_dim(&self, _k: usize) -> usize {
        self.family.signal_dim(self.series.n_ratings())
    }

    fn ln_likelihood(&self, k: usize, theta: &[f64]) -> f64 {
        let r = self.series.n_ratings();
        let mut ll = 0.0;
        match self.family {
            ModelFamily::DefaultOnlyProbit => {
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    if n == 0 {
                        continue;
                    }
                    let m = self.series.count(k, i, r - 1);
                    let t = theta[i];
                    ll += self.ln_coefs[k][i];
                    if m > 0 {
                        let pd = norm_cdf(t);
                        if pd <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        ll += m as f64 * pd.ln();
                    }
                    if n - m > 0 {
                        let sf = norm_sf(t);
                        if sf <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        ll += (n - m) as f64 * sf.ln();
                    }
                }
            }
            ModelFamily::TwoFactorProbit => {
                let (default, cumulative) = match &self.levels {
                    Levels::Thresholds {
                        default,
                        cumulative,
                    } => (default, cumulative),
                    _ => unreachable!("checked at construction"),
                };
                let (td, tp) = (theta[0], theta[1]);
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    if n == 0 {
                        continue;
                    }
                    let md = self.series.count(k, i, r - 1);
                    ll += self.ln_coefs[k][i];
                    let a = default[i] + td;
                    if md > 0 {
                        let pd = norm_cdf(a);
                        if pd <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        ll += md as f64 * pd.ln();
                    }
                    if n - md > 0 {
                        let sf = norm_sf(a);
                        if sf <= 0.0 {
                            return f64::NEG_INFINITY;
                        }
                        ll += (n - md) as f64 * sf.ln();
                        // Ordered-probit split of the survivors.
                        let mut prev = 1.0;
                        for j in 0..r - 1 {
                            let next = if j + 1 <= r - 2 {
                                norm_cdf(cumulative[i][j] + tp)
                            } else {
                                0.0
                            };
                            let mij = self.series.count(k, i, j);
                            if mij > 0 {
                                let p = prev - next;
                                if p <= 0.0 {
                                    return f64::NEG_INFINITY;
                                }
                                ll += mij as f64 * p.ln();
                            }
                            prev = next;
                        }
                    }
                }
            }
            ModelFamily::MultiFactorLogistic => {
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    if n == 0 {
                        continue;
                    }
                    let logits = &theta[i * r..(i + 1) * r];
                    let lse = log_sum_exp(logits);
                    ll += self.ln_coefs[k][i];
                    for j in 0..r {
                        let mij = self.series.count(k, i, j);
                        if mij > 0 {
                            ll += mij as f64 * (logits[j] - lse);
                        }
                    }
                }
            }
        }
        ll
    }

    fn grad_hess(&self, k: usize, theta: &[f64]) -> PeriodGradHess {
        let r = self.series.n_ratings();
        match self.family {
            ModelFamily::DefaultOnlyProbit => {
                let mut blocks = Vec::with_capacity(r - 1);
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    let m = self.series.count(k, i, r - 1);
                    let (g, h) = if n > 0 {
                        binom_probit_grad_hess(theta[i], m as f64, n as f64)
                    } else {
                        (0.0, 0.0)
                    };
                    blocks.push(GradHessBlock {
                        offset: i,
                        grad: DVector::from_element(1, g),
                        hess: DMatrix::from_element(1, 1, h),
                        informative: n > 0,
                    });
                }
                PeriodGradHess {
                    blocks,
                    dim: r - 1,
                }
            }
            ModelFamily::TwoFactorProbit => {
                let (default, cumulative) = match &self.levels {
                    Levels::Thresholds {
                        default,
                        cumulative,
                    } => (default, cumulative),
                    _ => unreachable!("checked at construction"),
                };
                let (td, tp) = (theta[0], theta[1]);
                let (mut gd, mut hd) = (0.0, 0.0);
                let (mut gp, mut hp) = (0.0, 0.0);
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    if n == 0 {
                        continue;
                    }
                    let md = self.series.count(k, i, r - 1);
                    let (g, h) = binom_probit_grad_hess(default[i] + td, md as f64, n as f64);
                    gd += g;
                    hd += h;
                    // Survivor split: boundary cells use Phi = 1 / 0 with zero
                    // density, interior cells use the row thresholds.
                    let mut prev_v = 1.0;
                    let mut prev_w = 0.0; // phi at the upper boundary
                    let mut prev_dw = 0.0; // phi' at the upper boundary
                    for j in 0..r - 1 {
                        let (v, w, dw) = if j + 1 <= r - 2 {
                            let b = cumulative[i][j] + tp;
                            let pdf = norm_pdf(b);
                            (norm_cdf(b), pdf, -b * pdf)
                        } else {
                            (0.0, 0.0, 0.0)
                        };
                        let mij = self.series.count(k, i, j);
                        if mij > 0 {
                            let p = (prev_v - v).max(1e-300);
                            let dg = prev_w - w;
                            let dh = prev_dw - dw;
                            gp += mij as f64 * dg / p;
                            hp += mij as f64 * (dh * p - dg * dg) / (p * p);
                        }
                        prev_v = v;
                        prev_w = w;
                        prev_dw = dw;
                    }
                }
                let blocks = vec![
                    GradHessBlock {
                        offset: 0,
                        grad: DVector::from_element(1, gd),
                        hess: DMatrix::from_element(1, 1, hd),
                        informative: hd < 0.0,
                    },
                    GradHessBlock {
                        offset: 1,
                        grad: DVector::from_element(1, gp),
                        hess: DMatrix::from_element(1, 1, hp),
                        informative: hp < 0.0,
                    },
                ];
                PeriodGradHess { blocks, dim: 2 }
            }
            ModelFamily::MultiFactorLogistic => {
                let mut blocks = Vec::with_capacity(r - 1);
                for i in 0..r - 1 {
                    let n = self.series.row_total(k, i);
                    let logits = &theta[i * r..(i + 1) * r];
                    let lse = log_sum_exp(logits);
                    let p: Vec<f64> = logits.iter().map(|t| (t - lse).exp()).collect();
                    let mut grad = DVector::zeros(r);
                    let mut hess = DMatrix::zeros(r, r);
                    if n > 0 {
                        let nf = n as f64;
                        for j in 0..r {
                            grad[j] = self.series.count(k, i, j) as f64 - nf * p[j];
                            for l in 0..r {
                                hess[(j, l)] = if j == l {
                                    -nf * (p[j] - p[j] * p[j])
                                } else {
                                    nf * p[j] * p[l]
                                };
                            }
                        }
                    }
                    blocks.push(GradHessBlock {
                        offset: i * r,
                        grad,
                        hess,
                        informative: n > 0,
                    });
                }
                PeriodGradHess {
                    blocks,
                    dim: (r - 1) * r,
                }
            }
        }
    }
}

/// Gaussian observations of the signals themselves: `y_k ~ N(theta_k, V_k)`.
///
/// Replacing the multinomial response by this model turns the whole problem
/// linear-Gaussian, which makes the Laplace approximation exact; the
/// exactness tests and the particle-filter oracles rely on it.
pub struct GaussianSignalObservations {
    /// Observed signal vectors.
    pub y: Vec<DVector<f64>>,
    noise_chol: Vec<Cholesky<f64, nalgebra::Dyn>>,
    noise_inv: Vec<DMatrix<f64>>,
    ln_norm: Vec<f64>,
}

impl GaussianSignalObservations {
    /// Build from per-period observations and positive definite noise
    /// covariances.
    pub fn new(y: Vec<DVector<f64>>, noise: Vec<DMatrix<f64>>) -> Result<Self> {
        if y.len() != noise.len() {
            return Err(CalibError::Dimension(
                "observations and noise covariances must align".into(),
            ));
        }
        let mut noise_chol = Vec::with_capacity(noise.len());
        let mut noise_inv = Vec::with_capacity(noise.len());
        let mut ln_norm = Vec::with_capacity(noise.len());
        for (k, v) in noise.iter().enumerate() {
            if v.nrows() != y[k].len() {
                return Err(CalibError::Dimension(format!(
                    "noise covariance at period {} has wrong dimension",
                    k + 1
                )));
            }
            let chol = Cholesky::new(v.clone()).ok_or_else(|| {
                CalibError::NotPositiveDefinite(format!("noise covariance at period {}", k + 1))
            })?;
            let ld: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            ln_norm.push(-0.5 * (y[k].len() as f64 * crate::math::LN_2PI + ld));
            noise_inv.push(chol.inverse());
            noise_chol.push(chol);
        }
        Ok(Self {
            y,
            noise_chol,
            noise_inv,
            ln_norm,
        })
    }
}

impl ObservationModel for GaussianSignalObservations {
    fn n_periods(&self) -> usize {
        self.y.len()
    }

    fn signal_dim(&self, k: usize) -> usize {
        self.y[k].len()
    }

    fn ln_likelihood(&self, k: usize, theta: &[f64]) -> f64 {
        let resid = DVector::from_iterator(
            theta.len(),
            self.y[k].iter().zip(theta).map(|(a, b)| a - b),
        );
        let white = self.noise_chol[k].solve(&resid);
        self.ln_norm[k] - 0.5 * resid.dot(&white)
    }

    fn grad_hess(&self, k: usize, theta: &[f64]) -> PeriodGradHess {
        let resid = DVector::from_iterator(
            theta.len(),
            self.y[k].iter().zip(theta).map(|(a, b)| a - b),
        );
        let grad = &self.noise_inv[k] * resid;
        PeriodGradHess {
            blocks: vec![GradHessBlock {
                offset: 0,
                grad,
                hess: -self.noise_inv[k].clone(),
                informative: true,
            }],
            dim: theta.len(),
        }
    }
}

/// Stacked gradient and block-diagonal Hessian of the data log-likelihood in
/// signal space, one entry per period.
#[derive(Debug, Clone)]
pub struct SignalDerivatives {
    /// Per-period gradient of `ln p(M_k | theta_k)`.
    pub grads: Vec<DVector<f64>>,
    /// Per-period Hessian (block-diagonal by construction).
    pub hessians: Vec<DMatrix<f64>>,
}

/// Evaluate the stacked signal-space derivatives of a series under `family`
/// at the signal path `theta`.
pub fn signal_grad_hess(
    family: ModelFamily,
    series: &MigrationSeries,
    theta: &SignalPath,
    psi: &ModelParameters,
) -> Result<SignalDerivatives> {
    let obs = MultinomialObservations::new(family, series, psi.levels.clone())?;
    if theta.n_periods() != series.n_periods() {
        return Err(CalibError::Dimension(
            "signal path and series must cover the same periods".into(),
        ));
    }
    let mut grads = Vec::with_capacity(series.n_periods());
    let mut hessians = Vec::with_capacity(series.n_periods());
    for k in 0..series.n_periods() {
        let flat = theta.flat(k);
        let gh = obs.grad_hess(k, flat.as_slice());
        let mut g = DVector::zeros(gh.dim);
        let mut h = DMatrix::zeros(gh.dim, gh.dim);
        for b in &gh.blocks {
            let d = b.grad.len();
            for a in 0..d {
                g[b.offset + a] = b.grad[a];
                for c in 0..d {
                    h[(b.offset + a, b.offset + c)] = b.hess[(a, c)];
                }
            }
        }
        grads.push(g);
        hessians.push(h);
    }
    Ok(SignalDerivatives { grads, hessians })
}
