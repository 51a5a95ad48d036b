//! Experiment drivers: single-parameter likelihood profiles, repeated
//! simulation-calibration studies, and the stepwise two-factor calibration
//! that splits default and performing migrations into separate fits.
//!
//! Every driver is deterministic given its seed: scenarios and profile
//! points map to fixed RNG streams, so results do not depend on evaluation
//! order or worker count.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Levels, Loading, MigrationSeries, ModelParameters, ObservedFactors};
use crate::error::CalibError;
use crate::gpr::{pf_gpr_mle, CartesianGrid};
use crate::laplace::{
    free_parameters, laplace_loglik, laplace_loglik_for_series, mle_laplace,
    observed_cumulative_averages, observed_default_averages, parameters_from_free, MleFit,
    MleOptions, ModeOptions,
};
use crate::math::{correlation, ln_multinomial_coef, norm_cdf, norm_pdf};
use crate::models::{
    GradHessBlock, LatentSignalModel, ModelFamily, ObservationModel, PeriodGradHess,
};
use crate::optimize::{default_starts, nelder_mead_multistart};
use crate::parallel::par_map_indexed;
use crate::particle::{bootstrap_pf_for_series, pf_importance_for_series};
use crate::simulate::{simulate_migrations, two_factor_levels_from_averages};
use crate::Result;

/// Likelihood evaluator used for profile curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMethod {
    /// Laplace-approximated likelihood.
    Laplace,
    /// Importance particle filter with the given particle count.
    PfImportance { n_particles: usize },
    /// Bootstrap particle filter with the given particle count.
    PfBootstrap { n_particles: usize },
}

/// One evaluated profile point.
#[derive(Debug, Clone, Copy)]
pub struct ProfilePoint {
    /// Value of the profiled parameter.
    pub value: f64,
    /// Log-likelihood, or `None` where the evaluation failed.
    pub loglik: Option<f64>,
}

/// Log-likelihood curve along one free parameter.
#[derive(Debug, Clone)]
pub struct LikelihoodProfile {
    /// Name of the profiled parameter.
    pub axis: String,
    /// Evaluated points, in the order requested.
    pub points: Vec<ProfilePoint>,
    /// Number of points that failed to evaluate.
    pub n_failed: usize,
}

/// Read the free-parameter vector of `family` back out of full parameters.
pub fn free_from_parameters(family: ModelFamily, psi: &ModelParameters) -> Result<Vec<f64>> {
    let scalar_loading = |loading: &Loading, what: &str| -> Result<f64> {
        match loading {
            Loading::Scalar(k) => Ok(*k),
            Loading::Diagonal(d) if d.len() == 1 => Ok(d[0]),
            _ => Err(CalibError::Invalid(format!(
                "{what} must be a scalar loading for this family"
            ))),
        }
    };
    match family {
        ModelFamily::DefaultOnlyProbit => Ok(vec![
            psi.ar[(0, 0)],
            scalar_loading(&psi.factor_loading, "factor loading")?,
        ]),
        ModelFamily::TwoFactorProbit => {
            let k = match &psi.factor_loading {
                Loading::Diagonal(d) if d.len() == 2 => d.clone(),
                _ => {
                    return Err(CalibError::Invalid(
                        "two-factor parameters need a diagonal loading pair".into(),
                    ))
                }
            };
            let rho = psi.rho.ok_or_else(|| {
                CalibError::Invalid("two-factor parameters need an innovation correlation".into())
            })?;
            Ok(vec![psi.ar[(0, 0)], psi.ar[(1, 1)], k[0], k[1], rho])
        }
        ModelFamily::MultiFactorLogistic => Err(CalibError::Unsupported(
            "free-parameter profiles cover the probit families only".into(),
        )),
    }
}

/// Evaluate the log-likelihood along one free parameter, holding the other
/// free parameters at their `psi_base` values and re-deriving the levels
/// from the observed averages at every point, exactly as the likelihood
/// maximizers do.  Particle methods reuse one seed across all points so the
/// curves are comparable; failed points are flagged, not fatal.
pub fn likelihood_profile<R: Rng + ?Sized>(
    family: ModelFamily,
    series: &MigrationSeries,
    psi_base: &ModelParameters,
    axis: &str,
    values: &[f64],
    method: ProfileMethod,
    rng: &mut R,
) -> Result<LikelihoodProfile> {
    let (names, _) = free_parameters(family, &MleOptions::default())?;
    let idx = names
        .iter()
        .position(|n| *n == axis)
        .ok_or_else(|| CalibError::Invalid(format!("{axis} is not a free parameter")))?;
    let base = free_from_parameters(family, psi_base)?;
    let default_targets = observed_default_averages(series);
    let cumulative_targets = observed_cumulative_averages(series);
    let u = ObservedFactors::none(series.n_periods(), 0);
    let master: u64 = rng.gen();
    let logliks = par_map_indexed(values.len(), |p| {
        let mut free = base.clone();
        free[idx] = values[p];
        let psi = parameters_from_free(family, &free, &default_targets, &cumulative_targets).ok()?;
        match method {
            ProfileMethod::Laplace => {
                laplace_loglik_for_series(family, series, &psi, &u, &ModeOptions::default())
                    .ok()
                    .map(|l| l.loglik)
            }
            ProfileMethod::PfImportance { n_particles } => {
                let mut point_rng = ChaCha8Rng::seed_from_u64(master);
                pf_importance_for_series(
                    family,
                    series,
                    &psi,
                    &u,
                    n_particles,
                    &ModeOptions::default(),
                    &mut point_rng,
                )
                .ok()
                .map(|f| f.loglik)
            }
            ProfileMethod::PfBootstrap { n_particles } => {
                let mut point_rng = ChaCha8Rng::seed_from_u64(master);
                bootstrap_pf_for_series(family, series, &psi, &u, n_particles, &mut point_rng)
                    .ok()
                    .map(|f| f.loglik)
            }
        }
    });
    let points: Vec<ProfilePoint> = values
        .iter()
        .zip(&logliks)
        .map(|(&value, &loglik)| ProfilePoint { value, loglik })
        .collect();
    let n_failed = points.iter().filter(|p| p.loglik.is_none()).count();
    Ok(LikelihoodProfile {
        axis: axis.to_string(),
        points,
        n_failed,
    })
}

/// Calibration pipeline a study applies to each simulated scenario.
#[derive(Debug, Clone)]
pub enum StudyMethod {
    /// Laplace maximum likelihood over the family's free parameters.
    Laplace(MleOptions),
    /// Stepwise default/performing split (two-factor data).
    Stepwise(MleOptions),
    /// Particle-filter surface smoothing (default-only data).
    PfGpr {
        grid: CartesianGrid,
        n_particles: usize,
    },
}

/// Configuration of a repeated simulation-calibration study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub family: ModelFamily,
    /// True parameters scenarios are simulated from.
    pub truth: ModelParameters,
    /// Per-performing-row cohort sizes, refreshed every period.
    pub populations: Vec<i64>,
    pub n_periods: usize,
    pub n_scenarios: usize,
    /// Whether simulated innovations are renormalized to exact moments.
    pub renormalize: bool,
    pub method: StudyMethod,
    /// Master seed; scenario `i` always uses stream `i` regardless of
    /// evaluation order.
    pub master_seed: u64,
}

/// Study outcome: the estimate table plus per-parameter statistics.
#[derive(Debug, Clone)]
pub struct StudyResult {
    /// Estimated parameter names, in column order.
    pub parameter_names: Vec<&'static str>,
    /// Per-scenario estimates; `None` where the pipeline failed.
    pub estimates: Vec<Option<Vec<f64>>>,
    /// Per-parameter sample means over the successful scenarios.
    pub means: Vec<f64>,
    /// Per-parameter sample standard deviations over the successes.
    pub stds: Vec<f64>,
    /// Number of failed scenarios.
    pub n_failed: usize,
}

/// Simulate and calibrate `n_scenarios` independent panels, collecting
/// per-parameter means and standard deviations over the successes.
pub fn scenario_study(config: &StudyConfig) -> Result<StudyResult> {
    if config.n_scenarios == 0 {
        return Err(CalibError::Invalid("study needs at least one scenario".into()));
    }
    let parameter_names: Vec<&'static str> = match &config.method {
        StudyMethod::Laplace(opts) => free_parameters(config.family, opts)?.0,
        StudyMethod::Stepwise(_) => {
            if config.family != ModelFamily::TwoFactorProbit {
                return Err(CalibError::Unsupported(
                    "stepwise studies cover the two-factor family".into(),
                ));
            }
            vec!["a_d", "a_p", "k_d", "k_p", "rho"]
        }
        StudyMethod::PfGpr { .. } => {
            if config.family != ModelFamily::DefaultOnlyProbit {
                return Err(CalibError::Unsupported(
                    "surface calibration covers the default-only model".into(),
                ));
            }
            vec!["a", "k"]
        }
    };
    let u = ObservedFactors::none(config.n_periods, 0);
    let estimates: Vec<Option<Vec<f64>>> = par_map_indexed(config.n_scenarios, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.master_seed);
        rng.set_stream(i as u64);
        let panel = simulate_migrations(
            config.family,
            &config.truth,
            &u,
            &config.populations,
            config.n_periods,
            config.renormalize,
            &mut rng,
        )
        .ok()?;
        match &config.method {
            StudyMethod::Laplace(opts) => mle_laplace(config.family, &panel.series, &u, opts)
                .ok()
                .map(|f| f.estimates),
            StudyMethod::Stepwise(opts) => stepwise_calibrate(&panel.series, &u, opts)
                .ok()
                .map(|f| f.estimates),
            StudyMethod::PfGpr { grid, n_particles } => pf_gpr_mle(
                config.family,
                &panel.series,
                &u,
                grid,
                *n_particles,
                &mut rng,
            )
            .ok()
            .map(|f| f.estimates),
        }
    });
    let n_failed = estimates.iter().filter(|e| e.is_none()).count();
    if n_failed == estimates.len() {
        return Err(CalibError::Optimization(
            "every scenario in the study failed to calibrate".into(),
        ));
    }
    let n_params = parameter_names.len();
    let mut means = Vec::with_capacity(n_params);
    let mut stds = Vec::with_capacity(n_params);
    for p in 0..n_params {
        let column: Vec<f64> = estimates
            .iter()
            .flatten()
            .map(|est| est[p])
            .collect();
        let (mean, std) = crate::math::mean_std(&column);
        means.push(mean);
        stds.push(std);
    }
    Ok(StudyResult {
        parameter_names,
        estimates,
        means,
        stds,
        n_failed,
    })
}

/// Export a study as delimited text: one row per scenario and parameter,
/// then a commented summary block with the per-parameter statistics.
pub fn write_study<W: Write>(result: &StudyResult, out: &mut W) -> Result<()> {
    writeln!(out, "scenario,parameter,estimate")?;
    for (s, est) in result.estimates.iter().enumerate() {
        if let Some(values) = est {
            for (name, value) in result.parameter_names.iter().zip(values) {
                writeln!(out, "{},{},{}", s + 1, name, value)?;
            }
        }
    }
    writeln!(out, "# summary parameter,mean,std")?;
    for ((name, mean), std) in result
        .parameter_names
        .iter()
        .zip(&result.means)
        .zip(&result.stds)
    {
        writeln!(out, "# {},{},{}", name, mean, std)?;
    }
    writeln!(
        out,
        "# scenarios={} failed={}",
        result.estimates.len(),
        result.n_failed
    )?;
    Ok(())
}

/// Ordered-probit observation model for the performing migrations of a
/// panel, conditioned on survival: per period one shared signal shifts all
/// cumulative thresholds, and each surviving cohort row is multinomial over
/// the performing destinations.
struct PerformingProbitObs {
    /// Per period, per performing row: survivor count.
    survivors: Vec<Vec<i64>>,
    /// Per period: performing destination counts, `(R-1) x (R-1)`.
    counts: Vec<DMatrix<i64>>,
    /// Interior cumulative thresholds per row (`R-2` each), decreasing.
    thresholds: Vec<Vec<f64>>,
    /// Per-period signal-independent log multinomial coefficients.
    ln_coefs: Vec<f64>,
}

impl PerformingProbitObs {
    fn new(
        series: &MigrationSeries,
        pd_targets: &[f64],
        cumulative_targets: &[Vec<f64>],
        k_p: f64,
    ) -> Result<Self> {
        let levels = two_factor_levels_from_averages(pd_targets, cumulative_targets, 1.0, k_p)?;
        let thresholds = match levels {
            Levels::Thresholds { cumulative, .. } => cumulative,
            _ => unreachable!("two-factor levels are thresholds"),
        };
        let r = series.n_ratings();
        let n_rows = series.n_performing();
        let mut survivors = Vec::with_capacity(series.n_periods());
        let mut counts = Vec::with_capacity(series.n_periods());
        let mut ln_coefs = Vec::with_capacity(series.n_periods());
        for k in 0..series.n_periods() {
            let mut surv_k = Vec::with_capacity(n_rows);
            let mut counts_k = DMatrix::<i64>::zeros(n_rows, r - 1);
            let mut ln_coef = 0.0;
            for i in 0..n_rows {
                let mut cells = Vec::with_capacity(r - 1);
                for j in 0..r - 1 {
                    let m = series.count(k, i, j);
                    counts_k[(i, j)] = m;
                    cells.push(m);
                }
                surv_k.push(cells.iter().sum());
                ln_coef += ln_multinomial_coef(&cells);
            }
            survivors.push(surv_k);
            counts.push(counts_k);
            ln_coefs.push(ln_coef);
        }
        Ok(Self {
            survivors,
            counts,
            thresholds,
            ln_coefs,
        })
    }

    /// Cell probabilities and their first two signal derivatives for one
    /// row at signal `theta`: `p_j = v_{j-1} - v_j` over the cumulative
    /// values `v_j = Phi(c_{j} + theta)` with implicit 1 and 0 boundaries.
    fn row_cells(&self, i: usize, theta: f64) -> Vec<(f64, f64, f64)> {
        let ts = &self.thresholds[i];
        let n_dest = ts.len() + 1;
        let mut out = Vec::with_capacity(n_dest);
        let mut prev = (1.0, 0.0, 0.0);
        for j in 0..n_dest {
            let next = if j < ts.len() {
                let z = ts[j] + theta;
                let pdf = norm_pdf(z);
                (norm_cdf(z), pdf, -z * pdf)
            } else {
                (0.0, 0.0, 0.0)
            };
            out.push((prev.0 - next.0, prev.1 - next.1, prev.2 - next.2));
            prev = next;
        }
        out
    }
}

impl ObservationModel for PerformingProbitObs {
    fn n_periods(&self) -> usize {
        self.counts.len()
    }

    fn signal_dim(&self, _k: usize) -> usize {
        1
    }

    fn ln_likelihood(&self, k: usize, theta: &[f64]) -> f64 {
        let th = theta[0];
        let mut ll = self.ln_coefs[k];
        for i in 0..self.survivors[k].len() {
            if self.survivors[k][i] == 0 {
                continue;
            }
            for (j, (p, _, _)) in self.row_cells(i, th).into_iter().enumerate() {
                let m = self.counts[k][(i, j)];
                if m > 0 {
                    ll += m as f64 * p.max(1e-300).ln();
                }
            }
        }
        ll
    }

    fn grad_hess(&self, k: usize, theta: &[f64]) -> PeriodGradHess {
        let th = theta[0];
        let mut g = 0.0;
        let mut h = 0.0;
        let mut any = false;
        for i in 0..self.survivors[k].len() {
            if self.survivors[k][i] == 0 {
                continue;
            }
            any = true;
            for (j, (p, dp, d2p)) in self.row_cells(i, th).into_iter().enumerate() {
                let m = self.counts[k][(i, j)];
                if m > 0 {
                    let p = p.max(1e-300);
                    let ratio = dp / p;
                    g += m as f64 * ratio;
                    h += m as f64 * (d2p / p - ratio * ratio);
                }
            }
        }
        let informative = any && h < 0.0;
        PeriodGradHess {
            blocks: vec![GradHessBlock {
                offset: 0,
                grad: DVector::from_element(1, if informative { g } else { 0.0 }),
                hess: DMatrix::from_element(1, 1, if informative { h } else { 0.0 }),
                informative,
            }],
            dim: 1,
        }
    }
}

/// Unit-variance scalar latent model for the performing signal.
fn performing_latent(a_p: f64, k_p: f64, n_periods: usize) -> Result<LatentSignalModel> {
    if !(a_p.abs() < 1.0) {
        return Err(CalibError::NonStationary { rho: a_p.abs() });
    }
    Ok(LatentSignalModel {
        ar: DMatrix::from_element(1, 1, a_p),
        innovation_cov: DMatrix::from_element(1, 1, 1.0 - a_p * a_p),
        init_mean: DVector::zeros(1),
        init_cov: DMatrix::identity(1, 1),
        obs_map: DMatrix::from_element(1, 1, k_p),
        offsets: vec![DVector::zeros(1); n_periods],
    })
}

/// Stepwise two-factor calibration result.
#[derive(Debug, Clone)]
pub struct StepwiseFit {
    /// Names matching the joint two-factor estimate order.
    pub parameter_names: Vec<&'static str>,
    /// `(a_d, a_p, k_d, k_p, rho)` estimates.
    pub estimates: Vec<f64>,
    /// Full step-1 default-submodel fit.
    pub default_fit: MleFit,
    /// Laplace log-likelihood of the performing submodel at its optimum.
    pub performing_loglik: f64,
    /// Smoothed default-factor path at the step-1 optimum.
    pub latent_default: Vec<DVector<f64>>,
    /// Smoothed performing-factor path at the step-2 optimum.
    pub latent_performing: Vec<DVector<f64>>,
    /// Objective evaluations spent in the performing-submodel search.
    pub performing_evaluations: usize,
    /// Whether both searches converged by tolerance.
    pub converged: bool,
}

/// One-step-ahead innovation residuals of a smoothed scalar latent path.
fn innovation_residuals(path: &[DVector<f64>], a: f64) -> Vec<f64> {
    path.windows(2).map(|w| w[1][0] - a * w[0][0]).collect()
}

/// Calibrate a two-factor panel stepwise: the default-only submodel on the
/// collapsed panel first, then the survival-conditioned performing
/// submodel, and finally the innovation correlation from the two smoothed
/// latent paths under the fitted autoregressions.
pub fn stepwise_calibrate(
    series: &MigrationSeries,
    u: &ObservedFactors,
    opts: &MleOptions,
) -> Result<StepwiseFit> {
    if series.n_ratings() < 3 {
        return Err(CalibError::Invalid(
            "stepwise calibration needs at least one performing destination pair (R >= 3)".into(),
        ));
    }
    if u.dim() != 0 {
        return Err(CalibError::Unsupported(
            "observed-factor loadings are not estimated; calibrate without observed factors"
                .into(),
        ));
    }

    let collapsed = series.collapse_to_default();
    let default_fit = mle_laplace(ModelFamily::DefaultOnlyProbit, &collapsed, u, opts)?;
    let (a_d, k_d) = (default_fit.estimates[0], default_fit.estimates[1]);

    let pd_targets = observed_default_averages(series);
    let cumulative_targets = observed_cumulative_averages(series);
    let bounds = [opts.ar_bounds, opts.loading_bounds];
    let objective = |v: &[f64]| -> Result<f64> {
        let obs = PerformingProbitObs::new(series, &pd_targets, &cumulative_targets, v[1])?;
        let lat = performing_latent(v[0], v[1], series.n_periods())?;
        Ok(-laplace_loglik(&obs, &lat, &opts.mode)?.loglik)
    };
    let starts = default_starts(&bounds);
    let best = nelder_mead_multistart(objective, &starts, &bounds, &opts.nm)?;
    let (a_p, k_p) = (best.x[0], best.x[1]);
    let obs = PerformingProbitObs::new(series, &pd_targets, &cumulative_targets, k_p)?;
    let lat = performing_latent(a_p, k_p, series.n_periods())?;
    let performing = laplace_loglik(&obs, &lat, &opts.mode)?;

    let eta_d = innovation_residuals(&default_fit.latent_means, a_d);
    let eta_p = innovation_residuals(&performing.mode.latent_means, a_p);
    let rho = correlation(&eta_d, &eta_p);

    Ok(StepwiseFit {
        parameter_names: vec!["a_d", "a_p", "k_d", "k_p", "rho"],
        estimates: vec![a_d, a_p, k_d, k_p, rho],
        performing_loglik: performing.loglik,
        latent_default: default_fit.latent_means.clone(),
        latent_performing: performing.mode.latent_means.clone(),
        performing_evaluations: best.evaluations,
        converged: default_fit.converged && best.converged,
        default_fit,
    })
}
