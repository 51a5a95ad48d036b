//! Gaussian-process regression for smoothing noisy likelihood surfaces.
//!
//! The regression uses a squared-exponential kernel with per-dimension
//! lengthscales plus white observation noise.  Targets are centered before
//! fitting (the zero-mean prior is a poor description of log-likelihoods in
//! the hundreds) and the mean is restored at prediction.  Where the training
//! inputs form a Cartesian grid, the tensor-product structure of the kernel
//! turns the big kernel matrix into a Kronecker product of small per-axis
//! matrices, so fitting costs a few tiny eigendecompositions instead of a
//! dense factorization.
//!
//! The top-level entry point is [`pf_gpr_mle`]: evaluate the particle-filter
//! likelihood over an `(a, k)` grid, train a GPR on the noisy surface, and
//! maximize the smoothed mean over a refined lattice with a local polish.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{MigrationSeries, ModelParameters, ObservedFactors};
use crate::error::CalibError;
use crate::laplace::{observed_default_averages, parameters_from_free, ModeOptions};
use crate::math::LN_2PI;
use crate::models::ModelFamily;
use crate::optimize::{nelder_mead, NelderMeadOptions, OptimResult};
use crate::parallel::par_map_indexed;
use crate::particle::pf_importance_for_series;
use crate::Result;

/// Smallest admissible white-noise standard deviation during training.
pub const NOISE_STD_FLOOR: f64 = 1e-3;
/// Largest diagonal jitter tried before a dense factorization gives up.
const MAX_JITTER: f64 = 1e-6;
/// Fraction of grid points that must evaluate for a surface fit to proceed.
const REQUIRED_SUCCESS_FRACTION: f64 = 0.9;
/// Per-axis refinement factor of the argmax evaluation lattice.
const LATTICE_REFINEMENT: usize = 20;

/// Squared-exponential kernel with white observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    /// Signal amplitude (standard-deviation scale).
    pub sigma_f: f64,
    /// Per-input-dimension lengthscales.
    pub lengthscales: Vec<f64>,
    /// White-noise standard deviation.
    pub sigma_noise: f64,
}

impl KernelSpec {
    /// Validated construction: every hyperparameter strictly positive.
    pub fn new(sigma_f: f64, lengthscales: Vec<f64>, sigma_noise: f64) -> Result<Self> {
        if !(sigma_f.is_finite() && sigma_f > 0.0) {
            return Err(CalibError::Invalid("signal amplitude must be positive".into()));
        }
        if lengthscales.is_empty() || lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(CalibError::Invalid("lengthscales must be positive".into()));
        }
        if !(sigma_noise.is_finite() && sigma_noise > 0.0) {
            return Err(CalibError::Invalid("noise level must be positive".into()));
        }
        Ok(Self {
            sigma_f,
            lengthscales,
            sigma_noise,
        })
    }

    /// Input dimension the kernel is defined over.
    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Noise-free kernel value `σ_f² · exp(−½ Σ_m (x_m − y_m)² / ℓ_m²)`.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), spec.dim(), "query dimension mismatch");
    assert_eq!(y.len(), spec.dim(), "query dimension mismatch");
    let mut quad = 0.0;
    for ((a, b), l) in x.iter().zip(y).zip(&spec.lengthscales) {
        let d = (a - b) / l;
        quad += d * d;
    }
    spec.sigma_f * spec.sigma_f * (-0.5 * quad).exp()
}

/// Cartesian product grid with the last axis varying fastest when flattened.
#[derive(Debug, Clone)]
pub struct CartesianGrid {
    axes: Vec<Vec<f64>>,
}

impl CartesianGrid {
    /// Validated construction from per-axis coordinates, each strictly
    /// increasing and non-empty.
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(CalibError::Invalid("grid needs at least one axis".into()));
        }
        for (m, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(CalibError::Invalid(format!("grid axis {} is empty", m + 1)));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(CalibError::Invalid(format!(
                    "grid axis {} has a non-finite value",
                    m + 1
                )));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(CalibError::Invalid(format!(
                    "grid axis {} must be strictly increasing",
                    m + 1
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Evenly spaced grid over closed ranges with the given point counts.
    pub fn uniform(ranges: &[(f64, f64)], counts: &[usize]) -> Result<Self> {
        if ranges.len() != counts.len() {
            return Err(CalibError::Dimension(
                "one point count per grid range is required".into(),
            ));
        }
        let mut axes = Vec::with_capacity(ranges.len());
        for (&(lo, hi), &count) in ranges.iter().zip(counts) {
            if count < 2 || !(hi > lo) {
                return Err(CalibError::Invalid(
                    "each grid range needs an increasing span and at least two points".into(),
                ));
            }
            let step = (hi - lo) / (count - 1) as f64;
            axes.push((0..count).map(|i| lo + i as f64 * step).collect());
        }
        Self::new(axes)
    }

    /// Number of input dimensions.
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of grid points.
    pub fn n_points(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Per-axis coordinates.
    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    /// Decode a flattened index into grid coordinates.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut out = vec![0.0; self.dim()];
        for m in (0..self.dim()).rev() {
            let n_m = self.axes[m].len();
            out[m] = self.axes[m][rem % n_m];
            rem /= n_m;
        }
        out
    }

    /// All grid points in flattened order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.n_points()).map(|i| self.point(i)).collect()
    }
}

/// Multiply a tensor (flattened with the last axis fastest) along one mode:
/// `out[..., r, ...] = Σ_i a[r, i] · x[..., i, ...]`.  Updates `dims[mode]`
/// to the matrix row count, so rectangular maps reshape the tensor.
fn mode_multiply(a: &DMatrix<f64>, x: &[f64], dims: &mut Vec<usize>, mode: usize) -> Vec<f64> {
    let n_m = dims[mode];
    assert_eq!(a.ncols(), n_m, "mode size mismatch");
    let rows = a.nrows();
    let stride: usize = dims[mode + 1..].iter().product();
    let outer: usize = dims[..mode].iter().product();
    let mut out = vec![0.0; outer * rows * stride];
    for o in 0..outer {
        let base_in = o * n_m * stride;
        let base_out = o * rows * stride;
        for r in 0..rows {
            let dst_start = base_out + r * stride;
            for i in 0..n_m {
                let a_ri = a[(r, i)];
                let src_start = base_in + i * stride;
                for t in 0..stride {
                    out[dst_start + t] += a_ri * x[src_start + t];
                }
            }
        }
    }
    dims[mode] = rows;
    out
}

/// Cached factorization of the training covariance.
#[derive(Debug, Clone)]
enum Factorization {
    Dense {
        chol: Cholesky<f64, nalgebra::Dyn>,
    },
    Kronecker {
        axes: Vec<Vec<f64>>,
        eigvecs: Vec<DMatrix<f64>>,
        /// Eigenvalues of the full Kronecker kernel, flattened grid order.
        eigvals: Vec<f64>,
    },
}

/// Fitted Gaussian-process regression model.
#[derive(Debug, Clone)]
pub struct TrainedGpr {
    /// Training inputs, one row per observation.
    pub inputs: Vec<Vec<f64>>,
    /// Raw (uncentered) training targets.
    pub targets: Vec<f64>,
    /// Kernel the model was fitted with.
    pub kernel: KernelSpec,
    /// Marginal log-likelihood of the centered targets under the kernel.
    pub loglik: f64,
    y_mean: f64,
    /// Cached `[K + σ²I]⁻¹ (y − ȳ)`.
    alpha: Vec<f64>,
    factorization: Factorization,
}

impl TrainedGpr {
    /// `[K + σ²I]⁻¹ v` through the cached factorization.
    fn solve(&self, v: &[f64]) -> Vec<f64> {
        match &self.factorization {
            Factorization::Dense { chol } => {
                let mut w = DVector::from_column_slice(v);
                chol.solve_mut(&mut w);
                w.iter().copied().collect()
            }
            Factorization::Kronecker {
                axes,
                eigvecs,
                eigvals,
            } => {
                let noise_var = self.kernel.sigma_noise * self.kernel.sigma_noise;
                let mut dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
                let mut w = v.to_vec();
                for (m, vm) in eigvecs.iter().enumerate() {
                    w = mode_multiply(&vm.transpose(), &w, &mut dims, m);
                }
                for (w_i, lam) in w.iter_mut().zip(eigvals) {
                    *w_i /= lam + noise_var;
                }
                for (m, vm) in eigvecs.iter().enumerate() {
                    w = mode_multiply(vm, &w, &mut dims, m);
                }
                w
            }
        }
    }
}

/// Predictive mean and variance at each query point.
pub fn gpr_predict(model: &TrainedGpr, queries: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let sigma_f2 = model.kernel.sigma_f * model.kernel.sigma_f;
    queries
        .iter()
        .map(|q| {
            let kstar: Vec<f64> = model
                .inputs
                .iter()
                .map(|xi| kernel_eval(&model.kernel, q, xi))
                .collect();
            let mean: f64 = kstar
                .iter()
                .zip(&model.alpha)
                .map(|(k, a)| k * a)
                .sum::<f64>()
                + model.y_mean;
            let solved = model.solve(&kstar);
            let explained: f64 = kstar.iter().zip(&solved).map(|(k, s)| k * s).sum();
            (mean, (sigma_f2 - explained).max(0.0))
        })
        .collect()
}

/// Predictive means over a whole query grid in flattened order, using
/// per-axis cross-kernels when the model itself is grid-structured.
pub fn predict_mean_on_grid(model: &TrainedGpr, query: &CartesianGrid) -> Result<Vec<f64>> {
    if query.dim() != model.kernel.dim() {
        return Err(CalibError::Dimension(
            "query grid dimension does not match the kernel".into(),
        ));
    }
    match &model.factorization {
        Factorization::Kronecker { axes, .. } => {
            let d = axes.len();
            let amp = model.kernel.sigma_f.powf(2.0 / d as f64);
            let mut dims: Vec<usize> = axes.iter().map(|a| a.len()).collect();
            let mut w = model.alpha.clone();
            for m in 0..d {
                let l = model.kernel.lengthscales[m];
                let q_axis = &query.axes()[m];
                let t_axis = &axes[m];
                let cross = DMatrix::from_fn(q_axis.len(), t_axis.len(), |i, j| {
                    let delta = (q_axis[i] - t_axis[j]) / l;
                    amp * (-0.5 * delta * delta).exp()
                });
                w = mode_multiply(&cross, &w, &mut dims, m);
            }
            for v in w.iter_mut() {
                *v += model.y_mean;
            }
            Ok(w)
        }
        Factorization::Dense { .. } => Ok(gpr_predict(model, &query.points())
            .into_iter()
            .map(|(mean, _)| mean)
            .collect()),
    }
}

fn centered(targets: &[f64]) -> (f64, Vec<f64>) {
    let mean = targets.iter().sum::<f64>() / targets.len() as f64;
    (mean, targets.iter().map(|y| y - mean).collect())
}

/// Dense fit at fixed hyperparameters with diagonal jitter escalation.
fn dense_fit(inputs: &[Vec<f64>], targets: &[f64], spec: &KernelSpec) -> Result<TrainedGpr> {
    let n = inputs.len();
    let (y_mean, y_c) = centered(targets);
    let noise_var = spec.sigma_noise * spec.sigma_noise;
    let base = DMatrix::from_fn(n, n, |i, j| {
        kernel_eval(spec, &inputs[i], &inputs[j]) + if i == j { noise_var } else { 0.0 }
    });
    let mut jitter = 0.0;
    let chol = loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(k) {
            break chol;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > MAX_JITTER {
            return Err(CalibError::NotPositiveDefinite(
                "kernel matrix stayed indefinite through jitter escalation".into(),
            ));
        }
    };
    let alpha_v = chol.solve(&DVector::from_column_slice(&y_c));
    let quad: f64 = y_c.iter().zip(alpha_v.iter()).map(|(y, a)| y * a).sum();
    let ln_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let loglik = -0.5 * quad - 0.5 * ln_det - 0.5 * n as f64 * LN_2PI;
    Ok(TrainedGpr {
        inputs: inputs.to_vec(),
        targets: targets.to_vec(),
        kernel: spec.clone(),
        loglik,
        y_mean,
        alpha: alpha_v.iter().copied().collect(),
        factorization: Factorization::Dense { chol },
    })
}

/// Maximize the marginal log-likelihood over log-hyperparameters with a
/// bounded simplex search; factorization failures act as soft penalties.
fn optimize_spec<F: FnMut(&KernelSpec) -> Result<f64>>(
    mut marginal: F,
    spec0: &KernelSpec,
) -> Result<KernelSpec> {
    let d = spec0.dim();
    let mut bounds = vec![(1e-4f64.ln(), 1e4f64.ln())];
    bounds.extend(std::iter::repeat((1e-3f64.ln(), 1e3f64.ln())).take(d));
    bounds.push((NOISE_STD_FLOOR.ln(), 1e3f64.ln()));
    let mut x0 = vec![spec0.sigma_f.ln()];
    x0.extend(spec0.lengthscales.iter().map(|l| l.ln()));
    x0.push(spec0.sigma_noise.ln());
    for (x, (lo, hi)) in x0.iter_mut().zip(&bounds) {
        *x = x.clamp(*lo, *hi);
    }
    let spec_of = |x: &[f64]| {
        KernelSpec::new(
            x[0].exp(),
            x[1..=d].iter().map(|v| v.exp()).collect(),
            x[d + 1].exp(),
        )
    };
    let opts = NelderMeadOptions {
        max_iters: 400,
        x_tol: 1e-4,
        f_tol: 1e-9,
        initial_step: 0.5,
    };
    let result: OptimResult = nelder_mead(
        |x| {
            let spec = spec_of(x)?;
            Ok(match marginal(&spec) {
                Ok(ll) => -ll,
                // An indefinite kernel matrix marks a bad hyperparameter
                // corner, not a fatal condition for the search.
                Err(_) => 1e15,
            })
        },
        &x0,
        &bounds,
        &opts,
    )?;
    spec_of(&result.x)
}

/// Fit a GPR to free-form inputs, optionally tuning the hyperparameters by
/// marginal likelihood before the final factorization.
pub fn gpr_fit(
    inputs: &[Vec<f64>],
    targets: &[f64],
    spec0: &KernelSpec,
    optimize: bool,
) -> Result<TrainedGpr> {
    if inputs.is_empty() {
        return Err(CalibError::Invalid("need at least one observation".into()));
    }
    if inputs.len() != targets.len() {
        return Err(CalibError::Dimension(
            "inputs and targets must have equal length".into(),
        ));
    }
    if inputs.iter().any(|x| x.len() != spec0.dim()) {
        return Err(CalibError::Dimension(
            "input dimension does not match the kernel lengthscales".into(),
        ));
    }
    let spec = if optimize {
        optimize_spec(|s| dense_fit(inputs, targets, s).map(|m| m.loglik), spec0)?
    } else {
        spec0.clone()
    };
    dense_fit(inputs, targets, &spec)
}

/// Fit a GPR on a Cartesian grid through the Kronecker structure of the
/// tensor-product kernel; numerically identical to the dense fit.
pub fn grid_fit(grid: &CartesianGrid, targets: &[f64], spec: &KernelSpec) -> Result<TrainedGpr> {
    let d = grid.dim();
    if spec.dim() != d {
        return Err(CalibError::Dimension(
            "kernel lengthscales must match the grid dimension".into(),
        ));
    }
    if targets.len() != grid.n_points() {
        return Err(CalibError::Dimension(
            "one target per grid point is required".into(),
        ));
    }
    let n = targets.len();
    let (y_mean, y_c) = centered(targets);
    let amp = spec.sigma_f.powf(2.0 / d as f64);
    let noise_var = spec.sigma_noise * spec.sigma_noise;
    let mut eigvecs = Vec::with_capacity(d);
    let mut eigvals = vec![1.0f64];
    for (axis, l) in grid.axes().iter().zip(&spec.lengthscales) {
        let n_m = axis.len();
        let k_m = DMatrix::from_fn(n_m, n_m, |i, j| {
            let delta = (axis[i] - axis[j]) / l;
            amp * (-0.5 * delta * delta).exp()
        });
        let eig = SymmetricEigen::new(k_m);
        // Outer product keeps the flattened (last axis fastest) order.
        let mut next = Vec::with_capacity(eigvals.len() * n_m);
        for &outer in &eigvals {
            for i in 0..n_m {
                next.push(outer * eig.eigenvalues[i]);
            }
        }
        eigvals = next;
        eigvecs.push(eig.eigenvectors);
    }
    if eigvals.iter().any(|lam| lam + noise_var <= 0.0) {
        return Err(CalibError::NotPositiveDefinite(
            "grid kernel matrix is indefinite at this noise level".into(),
        ));
    }
    let mut dims: Vec<usize> = grid.axes().iter().map(|a| a.len()).collect();
    let mut w = y_c.clone();
    for (m, vm) in eigvecs.iter().enumerate() {
        w = mode_multiply(&vm.transpose(), &w, &mut dims, m);
    }
    let mut quad = 0.0;
    let mut ln_det = 0.0;
    for (w_i, lam) in w.iter_mut().zip(&eigvals) {
        let denom = lam + noise_var;
        quad += *w_i * *w_i / denom;
        ln_det += denom.ln();
        *w_i /= denom;
    }
    for (m, vm) in eigvecs.iter().enumerate() {
        w = mode_multiply(vm, &w, &mut dims, m);
    }
    let loglik = -0.5 * quad - 0.5 * ln_det - 0.5 * n as f64 * LN_2PI;
    Ok(TrainedGpr {
        inputs: grid.points(),
        targets: targets.to_vec(),
        kernel: spec.clone(),
        loglik,
        y_mean,
        alpha: w,
        factorization: Factorization::Kronecker {
            axes: grid.axes().to_vec(),
            eigvecs,
            eigvals,
        },
    })
}

/// Grid of parameter points with raw and smoothed likelihood values.
#[derive(Debug, Clone)]
pub struct LikelihoodSurface {
    /// Grid points in flattened order.
    pub points: Vec<Vec<f64>>,
    /// Particle-filter log-likelihood per point; `None` where the
    /// evaluation failed and the point was skipped.
    pub loglik: Vec<Option<f64>>,
    /// Smoothed (GPR mean) log-likelihood per point.
    pub fitted: Vec<f64>,
    /// Flattened indices of the skipped points.
    pub failed: Vec<usize>,
}

/// Export an `(a, k)` surface as delimited text.
pub fn write_surface<W: Write>(surface: &LikelihoodSurface, out: &mut W) -> Result<()> {
    writeln!(out, "a,k,loglik,fitted_loglik")?;
    for (point, (raw, fitted)) in surface
        .points
        .iter()
        .zip(surface.loglik.iter().zip(&surface.fitted))
    {
        if point.len() != 2 {
            return Err(CalibError::Invalid(
                "surface export expects (a, k) points".into(),
            ));
        }
        if let Some(ll) = raw {
            writeln!(out, "{},{},{},{}", point[0], point[1], ll, fitted)?;
        }
    }
    Ok(())
}

/// Particle-filter likelihood surface estimate with its smoothed maximizer.
#[derive(Debug, Clone)]
pub struct PfGprFit {
    /// Free-parameter names, in the order of `estimates`.
    pub parameter_names: Vec<&'static str>,
    /// Maximizer of the smoothed likelihood surface.
    pub estimates: Vec<f64>,
    /// Full parameters rebuilt at the estimates.
    pub psi: ModelParameters,
    /// Smoothed log-likelihood at the maximizer.
    pub fitted_max: f64,
    /// Evaluated surface for reporting.
    pub surface: LikelihoodSurface,
    /// Trained regression over the surface.
    pub gpr: TrainedGpr,
}

/// Calibrate the default-only model by smoothing a grid of importance
/// particle-filter log-likelihoods with a GPR and maximizing the smoothed
/// mean.  Evaluations are independent per grid point with their own RNG
/// streams; failures are skipped as long as at least 90% of the grid
/// evaluates, otherwise the surface is reported as too sparse.
pub fn pf_gpr_mle<R: Rng + ?Sized>(
    family: ModelFamily,
    series: &MigrationSeries,
    u: &ObservedFactors,
    grid: &CartesianGrid,
    n_particles: usize,
    rng: &mut R,
) -> Result<PfGprFit> {
    if family != ModelFamily::DefaultOnlyProbit {
        return Err(CalibError::Unsupported(
            "surface calibration covers the default-only model".into(),
        ));
    }
    if u.dim() != 0 {
        return Err(CalibError::Unsupported(
            "surface calibration does not take observed factors".into(),
        ));
    }
    if grid.dim() != 2 {
        return Err(CalibError::Invalid(
            "surface calibration needs a two-dimensional (a, k) grid".into(),
        ));
    }
    if n_particles == 0 {
        return Err(CalibError::Invalid("need at least one particle".into()));
    }
    let targets = observed_default_averages(series);
    let master: u64 = rng.gen();
    let total = grid.n_points();
    let evals: Vec<Option<f64>> = par_map_indexed(total, |idx| {
        let point = grid.point(idx);
        let psi = parameters_from_free(family, &point, &targets, &[]).ok()?;
        let mut point_rng = ChaCha8Rng::seed_from_u64(master);
        point_rng.set_stream(idx as u64);
        pf_importance_for_series(
            family,
            series,
            &psi,
            u,
            n_particles,
            &ModeOptions::default(),
            &mut point_rng,
        )
        .ok()
        .map(|fit| fit.loglik)
    });
    let failed: Vec<usize> = evals
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.is_none().then_some(i))
        .collect();
    let evaluated = total - failed.len();
    let required = (REQUIRED_SUCCESS_FRACTION * total as f64).ceil() as usize;
    if evaluated < required {
        return Err(CalibError::SparseSurface {
            evaluated,
            total,
            required,
        });
    }

    let good: Vec<f64> = evals.iter().flatten().copied().collect();
    let (_, centered_good) = centered(&good);
    let spread = (centered_good.iter().map(|y| y * y).sum::<f64>()
        / centered_good.len().max(1) as f64)
        .sqrt();
    let spec0 = KernelSpec::new(
        spread.max(1e-2),
        grid.axes()
            .iter()
            .map(|axis| ((axis[axis.len() - 1] - axis[0]) / 4.0).max(1e-2))
            .collect(),
        1.0,
    )?;
    let model = if failed.is_empty() {
        let spec = optimize_spec(|s| grid_fit(grid, &good, s).map(|m| m.loglik), &spec0)?;
        grid_fit(grid, &good, &spec)?
    } else {
        let inputs: Vec<Vec<f64>> = evals
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.is_some().then(|| grid.point(i)))
            .collect();
        gpr_fit(&inputs, &good, &spec0, true)?
    };
    let fitted = predict_mean_on_grid(&model, grid)?;

    // Coarse argmax on a refined lattice, then a local simplex polish.
    let lattice = CartesianGrid::new(
        grid.axes()
            .iter()
            .map(|axis| {
                if axis.len() == 1 {
                    return axis.clone();
                }
                let lo = axis[0];
                let hi = axis[axis.len() - 1];
                let count = axis.len() * LATTICE_REFINEMENT;
                let step = (hi - lo) / (count - 1) as f64;
                (0..count).map(|i| lo + i as f64 * step).collect()
            })
            .collect(),
    )?;
    let lattice_means = predict_mean_on_grid(&model, &lattice)?;
    let best = lattice_means
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| CalibError::Invalid("empty evaluation lattice".into()))?;
    let start = lattice.point(best);
    // Polish only along axes with real extent; single-point axes stay put.
    let free_dims: Vec<usize> = grid
        .axes()
        .iter()
        .enumerate()
        .filter_map(|(m, axis)| (axis.len() > 1).then_some(m))
        .collect();
    let (estimates, fitted_max) = if free_dims.is_empty() {
        (start.clone(), lattice_means[best])
    } else {
        let bounds: Vec<(f64, f64)> = free_dims
            .iter()
            .map(|&m| {
                let axis = &grid.axes()[m];
                (axis[0], axis[axis.len() - 1])
            })
            .collect();
        let sub_start: Vec<f64> = free_dims.iter().map(|&m| start[m]).collect();
        let polish_opts = NelderMeadOptions {
            max_iters: 200,
            x_tol: 1e-6,
            f_tol: 1e-12,
            initial_step: 0.01,
        };
        let polished = nelder_mead(
            |x| {
                let mut full = start.clone();
                for (&m, &v) in free_dims.iter().zip(x) {
                    full[m] = v;
                }
                Ok(-gpr_predict(&model, &[full])[0].0)
            },
            &sub_start,
            &bounds,
            &polish_opts,
        )?;
        let mut full = start.clone();
        for (&m, &v) in free_dims.iter().zip(&polished.x) {
            full[m] = v;
        }
        (full, -polished.f)
    };
    let psi = parameters_from_free(family, &estimates, &targets, &[])?;
    Ok(PfGprFit {
        parameter_names: vec!["a", "k"],
        estimates,
        psi,
        fitted_max,
        surface: LikelihoodSurface {
            points: grid.points(),
            loglik: evals,
            fitted,
            failed,
        },
        gpr: model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Levels, Loading};
    use rand_distr::StandardNormal;
    use std::time::Instant;

    fn spec(sigma_f: f64, ls: &[f64], sigma_noise: f64) -> KernelSpec {
        KernelSpec::new(sigma_f, ls.to_vec(), sigma_noise).unwrap()
    }

    #[test]
    fn kernel_matches_hand_values() {
        let s = spec(0.7, &[1.3, 0.4], 0.1);
        let x = vec![0.2, -0.1];
        assert!((kernel_eval(&s, &x, &x) - 0.49).abs() < 1e-12);
        let s1 = spec(1.0, &[1.0], 0.1);
        let v = kernel_eval(&s1, &[0.0], &[1.0]);
        assert!((v - 0.606531).abs() < 1e-6);
        assert!((v - kernel_eval(&s1, &[1.0], &[0.0])).abs() < 1e-15);
    }

    #[test]
    fn kernel_factorizes_over_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let d = rng.gen_range(1..=3usize);
            let ls: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..2.0)).collect();
            let sigma_f: f64 = rng.gen_range(0.5..2.0);
            let s = spec(sigma_f, &ls, 0.1);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let full = kernel_eval(&s, &x, &y);
            let amp = sigma_f.powf(2.0 / d as f64);
            let product: f64 = (0..d)
                .map(|m| {
                    let s_m = KernelSpec::new(amp.sqrt(), vec![ls[m]], 0.1).unwrap();
                    kernel_eval(&s_m, &x[m..=m], &y[m..=m])
                })
                .product();
            assert!((full - product).abs() < 1e-12 * full.max(1.0));
        }
    }

    #[test]
    fn single_point_interpolates_as_noise_vanishes() {
        let model = gpr_fit(&[vec![0.3]], &[2.5], &spec(1.0, &[1.0], 1e-10), false).unwrap();
        let (mean, var) = gpr_predict(&model, &[vec![0.3]])[0];
        assert!((mean - 2.5).abs() < 1e-10);
        assert!(var >= 0.0 && var <= 1e-8);
    }

    #[test]
    fn training_points_are_interpolated_at_low_noise() {
        let inputs: Vec<Vec<f64>> = vec![
            vec![0.0],
            vec![0.7],
            vec![1.5],
            vec![2.4],
            vec![3.6],
        ];
        let targets = [0.3, -1.2, 0.8, 2.0, -0.4];
        let s = spec(1.5, &[0.8], 1e-6);
        let model = gpr_fit(&inputs, &targets, &s, false).unwrap();
        for ((x, &y), (mean, var)) in inputs
            .iter()
            .zip(&targets)
            .zip(gpr_predict(&model, &inputs))
        {
            assert!((mean - y).abs() < 1e-4, "at {x:?}: {mean} vs {y}");
            assert!(var <= s.sigma_noise * s.sigma_noise + 1e-8);
        }
    }

    #[test]
    fn marginal_loglik_matches_direct_dense_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let d = rng.gen_range(1..=2usize);
            let n = rng.gen_range(2..=12usize);
            let s = spec(
                rng.gen_range(0.5..2.0),
                &(0..d)
                    .map(|_| rng.gen_range(0.3..1.5))
                    .collect::<Vec<f64>>(),
                rng.gen_range(0.05..0.5),
            );
            let inputs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let model = gpr_fit(&inputs, &targets, &s, false).unwrap();
            let (_, y_c) = centered(&targets);
            let noise_var = s.sigma_noise * s.sigma_noise;
            let k = DMatrix::from_fn(n, n, |i, j| {
                kernel_eval(&s, &inputs[i], &inputs[j]) + if i == j { noise_var } else { 0.0 }
            });
            let y = DVector::from_column_slice(&y_c);
            let quad = (y.transpose() * k.clone().try_inverse().unwrap() * &y)[(0, 0)];
            let direct = -0.5 * quad - 0.5 * k.determinant().ln() - 0.5 * n as f64 * LN_2PI;
            assert!(
                (model.loglik - direct).abs() < 1e-8 * (1.0 + direct.abs()),
                "{} vs {}",
                model.loglik,
                direct
            );
        }
    }

    #[test]
    fn grid_fit_matches_dense_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cases: Vec<Vec<usize>> = vec![vec![5], vec![6, 4], vec![4, 3, 3]];
        for counts in cases {
            let d = counts.len();
            let axes: Vec<Vec<f64>> = counts
                .iter()
                .map(|&c| {
                    let start: f64 = rng.gen_range(-1.0..0.0);
                    (0..c)
                        .map(|i| start + i as f64 * rng.gen_range(0.2..0.5))
                        .collect()
                })
                .collect();
            let grid = CartesianGrid::new(axes).unwrap();
            let targets: Vec<f64> = (0..grid.n_points())
                .map(|_| rng.gen_range(-2.0..2.0))
                .collect();
            let s = spec(
                rng.gen_range(0.5..1.5),
                &(0..d)
                    .map(|_| rng.gen_range(0.4..1.2))
                    .collect::<Vec<f64>>(),
                0.2,
            );
            let kron = grid_fit(&grid, &targets, &s).unwrap();
            let dense = gpr_fit(&grid.points(), &targets, &s, false).unwrap();
            assert!(
                (kron.loglik - dense.loglik).abs() < 1e-8 * (1.0 + dense.loglik.abs()),
                "loglik {} vs {}",
                kron.loglik,
                dense.loglik
            );
            let queries: Vec<Vec<f64>> = (0..7)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..2.0)).collect())
                .collect();
            for (kq, dq) in gpr_predict(&kron, &queries)
                .iter()
                .zip(gpr_predict(&dense, &queries))
            {
                assert!((kq.0 - dq.0).abs() < 1e-8);
                assert!((kq.1 - dq.1).abs() < 1e-8);
            }
            let grid_means = predict_mean_on_grid(&kron, &grid).unwrap();
            for (gm, dq) in grid_means.iter().zip(gpr_predict(&dense, &grid.points())) {
                assert!((gm - dq.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn grid_fit_is_faster_than_dense_at_surface_size() {
        let grid = CartesianGrid::uniform(&[(0.1, 0.9), (0.1, 0.9)], &[20, 20]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let targets: Vec<f64> = (0..grid.n_points())
            .map(|_| rng.gen_range(-5.0..5.0))
            .collect();
        let s = spec(1.0, &[0.2, 0.2], 0.3);
        let points = grid.points();
        let time = |f: &dyn Fn()| {
            let mut best = f64::INFINITY;
            for _ in 0..3 {
                let t = Instant::now();
                f();
                best = best.min(t.elapsed().as_secs_f64());
            }
            best
        };
        let t_dense = time(&|| {
            gpr_fit(&points, &targets, &s, false).unwrap();
        });
        let t_grid = time(&|| {
            grid_fit(&grid, &targets, &s).unwrap();
        });
        assert!(
            t_grid * 5.0 <= t_dense,
            "grid {t_grid:.6}s vs dense {t_dense:.6}s"
        );
    }

    #[test]
    fn flattened_order_enumerates_last_axis_fastest() {
        let grid = CartesianGrid::new(vec![
            vec![1.0, 2.0, 3.0],
            vec![10.0, 20.0],
            vec![100.0, 200.0],
        ])
        .unwrap();
        assert_eq!(grid.n_points(), 12);
        let pts = grid.points();
        assert_eq!(pts[0], vec![1.0, 10.0, 100.0]);
        assert_eq!(pts[1], vec![1.0, 10.0, 200.0]);
        assert_eq!(pts[2], vec![1.0, 20.0, 100.0]);
        assert_eq!(pts[3], vec![1.0, 20.0, 200.0]);
        assert_eq!(pts[4], vec![2.0, 10.0, 100.0]);
        assert_eq!(pts[11], vec![3.0, 20.0, 200.0]);
    }

    #[test]
    fn one_point_grid_degenerates_to_single_point_fit() {
        let grid = CartesianGrid::new(vec![vec![0.4], vec![0.6]]).unwrap();
        let s = spec(1.0, &[0.5, 0.5], 0.05);
        let kron = grid_fit(&grid, &[1.7], &s).unwrap();
        let dense = gpr_fit(&[vec![0.4, 0.6]], &[1.7], &s, false).unwrap();
        let q = vec![vec![0.45, 0.55]];
        let (km, kv) = gpr_predict(&kron, &q)[0];
        let (dm, dv) = gpr_predict(&dense, &q)[0];
        assert!((km - dm).abs() < 1e-12);
        assert!((kv - dv).abs() < 1e-12);
    }

    #[test]
    fn distant_queries_revert_to_the_prior() {
        let inputs: Vec<Vec<f64>> = vec![vec![-0.5], vec![0.0], vec![0.5]];
        let targets = [1.0, -2.0, 1.0];
        let s = spec(1.3, &[0.4], 0.2);
        let model = gpr_fit(&inputs, &targets, &s, false).unwrap();
        let (mean, var) = gpr_predict(&model, &[vec![8.0]])[0];
        let y_mean = targets.iter().sum::<f64>() / 3.0;
        assert!((mean - y_mean).abs() < 1e-9);
        assert!((var - s.sigma_f * s.sigma_f).abs() < 1e-9);
    }

    #[test]
    fn noisy_single_observation_shrinks_toward_the_prior() {
        // Two targets symmetric about zero keep centering inert; the far
        // point is 40 lengthscales away, so the near prediction follows the
        // one-point posterior k/(k + σ²) almost exactly.
        let s = spec(0.9, &[0.5], 0.6);
        let v = 1.4;
        let model = gpr_fit(&[vec![0.0], vec![20.0]], &[v, -v], &s, false).unwrap();
        let (mean, _) = gpr_predict(&model, &[vec![0.0]])[0];
        let k = s.sigma_f * s.sigma_f;
        let expected = k / (k + s.sigma_noise * s.sigma_noise) * v;
        assert!((mean - expected).abs() < 1e-9, "{mean} vs {expected}");
    }

    #[test]
    fn hyperparameter_search_recovers_the_lengthscale() {
        let truth = spec(1.0, &[0.5], 0.1);
        let n = 200;
        let inputs: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.05]).collect();
        let base = DMatrix::from_fn(n, n, |i, j| {
            kernel_eval(&truth, &inputs[i], &inputs[j])
                + if i == j {
                    truth.sigma_noise * truth.sigma_noise + 1e-10
                } else {
                    0.0
                }
        });
        let chol = Cholesky::new(base).unwrap();
        let mut hits = 0;
        let trials = 50;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(600 + t);
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = chol.l() * z;
            let targets: Vec<f64> = y.iter().copied().collect();
            let model = gpr_fit(&inputs, &targets, &spec(1.0, &[1.0], 0.1), true).unwrap();
            let l = model.kernel.lengthscales[0];
            if l > 0.25 && l < 1.0 {
                hits += 1;
            }
        }
        assert!(hits >= 45, "recovered {hits} of {trials}");
    }

    fn default_only_panel(seed: u64, n_periods: usize, population: i64) -> MigrationSeries {
        let k = 0.3;
        let d = crate::simulate::default_levels_from_averages(&[0.04], k).unwrap();
        let psi = ModelParameters::unit_variance(
            Levels::PerRowDefault(d),
            Loading::Scalar(k),
            Loading::zero(1),
            &[0.7],
            0.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::simulate::simulate_migrations(
            ModelFamily::DefaultOnlyProbit,
            &psi,
            &ObservedFactors::none(n_periods, 0),
            &[population],
            n_periods,
            false,
            &mut rng,
        )
        .unwrap()
        .series
    }

    #[test]
    fn surface_calibration_is_deterministic_and_lands_in_the_box() {
        let series = default_only_panel(51, 40, 5000);
        let grid = CartesianGrid::uniform(&[(0.1, 0.9), (0.1, 0.9)], &[6, 6]).unwrap();
        let u = ObservedFactors::none(40, 0);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            pf_gpr_mle(
                ModelFamily::DefaultOnlyProbit,
                &series,
                &u,
                &grid,
                300,
                &mut rng,
            )
            .unwrap()
        };
        let fit = run(7);
        assert_eq!(fit.parameter_names, vec!["a", "k"]);
        assert!(fit.surface.failed.is_empty());
        assert_eq!(fit.surface.points.len(), 36);
        for est in &fit.estimates {
            assert!(*est >= 0.1 && *est <= 0.9);
        }
        assert!((fit.estimates[1] - 0.3).abs() < 0.25, "k {}", fit.estimates[1]);
        let again = run(7);
        assert_eq!(fit.estimates, again.estimates);
        assert_eq!(fit.fitted_max, again.fitted_max);
        let mut buf = Vec::new();
        write_surface(&fit.surface, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("a,k,loglik,fitted_loglik"));
        assert_eq!(lines.count(), 36);
    }

    #[test]
    fn sparse_surfaces_are_reported_not_fitted() {
        let series = default_only_panel(53, 20, 2000);
        let u = ObservedFactors::none(20, 0);
        // A third of the grid sits at an explosive AR value and cannot be
        // evaluated, well past the allowed failure budget.
        let grid =
            CartesianGrid::new(vec![vec![0.5, 0.7, 1.5], vec![0.2, 0.3]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let err = pf_gpr_mle(
            ModelFamily::DefaultOnlyProbit,
            &series,
            &u,
            &grid,
            100,
            &mut rng,
        )
        .unwrap_err();
        match err {
            CalibError::SparseSurface {
                evaluated,
                total,
                required,
            } => {
                assert_eq!((evaluated, total, required), (4, 6, 6));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn isolated_failures_are_skipped_and_flagged() {
        let series = default_only_panel(57, 20, 2000);
        let u = ObservedFactors::none(20, 0);
        let mut a_axis: Vec<f64> = (0..9).map(|i| 0.1 + 0.08 * i as f64).collect();
        a_axis.push(1.5);
        let grid = CartesianGrid::new(vec![a_axis, vec![0.3]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fit = pf_gpr_mle(
            ModelFamily::DefaultOnlyProbit,
            &series,
            &u,
            &grid,
            100,
            &mut rng,
        )
        .unwrap();
        assert_eq!(fit.surface.failed, vec![9]);
        assert!(fit.surface.loglik[9].is_none());
        assert!(fit.estimates.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn unsupported_configurations_are_rejected() {
        let series = default_only_panel(59, 10, 1000);
        let grid = CartesianGrid::uniform(&[(0.1, 0.9), (0.1, 0.9)], &[3, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            pf_gpr_mle(
                ModelFamily::MultiFactorLogistic,
                &series,
                &ObservedFactors::none(10, 0),
                &grid,
                100,
                &mut rng,
            ),
            Err(CalibError::Unsupported(_))
        ));
        assert!(matches!(
            pf_gpr_mle(
                ModelFamily::DefaultOnlyProbit,
                &series,
                &ObservedFactors::none(10, 1),
                &grid,
                100,
                &mut rng,
            ),
            Err(CalibError::Unsupported(_))
        ));
        let one_dim = CartesianGrid::new(vec![vec![0.1, 0.9]]).unwrap();
        assert!(matches!(
            pf_gpr_mle(
                ModelFamily::DefaultOnlyProbit,
                &series,
                &ObservedFactors::none(10, 0),
                &one_dim,
                100,
                &mut rng,
            ),
            Err(CalibError::Invalid(_))
        ));
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(CartesianGrid::new(vec![]).is_err());
        assert!(CartesianGrid::new(vec![vec![]]).is_err());
        assert!(CartesianGrid::new(vec![vec![0.3, 0.2]]).is_err());
        assert!(CartesianGrid::uniform(&[(0.9, 0.1)], &[5]).is_err());
        assert!(gpr_fit(&[], &[], &spec(1.0, &[1.0], 0.1), false).is_err());
        assert!(KernelSpec::new(0.0, vec![1.0], 0.1).is_err());
        assert!(KernelSpec::new(1.0, vec![-1.0], 0.1).is_err());
        assert!(KernelSpec::new(1.0, vec![1.0], 0.0).is_err());
    }
}
