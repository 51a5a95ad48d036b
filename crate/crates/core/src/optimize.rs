//! Bounded derivative-free minimization: Nelder–Mead on a box.
//!
//! The calibration objectives are smooth but only available through
//! numerical approximation layers, so all outer optimization is simplex
//! based with candidate points projected onto the feasible box.  Callers
//! that maximize pass the negated objective.

use crate::error::CalibError;
use crate::Result;

/// Nelder–Mead tuning knobs.
#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Maximum number of iterations (reflection cycles).
    pub max_iters: usize,
    /// Simplex size tolerance in parameter sup-norm.
    pub x_tol: f64,
    /// Spread tolerance on objective values across the simplex.
    pub f_tol: f64,
    /// Initial simplex step, as a fraction of each box width.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            x_tol: 1e-5,
            f_tol: 1e-9,
            initial_step: 0.10,
        }
    }
}

/// Outcome of a simplex run.
#[derive(Debug, Clone)]
pub struct OptimResult {
    /// Best point found.
    pub x: Vec<f64>,
    /// Objective value at `x`.
    pub f: f64,
    /// Iterations performed.
    pub iterations: usize,
    /// Objective evaluations consumed.
    pub evaluations: usize,
    /// Whether a tolerance (rather than the iteration cap) stopped the run.
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(lo, hi);
    }
}

/// Minimize `f` over the box `bounds` starting at `x0` (projected inside).
///
/// Objective errors abort the run and propagate to the caller.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let dim = x0.len();
    if dim == 0 || bounds.len() != dim {
        return Err(CalibError::Dimension(
            "optimizer needs one finite bound pair per parameter".into(),
        ));
    }
    for &(lo, hi) in bounds {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(CalibError::Invalid(format!(
                "invalid bound pair ({lo}, {hi})"
            )));
        }
    }

    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| -> Result<f64> {
        *evals += 1;
        let v = f(x)?;
        if v.is_nan() {
            return Err(CalibError::Optimization(format!(
                "objective returned NaN at {x:?}"
            )));
        }
        Ok(v)
    };

    // Initial simplex: x0 plus one step along each coordinate.
    let mut start = x0.to_vec();
    clamp_into(&mut start, bounds);
    let mut simplex: Vec<Vec<f64>> = vec![start.clone()];
    for d in 0..dim {
        let (lo, hi) = bounds[d];
        let mut p = start.clone();
        let step = opts.initial_step * (hi - lo);
        p[d] = if p[d] + step <= hi { p[d] + step } else { p[d] - step };
        simplex.push(p);
    }
    let mut values = Vec::with_capacity(dim + 1);
    for p in &simplex {
        values.push(eval(p, &mut evals)?);
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        // Order the simplex by objective value.
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
        let best = order[0];
        let worst = order[dim];
        let second_worst = order[dim - 1];

        // Convergence: simplex collapsed in x and f.
        let mut spread_x: f64 = 0.0;
        for p in &simplex {
            for d in 0..dim {
                spread_x = spread_x.max((p[d] - simplex[best][d]).abs());
            }
        }
        let spread_f = values[worst] - values[best];
        if spread_x <= opts.x_tol && spread_f.abs() <= opts.f_tol * (1.0 + values[best].abs()) {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for &i in order.iter().take(dim) {
            for d in 0..dim {
                centroid[d] += simplex[i][d];
            }
        }
        for c in centroid.iter_mut() {
            *c /= dim as f64;
        }

        let project = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + t * (c - w))
                .collect();
            clamp_into(&mut p, bounds);
            p
        };

        let reflected = project(alpha);
        let f_r = eval(&reflected, &mut evals)?;
        if f_r < values[best] {
            let expanded = project(gamma);
            let f_e = eval(&expanded, &mut evals)?;
            if f_e < f_r {
                simplex[worst] = expanded;
                values[worst] = f_e;
            } else {
                simplex[worst] = reflected;
                values[worst] = f_r;
            }
            continue;
        }
        if f_r < values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = f_r;
            continue;
        }
        // Contraction (outside if the reflection improved on the worst).
        let contracted = if f_r < values[worst] {
            project(alpha * rho)
        } else {
            project(-rho)
        };
        let f_c = eval(&contracted, &mut evals)?;
        if f_c < values[worst].min(f_r) {
            simplex[worst] = contracted;
            values[worst] = f_c;
            continue;
        }
        // Shrink towards the best vertex.
        for i in 0..=dim {
            if i == best {
                continue;
            }
            for d in 0..dim {
                simplex[i][d] = simplex[best][d] + sigma * (simplex[i][d] - simplex[best][d]);
            }
            clamp_into(&mut simplex[i], bounds);
            values[i] = eval(&simplex[i], &mut evals)?;
        }
    }

    let mut best = 0;
    for i in 1..=dim {
        if values[i] < values[best] {
            best = i;
        }
    }
    Ok(OptimResult {
        x: simplex[best].clone(),
        f: values[best],
        iterations,
        evaluations: evals,
        converged,
    })
}

/// Minimize from several fixed starting points and keep the best outcome.
pub fn nelder_mead_multistart<F>(
    mut f: F,
    starts: &[Vec<f64>],
    bounds: &[(f64, f64)],
    opts: &NelderMeadOptions,
) -> Result<OptimResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut best: Option<OptimResult> = None;
    for start in starts {
        let run = nelder_mead(&mut f, start, bounds, opts)?;
        best = Some(match best {
            Some(b) if b.f <= run.f => {
                let mut b = b;
                b.iterations += run.iterations;
                b.evaluations += run.evaluations;
                b
            }
            Some(b) => {
                let mut r = run;
                r.iterations += b.iterations;
                r.evaluations += b.evaluations;
                r
            }
            None => run,
        });
    }
    best.ok_or_else(|| CalibError::Optimization("no starting points given".into()))
}

/// The three fixed starting points used by the calibration drivers: the box
/// quarter, mid and three-quarter points in every coordinate.
pub fn default_starts(bounds: &[(f64, f64)]) -> Vec<Vec<f64>> {
    [0.25, 0.5, 0.75]
        .iter()
        .map(|t| bounds.iter().map(|&(lo, hi)| lo + t * (hi - lo)).collect())
        .collect()
}
