//! Scalar special functions and numerical helpers.
//!
//! Everything downstream (probit links, multinomial log-likelihoods,
//! particle weights) funnels through these few functions, so they are kept
//! accurate to near machine precision: the normal CDF and quantile are exact
//! to well below `1e-12` absolute error over the ranges the models visit.

use nalgebra::DMatrix;
use statrs::function::erf;
use statrs::function::gamma::ln_gamma;

// `libm` supplies the erf/erfc pair (musl's FDLIBM port, accurate to about
// one ulp); the statrs erfc is only good to ~1e-11, which is not enough for
// the probability accuracy the calibrations rely on.  statrs still provides
// the near-exact inverse used to seed the quantile.

/// `1 / sqrt(2*pi)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `ln(2*pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_4;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Standard normal density `phi(x)`.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal distribution function `Phi(x)`, accurate to ~1 ulp.
///
/// Uses the complementary error function so that both tails keep full
/// relative precision instead of saturating at 0 or 1.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Upper tail `1 - Phi(x)` without cancellation for large `x`.
#[inline]
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Standard normal quantile `Phi^{-1}(p)` for `p` in `(0, 1)`.
///
/// The inverse complementary error function gives a near-exact seed which a
/// single Newton step polishes to the accuracy of [`norm_cdf`] itself.
pub fn norm_quantile(p: f64) -> f64 {
    assert!(
        p > 0.0 && p < 1.0,
        "norm_quantile requires p in (0, 1), got {p}"
    );
    let x = -SQRT_2 * erf::erfc_inv(2.0 * p);
    // One Newton step: f(x) = Phi(x) - p has derivative phi(x).
    let f = norm_cdf(x) - p;
    let d = norm_pdf(x);
    if d > 0.0 {
        x - f / d
    } else {
        x
    }
}

/// Log-density of `N(x; mean, var)` for scalar arguments.
#[inline]
pub fn ln_norm_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    -0.5 * (LN_2PI + var.ln() + z * z / var)
}

/// `ln Gamma(x)` re-exported under one roof.
#[inline]
pub fn ln_gamma_fn(x: f64) -> f64 {
    ln_gamma(x)
}

/// Log multinomial coefficient `ln [ n! / (m_1! ... m_c!) ]`.
///
/// The counts must sum to `n`; zero counts contribute nothing.
pub fn ln_multinomial_coef(counts: &[i64]) -> f64 {
    let n: i64 = counts.iter().sum();
    let mut out = ln_gamma(n as f64 + 1.0);
    for &m in counts {
        if m > 0 {
            out -= ln_gamma(m as f64 + 1.0);
        }
    }
    out
}

/// Log binomial coefficient `ln C(n, k)`.
#[inline]
pub fn ln_binomial_coef(n: i64, k: i64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln(sum_i exp(v_i))` with max-subtraction; `-inf` for an empty or
/// all-`-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

/// Replace `m` by its symmetric part `(m + m^T) / 2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    debug_assert_eq!(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Sample mean and (n-1)-denominator standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Pearson correlation of two equal-length samples.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "correlation requires equal lengths");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}
