//! Core data model: rating schemes, migration count series, latent-factor
//! model parameters and the delimited file formats used by the CLI.
//!
//! Conventions used throughout the crate:
//!
//! * A scheme has `R` ratings; the last one is the absorbing default state.
//!   Only the `R - 1` performing ratings are modelled as source rows.
//! * Periods are `1..=n` in files and `0..n` in memory.
//! * The latent factor process is `x_k = A x_{k-1} + eta_k` with
//!   `eta_k ~ N(0, Q)`, started from `x_0 ~ N(a0, P0)`.
//! * Under the unit-variance convention the innovation covariance is
//!   `Q = D Corr(rho) D` with `D = diag(sqrt(1 - A_mm^2))`, so every factor
//!   has stationary variance one and loadings stay identifiable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::CalibError;
use crate::Result;

/// Ordered set of rating labels; the last label is the absorbing default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingScheme {
    labels: Vec<String>,
}

impl RatingScheme {
    /// Build a scheme from ordered labels, best to worst, default last.
    pub fn new<S: Into<String>>(labels: Vec<S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(CalibError::Invalid(format!(
                "rating scheme needs at least 2 ratings (one performing, one default), got {}",
                labels.len()
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if a.is_empty() {
                return Err(CalibError::Invalid(format!("empty label at position {i}")));
            }
            if labels[..i].contains(a) {
                return Err(CalibError::Invalid(format!("duplicate rating label '{a}'")));
            }
        }
        Ok(Self { labels })
    }

    /// Convenience scheme `P1, P2, ..., D` with `n_performing` + 1 ratings.
    pub fn numbered(n_performing: usize) -> Self {
        let mut labels: Vec<String> = (1..=n_performing).map(|i| format!("P{i}")).collect();
        labels.push("D".to_string());
        Self { labels }
    }

    /// Total number of ratings `R`, default included.
    pub fn n_ratings(&self) -> usize {
        self.labels.len()
    }

    /// Number of modelled source rows, `R - 1`.
    pub fn n_performing(&self) -> usize {
        self.labels.len() - 1
    }

    /// All labels in order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Label of rating `index` (0-based).
    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Index of `label`, if present.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Migration counts `m_{ij,k}` for periods `k = 0..n`, source rows
/// `i = 0..R-1`, destinations `j = 0..R`, plus recorded row totals `N_{i,k}`.
///
/// Counts are kept signed so that malformed input survives parsing and is
/// reported by [`validate_series`] instead of panicking on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationSeries {
    counts: Vec<DMatrix<i64>>,
    row_totals: Vec<Vec<i64>>,
}

impl MigrationSeries {
    /// Build a series from per-period count matrices; row totals are the row
    /// sums.  All matrices must share one `(R-1) x R` shape.
    pub fn from_counts(counts: Vec<DMatrix<i64>>) -> Result<Self> {
        if counts.is_empty() {
            return Err(CalibError::Invalid(
                "migration series needs at least one period".into(),
            ));
        }
        let (rows, cols) = (counts[0].nrows(), counts[0].ncols());
        if cols < 2 || rows + 1 != cols {
            return Err(CalibError::Dimension(format!(
                "count matrices must be (R-1) x R, got {rows} x {cols}"
            )));
        }
        for (k, m) in counts.iter().enumerate() {
            if m.nrows() != rows || m.ncols() != cols {
                return Err(CalibError::Dimension(format!(
                    "period {} has shape {} x {}, expected {rows} x {cols}",
                    k + 1,
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        let row_totals = counts
            .iter()
            .map(|m| (0..rows).map(|i| m.row(i).iter().sum()).collect())
            .collect();
        Ok(Self { counts, row_totals })
    }

    /// Build a series with explicitly recorded row totals (which
    /// [`validate_series`] will cross-check against the count sums).
    pub fn with_totals(counts: Vec<DMatrix<i64>>, row_totals: Vec<Vec<i64>>) -> Result<Self> {
        let mut s = Self::from_counts(counts)?;
        if row_totals.len() != s.n_periods()
            || row_totals.iter().any(|r| r.len() != s.n_performing())
        {
            return Err(CalibError::Dimension(
                "row totals must be n_periods x (R-1)".into(),
            ));
        }
        s.row_totals = row_totals;
        Ok(s)
    }

    /// Number of observed periods `n`.
    pub fn n_periods(&self) -> usize {
        self.counts.len()
    }

    /// Number of ratings `R` implied by the count shape.
    pub fn n_ratings(&self) -> usize {
        self.counts[0].ncols()
    }

    /// Number of modelled source rows `R - 1`.
    pub fn n_performing(&self) -> usize {
        self.counts[0].nrows()
    }

    /// Count matrix of period `k` (0-based).
    pub fn counts(&self, k: usize) -> &DMatrix<i64> {
        &self.counts[k]
    }

    /// Single count `m_{ij,k}`.
    pub fn count(&self, k: usize, i: usize, j: usize) -> i64 {
        self.counts[k][(i, j)]
    }

    /// Recorded row total `N_{i,k}`.
    pub fn row_total(&self, k: usize, i: usize) -> i64 {
        self.row_totals[k][i]
    }

    /// Counts of row `i` in period `k` as a vector.
    pub fn row(&self, k: usize, i: usize) -> Vec<i64> {
        self.counts[k].row(i).iter().copied().collect()
    }

    /// Collapse to a stay-or-default series: migrations within performing
    /// ratings are folded onto the diagonal, default counts are kept.
    pub fn collapse_to_default(&self) -> MigrationSeries {
        let r = self.n_ratings();
        let counts = self
            .counts
            .iter()
            .map(|m| {
                let mut c = DMatrix::<i64>::zeros(r - 1, r);
                for i in 0..r - 1 {
                    let defaults = m[(i, r - 1)];
                    let total: i64 = m.row(i).iter().sum();
                    c[(i, i)] = total - defaults;
                    c[(i, r - 1)] = defaults;
                }
                c
            })
            .collect();
        MigrationSeries::from_counts(counts).expect("collapsed shape is valid")
    }

    /// Average observed default rate of row `i`: the mean over periods of
    /// `m_{iR,k} / N_{i,k}`, skipping periods with no exposure.
    pub fn average_default_rate(&self, i: usize) -> f64 {
        let r = self.n_ratings();
        let mut sum = 0.0;
        let mut used = 0usize;
        for k in 0..self.n_periods() {
            let n = self.row_total(k, i);
            if n > 0 {
                sum += self.count(k, i, r - 1) as f64 / n as f64;
                used += 1;
            }
        }
        sum / used.max(1) as f64
    }

    /// Average observed cumulative migration probability of row `i` to
    /// destination `j` or worse, conditional on not defaulting: the mean over
    /// periods of `sum_{j' >= j, j' < R} m_{ij',k} / (N_{i,k} - m_{iR,k})`.
    pub fn average_cumulative_migration(&self, i: usize, j: usize) -> f64 {
        let r = self.n_ratings();
        let mut sum = 0.0;
        let mut used = 0usize;
        for k in 0..self.n_periods() {
            let survivors = self.row_total(k, i) - self.count(k, i, r - 1);
            if survivors > 0 {
                let tail: i64 = (j..r - 1).map(|jj| self.count(k, i, jj)).sum();
                sum += tail as f64 / survivors as f64;
                used += 1;
            }
        }
        sum / used.max(1) as f64
    }
}

/// Outcome of a structural data check; empty means valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    /// Human-readable violations, one per finding, in scan order.
    pub violations: Vec<String>,
}

impl ValidationReport {
    /// True when no violations were recorded.
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Structural checks of a series against its scheme: shape agreement,
/// non-negative counts and row totals matching the count sums.
pub fn validate_series(scheme: &RatingScheme, series: &MigrationSeries) -> ValidationReport {
    let mut report = ValidationReport::default();
    if series.n_ratings() != scheme.n_ratings() {
        report.violations.push(format!(
            "series has {} ratings, scheme has {}",
            series.n_ratings(),
            scheme.n_ratings()
        ));
        return report;
    }
    for k in 0..series.n_periods() {
        for i in 0..series.n_performing() {
            let mut sum = 0i64;
            for j in 0..series.n_ratings() {
                let m = series.count(k, i, j);
                if m < 0 {
                    report.violations.push(format!(
                        "negative count {m} at period {}, {} -> {}",
                        k + 1,
                        scheme.label(i),
                        scheme.label(j)
                    ));
                }
                sum += m;
            }
            let n = series.row_total(k, i);
            if sum != n {
                report.violations.push(format!(
                    "row total mismatch at period {}, row {}: counts sum to {sum}, recorded N = {n}",
                    k + 1,
                    scheme.label(i)
                ));
            }
        }
    }
    report
}

/// Level parameters `d` in the layout of the model family that owns them.
#[derive(Debug, Clone, PartialEq)]
pub enum Levels {
    /// Default-only probit: one default threshold per performing row.
    PerRowDefault(Vec<f64>),
    /// Two-factor probit: a default threshold per row plus the strictly
    /// decreasing cumulative migration thresholds for destinations
    /// `2..=R-1` (so `R - 2` values per row).
    Thresholds {
        default: Vec<f64>,
        cumulative: Vec<Vec<f64>>,
    },
    /// Logistic: one free level per `(row, destination)` cell.
    PerCell(DMatrix<f64>),
}

impl Levels {
    /// Number of performing rows the levels describe.
    pub fn n_rows(&self) -> usize {
        match self {
            Levels::PerRowDefault(d) => d.len(),
            Levels::Thresholds { default, .. } => default.len(),
            Levels::PerCell(d) => d.nrows(),
        }
    }
}

/// Factor loadings (`K` for latent factors, `L` for observed ones).
#[derive(Debug, Clone, PartialEq)]
pub enum Loading {
    /// One scalar shared by every signal (single-factor families).
    Scalar(f64),
    /// One loading per factor, applied to the matching signal component.
    Diagonal(DVector<f64>),
    /// One loading row per `(row, destination)` cell, row-major, with one
    /// column per factor (logistic family).
    PerCell(DMatrix<f64>),
}

impl Loading {
    /// A zero loading onto `dim` factors (used when no observed factors
    /// enter the model).
    pub fn zero(dim: usize) -> Self {
        if dim <= 1 {
            Loading::Scalar(0.0)
        } else {
            Loading::Diagonal(DVector::zeros(dim))
        }
    }

    /// Number of factors the loading contracts against.
    pub fn factor_dim(&self) -> usize {
        match self {
            Loading::Scalar(_) => 1,
            Loading::Diagonal(v) => v.len(),
            Loading::PerCell(m) => m.ncols(),
        }
    }
}

/// Full parameter set of a transition model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    /// Level parameters `d` in family layout.
    pub levels: Levels,
    /// Latent factor loadings `K`.
    pub factor_loading: Loading,
    /// Observed factor loadings `L`.
    pub observed_loading: Loading,
    /// Autoregressive matrix `A` (`s x s`).
    pub ar: DMatrix<f64>,
    /// Innovation covariance `Q` (`s x s`).
    pub innovation_cov: DMatrix<f64>,
    /// Innovation correlation, when `Q` was built under the unit-variance
    /// convention (two-factor family).
    pub rho: Option<f64>,
    /// Initial state mean `a0`.
    pub init_mean: DVector<f64>,
    /// Initial state covariance `P0`.
    pub init_cov: DMatrix<f64>,
}

impl ModelParameters {
    /// Build parameters under the unit-variance convention: `A = diag(ar)`,
    /// `Q = D Corr(rho) D`, `x_0 ~ N(0, I)`.
    pub fn unit_variance(
        levels: Levels,
        factor_loading: Loading,
        observed_loading: Loading,
        ar_diag: &[f64],
        rho: f64,
    ) -> Result<Self> {
        let s = ar_diag.len();
        let ar = DMatrix::from_diagonal(&DVector::from_column_slice(ar_diag));
        let innovation_cov = stationary_innovation_cov(&ar, rho)?;
        Ok(Self {
            levels,
            factor_loading,
            observed_loading,
            ar,
            innovation_cov,
            rho: if s >= 2 { Some(rho) } else { None },
            init_mean: DVector::zeros(s),
            init_cov: DMatrix::identity(s, s),
        })
    }

    /// Latent factor dimension `s`.
    pub fn factor_dim(&self) -> usize {
        self.ar.nrows()
    }

    /// Structural validation: square shapes, stable `A`, symmetric PSD
    /// `Q` and `P0`, threshold monotonicity, loading dimensions.
    pub fn validate(&self) -> Result<()> {
        let s = self.ar.nrows();
        if self.ar.ncols() != s {
            return Err(CalibError::Dimension("A must be square".into()));
        }
        if self.innovation_cov.shape() != (s, s) {
            return Err(CalibError::Dimension("Q must be s x s".into()));
        }
        if self.init_mean.len() != s || self.init_cov.shape() != (s, s) {
            return Err(CalibError::Dimension("initial law must have dimension s".into()));
        }
        if self.factor_loading.factor_dim() != s {
            return Err(CalibError::Dimension(format!(
                "factor loading contracts {} factors, state has {s}",
                self.factor_loading.factor_dim()
            )));
        }
        let rho_sp = spectral_radius(&self.ar);
        if !(rho_sp < 1.0) {
            return Err(CalibError::NonStationary { rho: rho_sp });
        }
        check_psd(&self.innovation_cov, "Q")?;
        check_psd(&self.init_cov, "P0")?;
        if let Levels::Thresholds { cumulative, .. } = &self.levels {
            for (i, row) in cumulative.iter().enumerate() {
                for w in row.windows(2) {
                    if !(w[0] > w[1]) {
                        return Err(CalibError::Invalid(format!(
                            "cumulative thresholds of row {} must be strictly decreasing",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * (1.0 + m[(i, j)].abs()) {
                return Err(CalibError::NotPositiveDefinite(format!(
                    "{name} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let eig = m.clone().symmetric_eigenvalues();
    let scale = eig.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    if eig.iter().any(|&l| l < -1e-10 * scale) {
        return Err(CalibError::NotPositiveDefinite(format!(
            "{name} has a negative eigenvalue"
        )));
    }
    Ok(())
}

/// Innovation covariance `Q = D Corr(rho) D`, `D = diag(sqrt(1 - A_mm^2))`,
/// that gives every latent factor stationary variance one.
///
/// `A` must be diagonal and stable; `rho` is the equal off-diagonal
/// innovation correlation (ignored when `s = 1`).
pub fn stationary_innovation_cov(ar: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    let s = ar.nrows();
    if ar.ncols() != s {
        return Err(CalibError::Dimension("A must be square".into()));
    }
    for i in 0..s {
        for j in 0..s {
            if i != j && ar[(i, j)] != 0.0 {
                return Err(CalibError::Invalid(
                    "unit-variance convention requires a diagonal A".into(),
                ));
            }
        }
    }
    let mut d = DVector::zeros(s);
    for m in 0..s {
        let a = ar[(m, m)];
        if !(a.abs() < 1.0) {
            return Err(CalibError::NonStationary { rho: a.abs() });
        }
        d[m] = (1.0 - a * a).sqrt();
    }
    if s >= 2 && !(rho.abs() < 1.0) {
        return Err(CalibError::Invalid(format!(
            "innovation correlation must satisfy |rho| < 1, got {rho}"
        )));
    }
    let mut q = DMatrix::zeros(s, s);
    for i in 0..s {
        q[(i, i)] = d[i] * d[i];
        for j in (i + 1)..s {
            let v = rho * d[i] * d[j];
            q[(i, j)] = v;
            q[(j, i)] = v;
        }
    }
    check_psd(&q, "Q")?;
    Ok(q)
}

/// A realized latent factor path with the innovations that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    /// States `x_k`, `k = 1..=n` (index 0 is period 1).
    pub states: Vec<DVector<f64>>,
    /// Innovations `eta_k` with `x_k = A x_{k-1} + eta_k`.
    pub innovations: Vec<DVector<f64>>,
    /// Initial state `x_0` drawn from the initial law.
    pub initial: DVector<f64>,
}

/// Signal paths `theta_k`; one matrix per period in the family layout
/// (rows x columns as fixed by the model family).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPath {
    /// Per-period signal matrices.
    pub theta: Vec<DMatrix<f64>>,
}

impl SignalPath {
    /// Number of periods.
    pub fn n_periods(&self) -> usize {
        self.theta.len()
    }

    /// Row-major flattening of period `k`, the order used by the stacked
    /// gradient, Hessian and auxiliary observation vectors.
    pub fn flat(&self, k: usize) -> DVector<f64> {
        let m = &self.theta[k];
        let mut v = DVector::zeros(m.nrows() * m.ncols());
        let mut idx = 0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                v[idx] = m[(i, j)];
                idx += 1;
            }
        }
        v
    }

    /// Inverse of [`SignalPath::flat`] for one period.
    pub fn set_flat(&mut self, k: usize, v: &DVector<f64>) {
        let m = &mut self.theta[k];
        let mut idx = 0;
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] = v[idx];
                idx += 1;
            }
        }
    }

    /// Sup-norm distance to another path of identical shape.
    pub fn max_abs_diff(&self, other: &SignalPath) -> f64 {
        let mut worst = 0.0f64;
        for (a, b) in self.theta.iter().zip(&other.theta) {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        worst
    }
}

/// Exogenous observed factor paths `u_k` (possibly empty).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedFactors {
    /// Per-period factor vectors, all the same length `l`.
    pub values: Vec<DVector<f64>>,
}

impl ObservedFactors {
    /// No observed factors: `l`-dimensional zero vectors for `n` periods.
    pub fn none(n_periods: usize, dim: usize) -> Self {
        Self {
            values: vec![DVector::zeros(dim); n_periods],
        }
    }

    /// Factor dimension `l`.
    pub fn dim(&self) -> usize {
        self.values.first().map_or(0, |v| v.len())
    }
}

// ---------------------------------------------------------------------------
// Delimited file formats
// ---------------------------------------------------------------------------

const MIGRATION_HEADER: &str = "period,from,to,count";
const FACTOR_HEADER: &str = "period,factor_index,value";

/// Write a migration series as `period,from,to,count` records, one per
/// `(k, i, j)` cell, periods 1-based and ratings by label.
pub fn write_migration_series(
    path: &Path,
    scheme: &RatingScheme,
    series: &MigrationSeries,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(MIGRATION_HEADER);
    out.push('\n');
    for k in 0..series.n_periods() {
        for i in 0..series.n_performing() {
            for j in 0..series.n_ratings() {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    k + 1,
                    scheme.label(i),
                    scheme.label(j),
                    series.count(k, i, j)
                );
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a migration series written by [`write_migration_series`].
///
/// Cells absent from the file are zero; duplicate cells, unknown labels,
/// default used as a source rating and malformed records are errors carrying
/// the offending line number.
pub fn read_migration_series(path: &Path, scheme: &RatingScheme) -> Result<MigrationSeries> {
    let text = fs::read_to_string(path)?;
    let r = scheme.n_ratings();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MIGRATION_HEADER => {}
        Some((_, h)) => {
            return Err(CalibError::Parse {
                line: 1,
                detail: format!("expected header '{MIGRATION_HEADER}', got '{}'", h.trim()),
            })
        }
        None => {
            return Err(CalibError::Parse {
                line: 1,
                detail: "empty migration file".into(),
            })
        }
    }
    let mut cells: Vec<(usize, usize, usize, i64)> = Vec::new();
    let mut n_periods = 0usize;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(CalibError::Parse {
                line: line_no,
                detail: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let period: usize = fields[0].trim().parse().map_err(|_| CalibError::Parse {
            line: line_no,
            detail: format!("invalid period '{}'", fields[0]),
        })?;
        if period == 0 {
            return Err(CalibError::Parse {
                line: line_no,
                detail: "periods are 1-based".into(),
            });
        }
        let from = scheme
            .index_of(fields[1].trim())
            .ok_or_else(|| CalibError::Parse {
                line: line_no,
                detail: format!("unknown rating label '{}'", fields[1].trim()),
            })?;
        let to = scheme
            .index_of(fields[2].trim())
            .ok_or_else(|| CalibError::Parse {
                line: line_no,
                detail: format!("unknown rating label '{}'", fields[2].trim()),
            })?;
        if from == r - 1 {
            return Err(CalibError::Parse {
                line: line_no,
                detail: format!(
                    "default rating '{}' cannot be a source",
                    scheme.label(r - 1)
                ),
            });
        }
        let count: i64 = fields[3].trim().parse().map_err(|_| CalibError::Parse {
            line: line_no,
            detail: format!("invalid count '{}'", fields[3]),
        })?;
        if cells
            .iter()
            .any(|&(k, i, j, _)| k == period - 1 && i == from && j == to)
        {
            return Err(CalibError::Parse {
                line: line_no,
                detail: format!("duplicate cell (period {period}, {} -> {})", fields[1], fields[2]),
            });
        }
        n_periods = n_periods.max(period);
        cells.push((period - 1, from, to, count));
    }
    if n_periods == 0 {
        return Err(CalibError::Parse {
            line: 1,
            detail: "migration file contains no records".into(),
        });
    }
    let mut counts = vec![DMatrix::<i64>::zeros(r - 1, r); n_periods];
    for (k, i, j, c) in cells {
        counts[k][(i, j)] = c;
    }
    MigrationSeries::from_counts(counts)
}

/// Write per-period factor vectors as `period,factor_index,value` records,
/// both indices 1-based.
pub fn write_factor_series(path: &Path, values: &[DVector<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(FACTOR_HEADER);
    out.push('\n');
    for (k, v) in values.iter().enumerate() {
        for m in 0..v.len() {
            let _ = writeln!(out, "{},{},{:.17e}", k + 1, m + 1, v[m]);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read observed factors written by [`write_factor_series`]; dimensions are
/// inferred from the largest indices present, absent entries are zero.
pub fn read_observed_factors(path: &Path) -> Result<ObservedFactors> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FACTOR_HEADER => {}
        Some((_, h)) => {
            return Err(CalibError::Parse {
                line: 1,
                detail: format!("expected header '{FACTOR_HEADER}', got '{}'", h.trim()),
            })
        }
        None => {
            return Err(CalibError::Parse {
                line: 1,
                detail: "empty factor file".into(),
            })
        }
    }
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let (mut n, mut dim) = (0usize, 0usize);
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(CalibError::Parse {
                line: line_no,
                detail: format!("expected 3 comma-separated fields, got {}", fields.len()),
            });
        }
        let period: usize = fields[0].trim().parse().map_err(|_| CalibError::Parse {
            line: line_no,
            detail: format!("invalid period '{}'", fields[0]),
        })?;
        let factor: usize = fields[1].trim().parse().map_err(|_| CalibError::Parse {
            line: line_no,
            detail: format!("invalid factor index '{}'", fields[1]),
        })?;
        let value: f64 = fields[2].trim().parse().map_err(|_| CalibError::Parse {
            line: line_no,
            detail: format!("invalid value '{}'", fields[2]),
        })?;
        if period == 0 || factor == 0 {
            return Err(CalibError::Parse {
                line: line_no,
                detail: "period and factor_index are 1-based".into(),
            });
        }
        if entries
            .iter()
            .any(|&(k, m, _)| k == period - 1 && m == factor - 1)
        {
            return Err(CalibError::Parse {
                line: line_no,
                detail: format!("duplicate entry (period {period}, factor {factor})"),
            });
        }
        n = n.max(period);
        dim = dim.max(factor);
        entries.push((period - 1, factor - 1, value));
    }
    let mut values = vec![DVector::zeros(dim); n];
    for (k, m, v) in entries {
        values[k][m] = v;
    }
    Ok(ObservedFactors { values })
}
