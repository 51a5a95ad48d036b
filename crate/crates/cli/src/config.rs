//! Run configuration: the TOML schema and its conversion to core types.
//!
//! A configuration names the model family, the generating ("truth")
//! parameters, the cohort sizes, and optional tuning sections for the
//! calibration search, the particle filter, the surface grid, and studies.
//! Unknown keys *inside* a section are rejected so typos surface early;
//! unknown *sections* are ignored so a written `manifest.toml` can be fed
//! straight back as `--config`.

use serde::{Deserialize, Serialize};

use transition_calib_core::domain::{ModelParameters, RatingScheme};
use transition_calib_core::gpr::CartesianGrid;
use transition_calib_core::laplace::{parameters_from_free, MleOptions};
use transition_calib_core::models::ModelFamily;

use crate::Failure;

/// Model family selector, shared by the config file and `--method`-style
/// flags so both spell the same names.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    /// One latent factor driving per-row default probabilities.
    DefaultOnly,
    /// Separate default and performing factors with correlated innovations.
    TwoFactor,
}

/// Calibration method selector for `calibrate` and `[study]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    /// Joint maximum likelihood under the Laplace approximation.
    Laplace,
    /// Particle-filter likelihood surface smoothed by a GPR.
    PfGpr,
    /// Two-step default/performing split for two-factor panels.
    Stepwise,
}

/// `[model]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
}

/// `[truth]` section: generating parameters for `simulate` and `study`,
/// and the pinned base point for `profile`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSection {
    /// Autoregression coefficients, one per latent factor.
    pub a: Vec<f64>,
    /// Factor loadings, one per latent factor.
    pub k: Vec<f64>,
    /// Innovation correlation (two-factor family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Average default probability per performing rating.
    pub pd: Vec<f64>,
    /// Average cumulative migration probabilities per performing rating,
    /// conditional on survival: row `i` lists the mass moving to rating
    /// `j+1` or worse for `j = 1..R-2` (two-factor family only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cumulative: Option<Vec<Vec<f64>>>,
    /// Panel length in periods.
    pub n_periods: usize,
    /// Rescale simulated innovations to their exact covariance.
    #[serde(default)]
    pub renormalize: bool,
}

/// `[populations]` section.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationsSection {
    /// Cohort size per performing rating, refreshed every period.
    pub sizes: Vec<i64>,
}

/// `[calibration]` section (optional; bounds for the likelihood search).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub ar_bounds: [f64; 2],
    pub loading_bounds: [f64; 2],
    pub rho_bounds: [f64; 2],
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let opts = MleOptions::default();
        Self {
            ar_bounds: [opts.ar_bounds.0, opts.ar_bounds.1],
            loading_bounds: [opts.loading_bounds.0, opts.loading_bounds.1],
            rho_bounds: [opts.rho_bounds.0, opts.rho_bounds.1],
        }
    }
}

/// `[pf]` section (optional; particle-filter controls).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PfSection {
    pub particles: usize,
}

impl Default for PfSection {
    fn default() -> Self {
        Self { particles: 1000 }
    }
}

/// `[gpr]` section (optional; surface grid for the pf-gpr method).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprSection {
    /// Lower grid corner, one entry per free parameter `(a, k)`.
    pub grid_min: Vec<f64>,
    /// Upper grid corner.
    pub grid_max: Vec<f64>,
    /// Points per axis.
    pub grid_points: Vec<usize>,
}

impl Default for GprSection {
    fn default() -> Self {
        Self {
            grid_min: vec![0.1, 0.1],
            grid_max: vec![0.9, 0.9],
            grid_points: vec![20, 20],
        }
    }
}

/// `[study]` section (required by the `study` subcommand only).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Number of simulate-and-calibrate scenarios.
    pub n_scenarios: usize,
    /// Calibration method applied to every scenario.
    pub method: MethodName,
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelSection,
    pub truth: TruthSection,
    pub populations: PopulationsSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub pf: PfSection,
    #[serde(default)]
    pub gpr: GprSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
}

impl Config {
    /// Read and validate a configuration file.
    pub fn load(path: &std::path::Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Failure::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: Config = toml::from_str(&text)
            .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Cross-field checks that the schema alone cannot express.
    fn validate(&self) -> Result<(), Failure> {
        let rows = self.truth.pd.len();
        if rows == 0 {
            return Err(Failure::Config(
                "[truth] pd needs at least one performing rating".into(),
            ));
        }
        let factors = match self.model.family {
            FamilyName::DefaultOnly => 1,
            FamilyName::TwoFactor => 2,
        };
        if self.truth.a.len() != factors || self.truth.k.len() != factors {
            return Err(Failure::Config(format!(
                "[truth] a and k need {factors} entr{} for the {} family",
                if factors == 1 { "y" } else { "ies" },
                match self.model.family {
                    FamilyName::DefaultOnly => "default-only",
                    FamilyName::TwoFactor => "two-factor",
                },
            )));
        }
        match self.model.family {
            FamilyName::DefaultOnly => {}
            FamilyName::TwoFactor => {
                if self.truth.rho.is_none() {
                    return Err(Failure::Config(
                        "[truth] rho is required for the two-factor family".into(),
                    ));
                }
                let cumulative = self.truth.cumulative.as_ref().ok_or_else(|| {
                    Failure::Config(
                        "[truth] cumulative is required for the two-factor family".into(),
                    )
                })?;
                if cumulative.len() != rows {
                    return Err(Failure::Config(format!(
                        "[truth] cumulative has {} rows for {rows} performing ratings",
                        cumulative.len(),
                    )));
                }
            }
        }
        if self.populations.sizes.len() != rows {
            return Err(Failure::Config(format!(
                "[populations] sizes has {} entries for {rows} performing ratings",
                self.populations.sizes.len(),
            )));
        }
        if self.truth.n_periods == 0 {
            return Err(Failure::Config("[truth] n_periods must be positive".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> ModelFamily {
        match self.model.family {
            FamilyName::DefaultOnly => ModelFamily::DefaultOnlyProbit,
            FamilyName::TwoFactor => ModelFamily::TwoFactorProbit,
        }
    }

    /// Rating labels implied by the number of performing ratings.
    pub fn scheme(&self) -> RatingScheme {
        RatingScheme::numbered(self.truth.pd.len())
    }

    /// Free-parameter vector of the truth, in calibration order.
    fn free_truth(&self) -> Vec<f64> {
        match self.model.family {
            FamilyName::DefaultOnly => vec![self.truth.a[0], self.truth.k[0]],
            FamilyName::TwoFactor => vec![
                self.truth.a[0],
                self.truth.a[1],
                self.truth.k[0],
                self.truth.k[1],
                self.truth.rho.expect("validated"),
            ],
        }
    }

    /// Full generating parameters, with levels derived so the model's
    /// average probabilities match the configured targets.
    pub fn truth_parameters(&self) -> Result<ModelParameters, Failure> {
        let cumulative = self.truth.cumulative.clone().unwrap_or_default();
        parameters_from_free(self.family(), &self.free_truth(), &self.truth.pd, &cumulative)
            .map_err(|e| Failure::Config(format!("[truth] {e}")))
    }

    /// Search options with the configured bounds.
    pub fn mle_options(&self) -> MleOptions {
        let mut opts = MleOptions::default();
        opts.ar_bounds = (self.calibration.ar_bounds[0], self.calibration.ar_bounds[1]);
        opts.loading_bounds = (
            self.calibration.loading_bounds[0],
            self.calibration.loading_bounds[1],
        );
        opts.rho_bounds = (self.calibration.rho_bounds[0], self.calibration.rho_bounds[1]);
        opts
    }

    /// Surface grid for the pf-gpr method.
    pub fn grid(&self) -> Result<CartesianGrid, Failure> {
        let g = &self.gpr;
        if g.grid_min.len() != g.grid_max.len() || g.grid_min.len() != g.grid_points.len() {
            return Err(Failure::Config(
                "[gpr] grid_min, grid_max, and grid_points need matching lengths".into(),
            ));
        }
        let ranges: Vec<(f64, f64)> = g
            .grid_min
            .iter()
            .zip(&g.grid_max)
            .map(|(&lo, &hi)| (lo, hi))
            .collect();
        CartesianGrid::uniform(&ranges, &g.grid_points)
            .map_err(|e| Failure::Config(format!("[gpr] {e}")))
    }
}
