//! The four subcommand pipelines and their report files.
//!
//! Every run ends by writing `manifest.toml` next to its outputs: the
//! command name, tool version, seed, worker count, and a full echo of the
//! effective configuration.  Re-running the same subcommand with that
//! manifest as `--config` and the recorded seed reproduces the outputs
//! byte for byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use transition_calib_core::calibrate::{
    likelihood_profile, scenario_study, stepwise_calibrate, write_study, LikelihoodProfile,
    ProfileMethod, StudyConfig, StudyMethod,
};
use transition_calib_core::domain::{
    read_migration_series, write_factor_series, write_migration_series, MigrationSeries,
    ObservedFactors,
};
use transition_calib_core::gpr::{pf_gpr_mle, write_surface};
use transition_calib_core::laplace::{
    estimate_mode_for_series, free_parameters, mle_laplace, ModeOptions,
};
use transition_calib_core::particle::pf_importance_for_series;
use transition_calib_core::simulate::simulate_migrations;

use crate::config::{Config, MethodName};
use crate::{Failure, ProfilePoints, ProfileWay};

/// Everything a runner needs besides its own flags.
pub struct RunContext<'a> {
    pub config: &'a Config,
    pub seed: u64,
    pub workers: Option<usize>,
    pub out_dir: &'a Path,
}

impl RunContext<'_> {
    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn out_path(&self, name: &str) -> std::path::PathBuf {
        self.out_dir.join(name)
    }

    /// Write `manifest.toml` for a finished `command`.
    fn write_manifest(&self, command: &str) -> Result<(), Failure> {
        #[derive(Serialize)]
        struct Stamp<'a> {
            command: &'a str,
            version: &'a str,
            seed: u64,
            #[serde(skip_serializing_if = "Option::is_none")]
            workers: Option<usize>,
        }
        #[derive(Serialize)]
        struct RunTable<'a> {
            run: Stamp<'a>,
        }
        let run = toml::to_string(&RunTable {
            run: Stamp {
                command,
                version: env!("CARGO_PKG_VERSION"),
                seed: self.seed,
                workers: self.workers,
            },
        })
        .map_err(|e| Failure::Run(format!("manifest: {e}")))?;
        let echo = toml::to_string(self.config)
            .map_err(|e| Failure::Run(format!("manifest: {e}")))?;
        fs::write(self.out_path("manifest.toml"), format!("{run}\n{echo}"))
            .map_err(|e| Failure::Run(format!("manifest.toml: {e}")))?;
        Ok(())
    }
}

fn run_err(e: transition_calib_core::CalibError) -> Failure {
    Failure::Run(e.to_string())
}

fn write_err(name: &str, e: impl std::fmt::Display) -> Failure {
    Failure::Run(format!("{name}: {e}"))
}

/// Read the panel named by `--data` under the configured rating scheme.
fn load_series(config: &Config, data: &Path) -> Result<MigrationSeries, Failure> {
    read_migration_series(data, &config.scheme())
        .map_err(|e| Failure::Config(format!("data file {}: {e}", data.display())))
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::Config(format!("output directory {}: {e}", dir.display())))
}

/// `simulate`: draw one migration panel from the configured truth.
pub fn run_simulate(ctx: &RunContext) -> Result<(), Failure> {
    create_out_dir(ctx.out_dir)?;
    let config = ctx.config;
    let psi = config.truth_parameters()?;
    let family = config.family();
    let n_periods = config.truth.n_periods;
    let mut rng = ctx.rng();
    let panel = simulate_migrations(
        family,
        &psi,
        &ObservedFactors::none(n_periods, 0),
        &config.populations.sizes,
        n_periods,
        config.truth.renormalize,
        &mut rng,
    )
    .map_err(run_err)?;
    let migrations = ctx.out_path("migrations.csv");
    write_migration_series(&migrations, &config.scheme(), &panel.series)
        .map_err(|e| write_err("migrations.csv", e))?;
    write_factor_series(&ctx.out_path("latent.csv"), &panel.latent.states)
        .map_err(|e| write_err("latent.csv", e))?;
    ctx.write_manifest("simulate")?;
    println!(
        "simulated {} periods over {} ratings -> {}",
        panel.series.n_periods(),
        panel.series.n_ratings(),
        migrations.display(),
    );
    Ok(())
}

/// Append `# key=value` comment lines and close an estimates table.
fn write_estimates(
    path: &Path,
    names: &[&str],
    estimates: &[f64],
    notes: &[(&str, String)],
) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| write_err("estimates.csv", e))?;
    let mut out = BufWriter::new(file);
    let io = |e| write_err("estimates.csv", e);
    writeln!(out, "parameter,estimate").map_err(io)?;
    for (name, value) in names.iter().zip(estimates) {
        writeln!(out, "{name},{value}").map_err(io)?;
    }
    for (key, value) in notes {
        writeln!(out, "# {key}={value}").map_err(io)?;
    }
    Ok(())
}

fn print_estimates(names: &[&str], estimates: &[f64]) {
    for (name, value) in names.iter().zip(estimates) {
        println!("{name} = {value:.6}");
    }
}

/// `calibrate`: fit one panel with the chosen method.
pub fn run_calibrate(
    ctx: &RunContext,
    data: &Path,
    method: MethodName,
    particles: Option<usize>,
) -> Result<(), Failure> {
    create_out_dir(ctx.out_dir)?;
    let config = ctx.config;
    let series = load_series(config, data)?;
    let family = config.family();
    let u = ObservedFactors::none(series.n_periods(), 0);
    let opts = config.mle_options();
    match method {
        MethodName::Laplace => {
            let fit = mle_laplace(family, &series, &u, &opts).map_err(run_err)?;
            write_estimates(
                &ctx.out_path("estimates.csv"),
                &fit.parameter_names,
                &fit.estimates,
                &[
                    ("loglik", format!("{}", fit.loglik)),
                    ("evaluations", format!("{}", fit.evaluations)),
                    ("converged", format!("{}", fit.converged)),
                ],
            )?;
            write_factor_series(&ctx.out_path("latent.csv"), &fit.latent_means)
                .map_err(|e| write_err("latent.csv", e))?;
            print_estimates(&fit.parameter_names, &fit.estimates);
            println!("loglik = {:.6}", fit.loglik);
        }
        MethodName::Stepwise => {
            let fit = stepwise_calibrate(&series, &u, &opts).map_err(run_err)?;
            write_estimates(
                &ctx.out_path("estimates.csv"),
                &fit.parameter_names,
                &fit.estimates,
                &[
                    ("default_loglik", format!("{}", fit.default_fit.loglik)),
                    ("performing_loglik", format!("{}", fit.performing_loglik)),
                    ("converged", format!("{}", fit.converged)),
                ],
            )?;
            write_factor_series(&ctx.out_path("latent_default.csv"), &fit.latent_default)
                .map_err(|e| write_err("latent_default.csv", e))?;
            write_factor_series(
                &ctx.out_path("latent_performing.csv"),
                &fit.latent_performing,
            )
            .map_err(|e| write_err("latent_performing.csv", e))?;
            print_estimates(&fit.parameter_names, &fit.estimates);
        }
        MethodName::PfGpr => {
            let grid = config.grid()?;
            let n_particles = particles.unwrap_or(config.pf.particles);
            let mut rng = ctx.rng();
            let fit =
                pf_gpr_mle(family, &series, &u, &grid, n_particles, &mut rng).map_err(run_err)?;
            write_estimates(
                &ctx.out_path("estimates.csv"),
                &fit.parameter_names,
                &fit.estimates,
                &[
                    ("fitted_loglik", format!("{}", fit.fitted_max)),
                    ("surface_failed", format!("{}", fit.surface.failed.len())),
                    ("particles", format!("{n_particles}")),
                ],
            )?;
            let surface_file = fs::File::create(ctx.out_path("surface.csv"))
                .map_err(|e| write_err("surface.csv", e))?;
            let mut surface_out = BufWriter::new(surface_file);
            write_surface(&fit.surface, &mut surface_out)
                .map_err(|e| write_err("surface.csv", e))?;
            drop(surface_out);
            // One filter pass at the estimate for the ESS diagnostic trace.
            let pf = pf_importance_for_series(
                family,
                &series,
                &fit.psi,
                &u,
                n_particles,
                &ModeOptions::default(),
                &mut rng,
            )
            .map_err(run_err)?;
            let ess_file =
                fs::File::create(ctx.out_path("ess.csv")).map_err(|e| write_err("ess.csv", e))?;
            let mut ess_out = BufWriter::new(ess_file);
            let io = |e| write_err("ess.csv", e);
            writeln!(ess_out, "# particles={n_particles}").map_err(io)?;
            writeln!(ess_out, "period,ess,loglik").map_err(io)?;
            for (k, (ess, ll)) in pf.ess.iter().zip(&pf.per_period).enumerate() {
                writeln!(ess_out, "{},{ess},{ll}", k + 1).map_err(io)?;
            }
            drop(ess_out);
            let mode = estimate_mode_for_series(family, &series, &fit.psi, &u, &ModeOptions::default())
                .map_err(run_err)?;
            write_factor_series(&ctx.out_path("latent.csv"), &mode.latent_means)
                .map_err(|e| write_err("latent.csv", e))?;
            print_estimates(&fit.parameter_names, &fit.estimates);
            println!("fitted loglik = {:.6}", fit.fitted_max);
        }
    }
    ctx.write_manifest("calibrate")?;
    Ok(())
}

fn write_profile(
    path: &Path,
    profile: &LikelihoodProfile,
    way: ProfileWay,
    n_particles: usize,
    seed: u64,
) -> Result<(), Failure> {
    let file = fs::File::create(path).map_err(|e| write_err("profile.csv", e))?;
    let mut out = BufWriter::new(file);
    let io = |e| write_err("profile.csv", e);
    writeln!(out, "# axis={}", profile.axis).map_err(io)?;
    let method = match way {
        ProfileWay::Laplace => "laplace",
        ProfileWay::PfIs => "pf-is",
        ProfileWay::PfBootstrap => "pf-bootstrap",
    };
    writeln!(out, "# method={method}").map_err(io)?;
    if way != ProfileWay::Laplace {
        writeln!(out, "# particles={n_particles}").map_err(io)?;
    }
    writeln!(out, "# seed={seed}").map_err(io)?;
    writeln!(out, "# failed={}", profile.n_failed).map_err(io)?;
    writeln!(out, "value,loglik").map_err(io)?;
    for point in &profile.points {
        if let Some(ll) = point.loglik {
            writeln!(out, "{},{ll}", point.value).map_err(io)?;
        }
    }
    Ok(())
}

/// `profile`: trace the log-likelihood along one free parameter, holding
/// the others at the configured truth.
pub fn run_profile(
    ctx: &RunContext,
    data: &Path,
    axis: &str,
    points: &ProfilePoints,
    way: ProfileWay,
    particles: Option<usize>,
) -> Result<(), Failure> {
    create_out_dir(ctx.out_dir)?;
    let config = ctx.config;
    let series = load_series(config, data)?;
    let family = config.family();
    let opts = config.mle_options();
    let (axis_names, _) = free_parameters(family, &opts).map_err(run_err)?;
    if !axis_names.contains(&axis) {
        return Err(Failure::Config(format!(
            "axis {axis:?} is not a free parameter; choose one of {}",
            axis_names.join(", "),
        )));
    }
    let psi_base = config.truth_parameters()?;
    let values = points.values()?;
    let n_particles = particles.unwrap_or(config.pf.particles);
    let method = match way {
        ProfileWay::Laplace => ProfileMethod::Laplace,
        ProfileWay::PfIs => ProfileMethod::PfImportance { n_particles },
        ProfileWay::PfBootstrap => ProfileMethod::PfBootstrap { n_particles },
    };
    let mut rng = ctx.rng();
    let profile = likelihood_profile(family, &series, &psi_base, axis, &values, method, &mut rng)
        .map_err(run_err)?;
    let path = ctx.out_path("profile.csv");
    write_profile(&path, &profile, way, n_particles, ctx.seed)?;
    ctx.write_manifest("profile")?;
    println!(
        "profiled {} at {} points ({} failed) -> {}",
        profile.axis,
        profile.points.len(),
        profile.n_failed,
        path.display(),
    );
    Ok(())
}

/// `study`: repeat simulate-and-calibrate and summarize the estimates.
pub fn run_study(ctx: &RunContext) -> Result<(), Failure> {
    create_out_dir(ctx.out_dir)?;
    let config = ctx.config;
    let section = config.study.as_ref().ok_or_else(|| {
        Failure::Config("the study subcommand needs a [study] section".into())
    })?;
    if section.n_scenarios == 1 {
        eprintln!("warning: a single scenario has no dispersion; stds are reported as 0");
    }
    let method = match section.method {
        MethodName::Laplace => StudyMethod::Laplace(config.mle_options()),
        MethodName::Stepwise => StudyMethod::Stepwise(config.mle_options()),
        MethodName::PfGpr => StudyMethod::PfGpr {
            grid: config.grid()?,
            n_particles: config.pf.particles,
        },
    };
    let study = StudyConfig {
        family: config.family(),
        truth: config.truth_parameters()?,
        populations: config.populations.sizes.clone(),
        n_periods: config.truth.n_periods,
        n_scenarios: section.n_scenarios,
        renormalize: config.truth.renormalize,
        method,
        master_seed: ctx.seed,
    };
    let result = scenario_study(&study).map_err(run_err)?;
    let path = ctx.out_path("study.csv");
    let file = fs::File::create(&path).map_err(|e| write_err("study.csv", e))?;
    let mut out = BufWriter::new(file);
    write_study(&result, &mut out).map_err(|e| write_err("study.csv", e))?;
    drop(out);
    ctx.write_manifest("study")?;
    let failed = result.estimates.iter().filter(|e| e.is_none()).count();
    println!(
        "study over {} scenarios ({failed} failed) -> {}",
        section.n_scenarios,
        path.display(),
    );
    for ((name, mean), std) in result
        .parameter_names
        .iter()
        .zip(&result.means)
        .zip(&result.stds)
    {
        println!("{name}: mean = {mean:.4}, std = {std:.4}");
    }
    Ok(())
}
