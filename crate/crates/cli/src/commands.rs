use std::fmt::Write as _;
use std::path::Path;

use cpmas::analytic::efficiency_curve;
use cpmas::coupling::{effective_field, scaled_coupling};
use cpmas::fit::{
    distance_from_coupling, fit_buildup, load_buildup, model_curve, BuildUpModel, FitSpec,
    ModelParams, Param, RelaxationForm,
};
use cpmas::oracle::{dq_constancy_report, propagate_effective, required_substeps, CpConditions};
use cpmas::units::{khz_to_rad_s, ms_to_s, rate_from_inverse_us};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Common, RunConfig};
use crate::error::CliError;
use crate::output::csv_columns;

/// Guesses for free parameters the user left unset.
pub const FIT_GUESS_R_INV_US: f64 = 200.0;
pub const FIT_GUESS_R1_INV_US: f64 = 200.0;
pub const FIT_GUESS_T1RHO_MS: f64 = 2.0;

/// Result of a command: CSV body, `key = value` report and exit status.
#[derive(Debug)]
pub struct Outcome {
    pub csv: String,
    pub report: String,
    pub status: u8,
    /// Extra line for the error stream when `status != 0`.
    pub message: Option<String>,
}

impl Outcome {
    fn ok(csv: String, report: String) -> Self {
        Self {
            csv,
            report,
            status: 0,
            message: None,
        }
    }
}

struct Report(String);

impl Report {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self(format!("command = {command}\n{}", cfg.echo()))
    }

    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.0, "{key} = {value}");
    }
}

fn conditions(cfg: &RunConfig) -> CpConditions {
    CpConditions {
        rf: cfg.rf,
        coupling: cfg.coupling,
        orient: cfg.orient,
        spin: cfg.spinning,
    }
}

fn analytic_eta(cfg: &RunConfig) -> Vec<f64> {
    let d = scaled_coupling(cfg.coupling, effective_field(cfg.rf));
    efficiency_curve(d, cfg.orient, cfg.spinning, cfg.grid).into_values()
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let eta = analytic_eta(cfg);
    let mut report = Report::new("simulate", cfg);
    let eff = effective_field(cfg.rf);
    report.kv("coupling_scale", eff.theta_i.sin() * eff.theta_s.sin());
    report.kv("eta_max", eta.iter().cloned().fold(0.0, f64::max));
    let csv = csv_columns(&["t_us", "eta"], &[&cfg.times_us(), &eta]);
    Ok(Outcome::ok(csv, report.0))
}

pub fn powder(cfg: &RunConfig, noise: Option<f64>) -> Result<Outcome, CliError> {
    let sigma = noise.unwrap_or(0.0);
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(CliError::Config(format!(
            "--noise must be finite and ≥ 0, got {sigma}"
        )));
    }
    let orientations = cfg.orient_set.build()?;
    let n_orient = orientations.len();
    let model = BuildUpModel {
        spinning: cfg.spinning,
        rf: cfg.rf,
        orientations,
    };
    let params = ModelParams {
        coupling: cfg.coupling,
        relax: cfg.relax,
    };
    let mut m = model_curve(&model, &params, &cfg.times_s());
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| CliError::Config(e.to_string()))?;
        for v in &mut m {
            *v += normal.sample(&mut rng);
        }
    }
    let times = cfg.times_us();
    let mut report = Report::new("powder", cfg);
    report.kv("orientations", n_orient);
    report.kv("noise", sigma);
    if let Some((k, peak)) = m
        .iter()
        .cloned()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
    {
        report.kv("peak_magnetization", peak);
        report.kv("peak_time_us", times[k]);
    }
    let csv = csv_columns(&["time_us", "magnetization"], &[&times, &m]);
    Ok(Outcome::ok(csv, report.0))
}

fn substeps(cfg: &RunConfig, cond: &CpConditions) -> usize {
    cfg.substeps
        .unwrap_or_else(|| required_substeps(cond, cfg.grid.dt()))
}

pub fn oracle(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let cond = conditions(cfg);
    let n_sub = substeps(cfg, &cond);
    let traj = propagate_effective(&cond, &cfg.grid, n_sub)?;
    let mut report = Report::new("oracle", cfg);
    report.kv("substeps", n_sub);
    report.kv("sy_max", traj.sy.iter().cloned().fold(f64::MIN, f64::max));
    report.kv("dq_y_max_deviation", dq_constancy_report(&traj));
    let csv = csv_columns(
        &["t_us", "sy", "iy", "dq_y"],
        &[&cfg.times_us(), &traj.sy, &traj.iy, &traj.dq_y],
    );
    Ok(Outcome::ok(csv, report.0))
}

pub fn compare(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let cond = conditions(cfg);
    let n_sub = substeps(cfg, &cond);
    let traj = propagate_effective(&cond, &cfg.grid, n_sub)?;
    let eta = analytic_eta(cfg);
    let devs: Vec<f64> = eta
        .iter()
        .zip(&traj.sy)
        .map(|(a, b)| (a - b).abs())
        .collect();
    let max_dev = devs.iter().cloned().fold(0.0, f64::max);
    let rms_dev = (devs.iter().map(|d| d * d).sum::<f64>() / devs.len() as f64).sqrt();
    let pass = max_dev <= cfg.threshold;

    let mut report = Report::new("compare", cfg);
    report.kv("substeps", n_sub);
    report.kv("threshold", cfg.threshold);
    report.kv("max_deviation", max_dev);
    report.kv("rms_deviation", rms_dev);
    report.kv("pass", pass);
    let csv = csv_columns(
        &["t_us", "eta_analytic", "sy_oracle"],
        &[&cfg.times_us(), &eta, &traj.sy],
    );
    Ok(Outcome {
        csv,
        report: report.0,
        status: if pass { 0 } else { 2 },
        message: (!pass).then(|| {
            format!(
                "max deviation {max_dev:e} exceeds threshold {:e}",
                cfg.threshold
            )
        }),
    })
}

/// Bounds in physical units for free parameters.
fn bounds(p: Param) -> (f64, f64) {
    match p {
        Param::D => (khz_to_rad_s(0.01), khz_to_rad_s(1000.0)),
        Param::R | Param::R1 => (1.0, 1e8),
        Param::T1rho => (1e-6, 1e3),
        Param::M0 => (1e-9, 1e9),
    }
}

pub fn fit(
    common: &Common,
    cfg: &RunConfig,
    data_path: Option<&Path>,
    free: &[Param],
    form: RelaxationForm,
) -> Result<Outcome, CliError> {
    let path = data_path.ok_or_else(|| CliError::Config("fit needs --data PATH".into()))?;
    let data =
        load_buildup(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;

    let mut relax = cfg.relax;
    if free.contains(&Param::R) && common.r_inv_us.is_none() {
        relax.r = rate_from_inverse_us(FIT_GUESS_R_INV_US);
    }
    if free.contains(&Param::R1) && common.r1_inv_us.is_none() {
        relax.r1 = rate_from_inverse_us(FIT_GUESS_R1_INV_US);
    }
    if free.contains(&Param::T1rho) && common.t1rho_ms.is_none() {
        relax.t1rho = ms_to_s(FIT_GUESS_T1RHO_MS);
    }
    let params = ModelParams {
        coupling: cfg.coupling,
        relax,
    };
    let mut spec = FitSpec::new(params, cfg.spinning, cfg.rf);
    for &p in free {
        let (lo, hi) = bounds(p);
        spec = spec.with_free(p, lo, hi);
    }
    spec.form = form;
    spec.orientations = cfg.orient_set;
    spec.validate()?;

    let result = fit_buildup(&data, &spec)?;
    let model = BuildUpModel {
        spinning: cfg.spinning,
        rf: cfg.rf,
        orientations: cfg.orient_set.build()?,
    };
    let fitted = model_curve(&model, &result.params, &data.times_s());
    let residual: Vec<f64> = data
        .magnetizations()
        .iter()
        .zip(&fitted)
        .map(|(y, m)| y - m)
        .collect();

    let mut report = Report::new("fit", cfg);
    report.kv("data", path.display());
    report.kv("data_points", data.len());
    report.kv("weighted", data.sigma().is_some());
    report.kv(
        "form",
        match form {
            RelaxationForm::Rates => "rates",
            RelaxationForm::Times => "times",
        },
    );
    for line in result.report().lines() {
        let _ = writeln!(report.0, "fit_{line}");
    }
    if let Some((_, pair)) = cfg.distance {
        if let Ok(r) = distance_from_coupling(result.params.coupling.d, pair) {
            report.kv("fit_distance_a", r);
        }
    }
    let csv = csv_columns(
        &["time_us", "data", "model", "residual"],
        &[data.times_us(), data.magnetizations(), &fitted, &residual],
    );
    let converged = result.converged;
    Ok(Outcome {
        csv,
        report: report.0,
        status: if converged {
            0
        } else {
            CliError::Fit(String::new()).exit_code()
        },
        message: (!converged)
            .then(|| format!("fit did not converge in {} iterations", result.iterations)),
    })
}
