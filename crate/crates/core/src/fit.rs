//! Build-up curve fitting.
//!
//! The model is the powder-averaged transfer efficiency fed through the
//! relaxation envelope; parameters are recovered with a bounded
//! Levenberg–Marquardt iteration on a forward-difference Jacobian.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::analytic::{efficiency_from_phase, magnetization_value, RelaxationParams};
use crate::coupling::{
    dipolar_phase, effective_field, scaled_coupling, CouplingParams, RfScheme, SpinningParams,
};
use crate::powder::{powder_average_values, OrientationSet, OrientationSetSpec};
use crate::{Error, Result};

pub const MAX_ITERATIONS: usize = 500;
pub const RELATIVE_COST_TOL: f64 = 1e-10;
pub const STEP_TOL: f64 = 1e-12;

// --- data ----------------------------------------------------------------

/// A measured build-up curve. Times are kept in µs, as read.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildUpData {
    times_us: Vec<f64>,
    magnetizations: Vec<f64>,
    sigma: Option<Vec<f64>>,
}

impl BuildUpData {
    pub fn new(
        times_us: Vec<f64>,
        magnetizations: Vec<f64>,
        sigma: Option<Vec<f64>>,
    ) -> Result<Self> {
        if times_us.len() != magnetizations.len()
            || sigma.as_ref().is_some_and(|s| s.len() != times_us.len())
        {
            return Err(Error::Data("column lengths differ".into()));
        }
        if times_us.len() < 2 {
            return Err(Error::Data(format!(
                "need at least 2 points, got {}",
                times_us.len()
            )));
        }
        for (k, w) in times_us.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Data(format!(
                    "times must be strictly increasing (point {})",
                    k + 2
                )));
            }
        }
        if times_us.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Data("times must be finite and ≥ 0".into()));
        }
        if magnetizations.iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("magnetizations must be finite".into()));
        }
        if let Some(s) = &sigma {
            if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::Data("sigma must be finite and > 0".into()));
            }
        }
        Ok(Self {
            times_us,
            magnetizations,
            sigma,
        })
    }

    pub fn len(&self) -> usize {
        self.times_us.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_us.is_empty()
    }

    pub fn times_us(&self) -> &[f64] {
        &self.times_us
    }

    pub fn times_s(&self) -> Vec<f64> {
        self.times_us.iter().map(|t| t * 1e-6).collect()
    }

    pub fn magnetizations(&self) -> &[f64] {
        &self.magnetizations
    }

    pub fn sigma(&self) -> Option<&[f64]> {
        self.sigma.as_deref()
    }
}

/// Parses `time_us,magnetization[,sigma]` CSV. Rows are sorted by time;
/// `#` lines are comments.
pub fn parse_buildup<R: Read>(reader: R) -> Result<BuildUpData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let header_err = |line, message: String| Error::Parse { line, message };
    let headers = rdr.headers().map_err(|e| csv_error(&e))?.clone();
    let header_line = rdr.position().line().saturating_sub(1).max(1);
    let names: Vec<&str> = headers.iter().collect();
    let with_sigma = match names.as_slice() {
        ["time_us", "magnetization"] => false,
        ["time_us", "magnetization", "sigma"] => true,
        _ => {
            return Err(header_err(
                header_line,
                format!(
                    "expected header `time_us,magnetization[,sigma]`, got `{}`",
                    names.join(",")
                ),
            ))
        }
    };
    let width = names.len();
    let mut rows: Vec<(u64, f64, f64, Option<f64>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::Parse {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let field = |i: usize, name: &str| -> Result<f64> {
            let raw = &record[i];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("{name}: `{raw}` is not a finite number"),
                })
        };
        let t = field(0, "time_us")?;
        let m = field(1, "magnetization")?;
        let s = if with_sigma {
            Some(field(2, "sigma")?)
        } else {
            None
        };
        if t < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("negative time {t}"),
            });
        }
        if let Some(s) = s {
            if s <= 0.0 {
                return Err(Error::Parse {
                    line,
                    message: format!("sigma must be > 0, got {s}"),
                });
            }
        }
        rows.push((line, t, m, s));
    }
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    for w in rows.windows(2) {
        if w[1].1 == w[0].1 {
            let line = w[0].0.max(w[1].0);
            return Err(Error::Parse {
                line,
                message: format!(
                    "duplicate time {} µs (also on line {})",
                    w[1].1,
                    w[0].0.min(w[1].0)
                ),
            });
        }
    }
    if rows.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 data points, found {}",
            rows.len()
        )));
    }
    let times = rows.iter().map(|r| r.1).collect();
    let mags = rows.iter().map(|r| r.2).collect();
    let sigma = with_sigma.then(|| rows.iter().map(|r| r.3.unwrap_or(1.0)).collect());
    BuildUpData::new(times, mags, sigma)
}

fn csv_error(e: &csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn load_buildup(path: impl AsRef<Path>) -> Result<BuildUpData> {
    let file = std::fs::File::open(path)?;
    parse_buildup(std::io::BufReader::new(file))
}

/// Writes the same format [`parse_buildup`] reads, with shortest round-trip floats.
pub fn write_buildup<W: Write>(data: &BuildUpData, mut w: W) -> Result<()> {
    match &data.sigma {
        None => {
            writeln!(w, "time_us,magnetization")?;
            for (t, m) in data.times_us.iter().zip(&data.magnetizations) {
                writeln!(w, "{t},{m}")?;
            }
        }
        Some(s) => {
            writeln!(w, "time_us,magnetization,sigma")?;
            for ((t, m), s) in data.times_us.iter().zip(&data.magnetizations).zip(s) {
                writeln!(w, "{t},{m},{s}")?;
            }
        }
    }
    Ok(())
}

// --- model ---------------------------------------------------------------

/// Coupling plus relaxation: everything [`model_curve`] needs besides the sample setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub coupling: CouplingParams,
    pub relax: RelaxationParams,
}

/// Sample setup shared by all model evaluations.
#[derive(Debug, Clone)]
pub struct BuildUpModel {
    pub spinning: SpinningParams,
    pub rf: RfScheme,
    pub orientations: OrientationSet,
}

impl BuildUpModel {
    /// Powder-averaged transfer efficiency at arbitrary times (s). Off
    /// resonance the coupling is scaled to its effective-field value.
    pub fn powder_efficiency(&self, coupling: CouplingParams, times: &[f64]) -> Vec<f64> {
        let coupling = scaled_coupling(coupling, effective_field(self.rf));
        let spin = self.spinning;
        powder_average_values(
            |o| {
                times
                    .iter()
                    .map(|&t| efficiency_from_phase(dipolar_phase(coupling, o, spin, t)))
                    .collect()
            },
            &self.orientations,
        )
        .expect("every orientation yields one sample per time")
    }
}

/// Predicted magnetization at `times` (s).
pub fn model_curve(model: &BuildUpModel, params: &ModelParams, times: &[f64]) -> Vec<f64> {
    let eta = model.powder_efficiency(params.coupling, times);
    apply_relaxation(&eta, times, &params.relax)
}

fn apply_relaxation(eta: &[f64], times: &[f64], relax: &RelaxationParams) -> Vec<f64> {
    eta.iter()
        .zip(times)
        .map(|(&e, &t)| magnetization_value(e, t, relax))
        .collect()
}

// --- fit specification ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Param {
    D,
    R,
    R1,
    T1rho,
    M0,
}

impl Param {
    pub const ALL: [Param; 5] = [Param::D, Param::R, Param::R1, Param::T1rho, Param::M0];

    pub fn name(self) -> &'static str {
        match self {
            Param::D => "d",
            Param::R => "r",
            Param::R1 => "r1",
            Param::T1rho => "t1rho",
            Param::M0 => "m0",
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Param {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Param::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::invalid(
                    "parameter",
                    format!("`{s}` is not one of d, r, r1, t1rho, m0"),
                )
            })
    }
}

/// Value, bounds and free/fixed state of one parameter. Bounds are in
/// physical units (rad/s, 1/s, s) regardless of [`RelaxationForm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub free: bool,
}

impl ParamSpec {
    pub fn fixed(value: f64) -> Self {
        Self {
            value,
            lower: value,
            upper: value,
            free: false,
        }
    }
}

/// Whether R and R1 are optimized as rates or as their reciprocal times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelaxationForm {
    #[default]
    Rates,
    Times,
}

#[derive(Debug, Clone)]
pub struct FitSpec {
    pub d: ParamSpec,
    pub r: ParamSpec,
    pub r1: ParamSpec,
    pub t1rho: ParamSpec,
    pub m0: ParamSpec,
    pub form: RelaxationForm,
    pub orientations: OrientationSetSpec,
    pub spinning: SpinningParams,
    pub rf: RfScheme,
}

impl FitSpec {
    /// All parameters fixed at the given values.
    pub fn new(params: ModelParams, spinning: SpinningParams, rf: RfScheme) -> Self {
        Self {
            d: ParamSpec::fixed(params.coupling.d),
            r: ParamSpec::fixed(params.relax.r),
            r1: ParamSpec::fixed(params.relax.r1),
            t1rho: ParamSpec::fixed(params.relax.t1rho),
            m0: ParamSpec::fixed(params.relax.m0),
            form: RelaxationForm::Rates,
            orientations: OrientationSetSpec::default(),
            spinning,
            rf,
        }
    }

    /// Frees `p` within `[lower, upper]`, keeping its current value as the guess.
    pub fn with_free(mut self, p: Param, lower: f64, upper: f64) -> Self {
        let spec = self.param_mut(p);
        spec.free = true;
        spec.lower = lower;
        spec.upper = upper;
        self
    }

    pub fn with_guess(mut self, p: Param, value: f64) -> Self {
        self.param_mut(p).value = value;
        self
    }

    pub fn param(&self, p: Param) -> &ParamSpec {
        match p {
            Param::D => &self.d,
            Param::R => &self.r,
            Param::R1 => &self.r1,
            Param::T1rho => &self.t1rho,
            Param::M0 => &self.m0,
        }
    }

    pub fn param_mut(&mut self, p: Param) -> &mut ParamSpec {
        match p {
            Param::D => &mut self.d,
            Param::R => &mut self.r,
            Param::R1 => &mut self.r1,
            Param::T1rho => &mut self.t1rho,
            Param::M0 => &mut self.m0,
        }
    }

    pub fn free_params(&self) -> Vec<Param> {
        Param::ALL
            .into_iter()
            .filter(|&p| self.param(p).free)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            let s = self.param(p);
            if !s.free {
                continue;
            }
            if !(s.lower.is_finite() && s.upper.is_finite() && s.lower < s.upper) {
                return Err(Error::invalid(
                    p.name(),
                    "bounds must be finite and ordered",
                ));
            }
            if !(s.lower..=s.upper).contains(&s.value) {
                return Err(Error::invalid(
                    p.name(),
                    format!(
                        "initial guess {} outside [{}, {}]",
                        s.value, s.lower, s.upper
                    ),
                ));
            }
            let positive_lower = match p {
                Param::D => false,
                Param::R | Param::R1 => self.form == RelaxationForm::Times,
                Param::T1rho | Param::M0 => true,
            };
            if positive_lower && s.lower <= 0.0 {
                return Err(Error::invalid(p.name(), "lower bound must be > 0"));
            }
            if matches!(p, Param::R | Param::R1) && s.lower < 0.0 {
                return Err(Error::invalid(p.name(), "rates cannot be negative"));
            }
        }
        Ok(())
    }

    fn values(&self) -> ModelParams {
        ModelParams {
            coupling: CouplingParams { d: self.d.value },
            relax: RelaxationParams {
                m0: self.m0.value,
                r: self.r.value,
                r1: self.r1.value,
                t1rho: self.t1rho.value,
            },
        }
    }

    fn reciprocal(&self, p: Param) -> bool {
        self.form == RelaxationForm::Times && matches!(p, Param::R | Param::R1)
    }
}

fn set_param(params: &mut ModelParams, p: Param, v: f64) {
    match p {
        Param::D => params.coupling.d = v,
        Param::R => params.relax.r = v,
        Param::R1 => params.relax.r1 = v,
        Param::T1rho => params.relax.t1rho = v,
        Param::M0 => params.relax.m0 = v,
    }
}

pub fn get_param(params: &ModelParams, p: Param) -> f64 {
    match p {
        Param::D => params.coupling.d,
        Param::R => params.relax.r,
        Param::R1 => params.relax.r1,
        Param::T1rho => params.relax.t1rho,
        Param::M0 => params.relax.m0,
    }
}

// --- least-squares problem -----------------------------------------------

/// Weighted residuals `√w_i·(M_model(t_i) − M_i)` over the free-parameter
/// coordinates of a [`FitSpec`].
pub struct FitProblem {
    spec: FitSpec,
    free: Vec<Param>,
    model: BuildUpModel,
    times: Vec<f64>,
    observed: Vec<f64>,
    sqrt_weights: Option<Vec<f64>>,
    /// Powder efficiency at the data times when d is fixed.
    eta_cache: Option<Vec<f64>>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    typical: Vec<f64>,
}

impl FitProblem {
    pub fn new(data: &BuildUpData, spec: &FitSpec) -> Result<Self> {
        spec.validate()?;
        let free = spec.free_params();
        let needed = if free.len() >= 2 {
            (free.len() + 1).max(6)
        } else {
            free.len() + 1
        };
        if !free.is_empty() && data.len() < needed {
            return Err(Error::Underdetermined {
                points: data.len(),
                free: free.len(),
                needed,
            });
        }
        let model = BuildUpModel {
            spinning: spec.spinning,
            rf: spec.rf,
            orientations: spec.orientations.build()?,
        };
        let times = data.times_s();
        let eta_cache = (!spec.d.free)
            .then(|| model.powder_efficiency(CouplingParams { d: spec.d.value }, &times));
        let (mut lower, mut upper, mut typical) = (Vec::new(), Vec::new(), Vec::new());
        for &p in &free {
            let s = spec.param(p);
            let (lo, hi, v) = if spec.reciprocal(p) {
                (1.0 / s.upper, 1.0 / s.lower, 1.0 / s.value)
            } else {
                (s.lower, s.upper, s.value)
            };
            lower.push(lo);
            upper.push(hi);
            typical.push(v.abs().max(1e-6 * (hi - lo)));
        }
        Ok(Self {
            spec: spec.clone(),
            free,
            model,
            times,
            observed: data.magnetizations().to_vec(),
            sqrt_weights: data.sigma().map(|s| s.iter().map(|v| 1.0 / v).collect()),
            eta_cache,
            lower,
            upper,
            typical,
        })
    }

    pub fn free_params(&self) -> &[Param] {
        &self.free
    }

    pub fn initial_coords(&self) -> Vec<f64> {
        self.free
            .iter()
            .map(|&p| {
                let v = self.spec.param(p).value;
                if self.spec.reciprocal(p) {
                    1.0 / v
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn params_at(&self, x: &[f64]) -> ModelParams {
        let mut params = self.spec.values();
        for (&p, &v) in self.free.iter().zip(x) {
            set_param(
                &mut params,
                p,
                if self.spec.reciprocal(p) { 1.0 / v } else { v },
            );
        }
        params
    }

    pub fn predict(&self, params: &ModelParams) -> Vec<f64> {
        match &self.eta_cache {
            Some(eta) => apply_relaxation(eta, &self.times, &params.relax),
            None => model_curve(&self.model, params, &self.times),
        }
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let predicted = self.predict(&self.params_at(x));
        let raw = predicted.iter().zip(&self.observed).map(|(m, o)| m - o);
        match &self.sqrt_weights {
            Some(w) => raw.zip(w).map(|(r, w)| r * w).collect(),
            None => raw.collect(),
        }
    }

    fn step_size(&self, j: usize, x: &[f64]) -> f64 {
        f64::EPSILON.sqrt() * x[j].abs().max(self.typical[j])
    }

    /// Forward differences, stepping backwards at an upper bound.
    pub fn jacobian_forward(&self, x: &[f64], r0: &[f64]) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(r0.len(), x.len());
        for j in 0..x.len() {
            let mut h = self.step_size(j, x);
            if x[j] + h > self.upper[j] {
                h = -h;
            }
            let mut xp = x.to_vec();
            xp[j] += h;
            let h = xp[j] - x[j];
            let rp = self.residuals(&xp);
            for i in 0..r0.len() {
                jac[(i, j)] = (rp[i] - r0[i]) / h;
            }
        }
        jac
    }

    pub fn jacobian_central(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.times.len();
        let mut jac = DMatrix::zeros(n, x.len());
        for j in 0..x.len() {
            let h = f64::EPSILON.cbrt() * x[j].abs().max(self.typical[j]);
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[j] += h;
            xm[j] -= h;
            let (rp, rm) = (self.residuals(&xp), self.residuals(&xm));
            for i in 0..n {
                jac[(i, j)] = (rp[i] - rm[i]) / (xp[j] - xm[j]);
            }
        }
        jac
    }

    fn project(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }

    fn scaled_norm(&self, x: &[f64], step: &[f64]) -> f64 {
        step.iter()
            .enumerate()
            .map(|(j, s)| (s / x[j].abs().max(self.typical[j])).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn cost_of(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub free: Vec<Param>,
    /// Standard errors in physical units, for free parameters only.
    pub std_errors: Vec<(Param, Option<f64>)>,
    pub rss: f64,
    pub initial_rss: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Cost after the initial guess and after every accepted step.
    pub cost_history: Vec<f64>,
}

impl FitResult {
    pub fn value(&self, p: Param) -> f64 {
        get_param(&self.params, p)
    }

    pub fn std_error(&self, p: Param) -> Option<f64> {
        self.std_errors
            .iter()
            .find(|(q, _)| *q == p)
            .and_then(|(_, e)| *e)
    }

    /// `key = value` report lines.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("converged", self.converged.to_string());
        line("iterations", self.iterations.to_string());
        line("rss", format!("{:e}", self.rss));
        line("initial_rss", format!("{:e}", self.initial_rss));
        line(
            "free",
            self.free
                .iter()
                .map(|p| p.name())
                .collect::<Vec<_>>()
                .join(","),
        );
        line("d_rad_s", format!("{}", self.params.coupling.d));
        line(
            "d_khz",
            format!("{}", crate::units::rad_s_to_khz(self.params.coupling.d)),
        );
        line("r_per_s", format!("{}", self.params.relax.r));
        line(
            "r_inv_us",
            format!(
                "{}",
                crate::units::inverse_us_from_rate(self.params.relax.r)
            ),
        );
        line("r1_per_s", format!("{}", self.params.relax.r1));
        line(
            "r1_inv_us",
            format!(
                "{}",
                crate::units::inverse_us_from_rate(self.params.relax.r1)
            ),
        );
        line(
            "t1rho_ms",
            format!("{}", crate::units::s_to_ms(self.params.relax.t1rho)),
        );
        line("m0", format!("{}", self.params.relax.m0));
        for (p, e) in &self.std_errors {
            line(
                &format!("stderr_{}", p.name()),
                e.map_or_else(|| "nan".to_string(), |v| format!("{v:e}")),
            );
        }
        out
    }
}

/// Bounded Levenberg–Marquardt fit of the build-up model to `data`.
pub fn fit_buildup(data: &BuildUpData, spec: &FitSpec) -> Result<FitResult> {
    let problem = FitProblem::new(data, spec)?;
    let mut x = problem.initial_coords();
    let mut r = problem.residuals(&x);
    let mut cost = cost_of(&r);
    let initial_rss = cost;
    let mut history = vec![cost];

    if problem.free.is_empty() {
        return Ok(FitResult {
            params: problem.params_at(&x),
            free: Vec::new(),
            std_errors: Vec::new(),
            rss: cost,
            initial_rss,
            converged: true,
            iterations: 0,
            cost_history: history,
        });
    }

    let mut jac = problem.jacobian_forward(&x, &r);
    for (j, col) in jac.column_iter().enumerate() {
        if col.norm() == 0.0 {
            return Err(Error::DegenerateJacobian {
                param: problem.free[j].name(),
            });
        }
    }

    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let mut damped = a.clone();
        for j in 0..x.len() {
            damped[(j, j)] += lambda * a[(j, j)];
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            if lambda > 1e20 {
                return Err(Error::DegenerateJacobian {
                    param: problem.free[0].name(),
                });
            }
            continue;
        };
        let delta = chol.solve(&(-g));
        let mut trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
        problem.project(&mut trial);
        let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step_norm = problem.scaled_norm(&x, &step);
        if step_norm < STEP_TOL {
            converged = true;
            break;
        }
        let r_trial = problem.residuals(&trial);
        let cost_trial = cost_of(&r_trial);
        if cost_trial < cost {
            let rel = (cost - cost_trial) / cost;
            x = trial;
            r = r_trial;
            cost = cost_trial;
            history.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            if rel < RELATIVE_COST_TOL {
                converged = true;
                break;
            }
            jac = problem.jacobian_forward(&x, &r);
        } else {
            lambda *= 10.0;
            if lambda > 1e20 {
                // no descent left at working precision
                converged = true;
                break;
            }
        }
    }

    let std_errors = standard_errors(&problem, &x, &r, cost);
    Ok(FitResult {
        params: problem.params_at(&x),
        free: problem.free.clone(),
        std_errors,
        rss: cost,
        initial_rss,
        converged,
        iterations,
        cost_history: history,
    })
}

fn standard_errors(
    problem: &FitProblem,
    x: &[f64],
    r: &[f64],
    cost: f64,
) -> Vec<(Param, Option<f64>)> {
    let n = r.len();
    let p = x.len();
    let jac = problem.jacobian_forward(x, r);
    let cov = (n > p)
        .then(|| (jac.transpose() * &jac).try_inverse())
        .flatten()
        .map(|inv| inv * (cost / (n - p) as f64));
    problem
        .free
        .iter()
        .enumerate()
        .map(|(j, &param)| {
            let err = cov.as_ref().map(|c| c[(j, j)].max(0.0).sqrt()).map(|e| {
                if problem.spec.reciprocal(param) {
                    e / (x[j] * x[j])
                } else {
                    e
                }
            });
            (param, err)
        })
        .collect()
}

// --- distances -----------------------------------------------------------

/// μ0/4π in T·m/A.
const MU0_OVER_4PI: f64 = 1.0e-7;
/// Reduced Planck constant, J·s (CODATA 2018, exact).
const HBAR: f64 = 1.054_571_817e-34;

/// Spin-½ isotopes with tabulated gyromagnetic ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isotope {
    H1,
    C13,
    N15,
    F19,
    Si29,
    P31,
}

impl Isotope {
    pub const ALL: [Isotope; 6] = [
        Isotope::H1,
        Isotope::C13,
        Isotope::N15,
        Isotope::F19,
        Isotope::Si29,
        Isotope::P31,
    ];

    /// γ in rad s⁻¹ T⁻¹ (CODATA 2018 for ¹H, IUPAC 2001 NMR table otherwise).
    pub fn gyromagnetic_ratio(self) -> f64 {
        match self {
            Isotope::H1 => 267.522_187_44e6,
            Isotope::C13 => 67.2828e6,
            Isotope::N15 => -27.116e6,
            Isotope::F19 => 251.8148e6,
            Isotope::Si29 => -53.190e6,
            Isotope::P31 => 108.394e6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Isotope::H1 => "1H",
            Isotope::C13 => "13C",
            Isotope::N15 => "15N",
            Isotope::F19 => "19F",
            Isotope::Si29 => "29Si",
            Isotope::P31 => "31P",
        }
    }

    fn supported() -> String {
        Isotope::ALL.map(|i| i.label()).join(", ")
    }
}

impl FromStr for Isotope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        Isotope::ALL
            .into_iter()
            .find(|i| {
                let label = i.label();
                let element = label.trim_start_matches(|c: char| c.is_ascii_digit());
                key.eq_ignore_ascii_case(label) || key.eq_ignore_ascii_case(element)
            })
            .ok_or_else(|| Error::UnsupportedIsotope {
                name: s.to_string(),
                supported: Isotope::supported(),
            })
    }
}

/// A heteronuclear pair, parsed from e.g. `1H-13C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IsotopePair(pub Isotope, pub Isotope);

impl IsotopePair {
    /// `|μ0/4π·γI·γS·ħ|` in rad/s·m³.
    fn prefactor(self) -> f64 {
        (MU0_OVER_4PI * self.0.gyromagnetic_ratio() * self.1.gyromagnetic_ratio() * HBAR).abs()
    }
}

impl FromStr for IsotopePair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(['-', ',', '/'])
            .ok_or_else(|| Error::UnsupportedIsotope {
                name: s.to_string(),
                supported: Isotope::supported(),
            })?;
        Ok(IsotopePair(a.parse()?, b.parse()?))
    }
}

impl fmt::Display for IsotopePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0.label(), self.1.label())
    }
}

/// Point-dipole coupling magnitude `|d|` (rad/s) at distance `r` (Å).
pub fn coupling_from_distance(r_angstrom: f64, pair: IsotopePair) -> Result<f64> {
    if !(r_angstrom.is_finite() && r_angstrom > 0.0) {
        return Err(Error::invalid("distance", "must be finite and > 0"));
    }
    let r = r_angstrom * 1e-10;
    Ok(pair.prefactor() / (r * r * r))
}

/// Inverse of [`coupling_from_distance`]; the sign of `d` is ignored.
pub fn distance_from_coupling(d: f64, pair: IsotopePair) -> Result<f64> {
    if d == 0.0 {
        return Err(Error::ZeroCoupling);
    }
    if !d.is_finite() {
        return Err(Error::invalid("d", "must be finite"));
    }
    Ok((pair.prefactor() / d.abs()).cbrt() * 1e10)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powder::grid_orientation_set;
    use crate::units::khz_to_rad_s;
    use std::f64::consts::PI;

    fn hc() -> IsotopePair {
        "1H-13C".parse().unwrap()
    }

    #[test]
    fn hc_coupling_at_bond_length() {
        let d = coupling_from_distance(1.09, hc()).unwrap();
        // 1e-7 · 2.675e8 · 6.728e7 · 1.0546e-34 / (1.09e-10)³, by hand ≈ 1.4657e5 rad/s
        let hand = 1e-7 * 2.675e8 * 6.728e7 * 1.0546e-34 / 1.09e-10f64.powi(3);
        assert!((d - hand).abs() / hand < 1e-3, "{d} vs {hand}");
        let khz = d / (2.0 * PI) / 1e3;
        assert!((khz - 23.3).abs() < 0.05, "{khz}");
    }

    #[test]
    fn distance_round_trip_and_inverse_cube() {
        for r in [0.9, 1.09, 1.5, 2.3, 5.0] {
            let d = coupling_from_distance(r, hc()).unwrap();
            let back = distance_from_coupling(d, hc()).unwrap();
            assert!((back - r).abs() / r < 1e-12);
            assert!((distance_from_coupling(-d, hc()).unwrap() - r).abs() / r < 1e-12);
            let d2 = coupling_from_distance(2.0 * r, hc()).unwrap();
            assert!((d / d2 - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_errors() {
        assert!(matches!(
            distance_from_coupling(0.0, hc()),
            Err(Error::ZeroCoupling)
        ));
        let err = "1H-2H".parse::<IsotopePair>().unwrap_err();
        assert!(err.to_string().contains("13C"), "{err}");
        assert_eq!("H-C".parse::<IsotopePair>().unwrap(), hc());
        assert_eq!(
            "15n-1h".parse::<IsotopePair>().unwrap(),
            IsotopePair(Isotope::N15, Isotope::H1)
        );
    }

    #[test]
    fn parses_two_and_three_columns() {
        let data =
            parse_buildup("time_us,magnetization\n0,0\n10,0.1\n20,0.25\n".as_bytes()).unwrap();
        assert_eq!(data.times_us(), &[0.0, 10.0, 20.0]);
        assert_eq!(data.magnetizations(), &[0.0, 0.1, 0.25]);
        assert!(data.sigma().is_none());

        let text = "# comment\ntime_us,magnetization,sigma\n# another\n20,0.2,0.01\n0,0,0.01\n10,0.1,0.02\n";
        let data = parse_buildup(text.as_bytes()).unwrap();
        assert_eq!(data.times_us(), &[0.0, 10.0, 20.0]);
        assert_eq!(data.sigma().unwrap(), &[0.01, 0.02, 0.01]);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err =
            parse_buildup("time_us,magnetization\n0,0\n10,0.1\n10,0.2\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("duplicate"));
            }
            other => panic!("{other:?}"),
        }
        let err = parse_buildup("time_us,magnetization\n0,0\n5,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let err = parse_buildup("t,m\n0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
        let err = parse_buildup("time_us,magnetization\n0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err:?}");
        let err = parse_buildup("time_us,magnetization\n0,0\n1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn export_round_trip() {
        let data = BuildUpData::new(
            vec![0.0, 1.0 / 3.0, 12.5, 1e3],
            vec![0.0, 0.123456789012345, -1e-17, 0.7],
            Some(vec![0.1, 0.2, 0.3, 1.0 / 7.0]),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_buildup(&data, &mut buf).unwrap();
        assert_eq!(parse_buildup(buf.as_slice()).unwrap(), data);
    }

    fn small_model() -> BuildUpModel {
        BuildUpModel {
            spinning: SpinningParams::new(khz_to_rad_s(5.0)).unwrap(),
            rf: RfScheme::on_resonance(khz_to_rad_s(80.0), khz_to_rad_s(80.0)).unwrap(),
            orientations: grid_orientation_set(8, 8).unwrap(),
        }
    }

    #[test]
    fn model_without_coupling_is_pure_relaxation() {
        let relax = RelaxationParams::new(1.3, 3000.0, 7000.0, 2e-3).unwrap();
        let params = ModelParams {
            coupling: CouplingParams::new(0.0).unwrap(),
            relax,
        };
        let times: Vec<f64> = (0..50).map(|k| k as f64 * 2e-5).collect();
        let m = model_curve(&small_model(), &params, &times);
        assert_eq!(m[0], 0.0);
        for (v, &t) in m.iter().zip(&times) {
            let expected = 1.3
                * (1.0 - 0.5 * (-3000.0 * t).exp() - 0.5 * (-7000.0 * t).exp())
                * (-t / 2e-3).exp();
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn all_fixed_reports_residual_without_iterating() {
        let model = small_model();
        let params = ModelParams {
            coupling: CouplingParams::new(1e5).unwrap(),
            relax: RelaxationParams::new(1.0, 3000.0, 7000.0, 2e-3).unwrap(),
        };
        let times_us: Vec<f64> = (0..20).map(|k| k as f64 * 50.0).collect();
        let times: Vec<f64> = times_us.iter().map(|t| t * 1e-6).collect();
        let mut m = model_curve(&model, &params, &times);
        m[3] += 0.01;
        let data = BuildUpData::new(times_us, m, None).unwrap();
        let mut spec = FitSpec::new(params, model.spinning, model.rf);
        spec.orientations = OrientationSetSpec::Grid {
            n_beta: 8,
            n_gamma: 8,
        };
        let res = fit_buildup(&data, &spec).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
        assert!((res.rss - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn underdetermined_and_degenerate() {
        let model = small_model();
        let params = ModelParams {
            coupling: CouplingParams::new(1e5).unwrap(),
            relax: RelaxationParams::new(1.0, 3000.0, 7000.0, 2e-3).unwrap(),
        };
        let data = BuildUpData::new(vec![0.0, 10.0], vec![0.0, 0.1], None).unwrap();
        let spec = FitSpec::new(params, model.spinning, model.rf)
            .with_free(Param::R, 0.0, 1e6)
            .with_free(Param::R1, 0.0, 1e6)
            .with_free(Param::T1rho, 1e-5, 1.0);
        assert!(matches!(
            fit_buildup(&data, &spec),
            Err(Error::Underdetermined { .. })
        ));

        let zeros =
            BuildUpData::new((0..8).map(|k| k as f64).collect(), vec![0.0; 8], None).unwrap();
        let spec = FitSpec::new(
            ModelParams {
                coupling: CouplingParams::new(0.0).unwrap(),
                relax: RelaxationParams::new(1.0, 0.0, 0.0, 2e-3).unwrap(),
            },
            model.spinning,
            model.rf,
        )
        .with_free(Param::D, -1e5, 1e5);
        // η is even in d, so dη/dd = 0 at d = 0
        assert!(matches!(
            fit_buildup(&zeros, &spec),
            Err(Error::DegenerateJacobian { param: "d" })
        ));
    }

    #[test]
    fn spec_validation() {
        let model = small_model();
        let params = ModelParams {
            coupling: CouplingParams::new(1e5).unwrap(),
            relax: RelaxationParams::new(1.0, 3000.0, 7000.0, 2e-3).unwrap(),
        };
        let base = FitSpec::new(params, model.spinning, model.rf);
        assert!(base
            .clone()
            .with_free(Param::R, 5000.0, 1e6)
            .validate()
            .is_err());
        assert!(base
            .clone()
            .with_free(Param::R, 1e6, 0.0)
            .validate()
            .is_err());
        assert!(base
            .clone()
            .with_free(Param::T1rho, 0.0, 1.0)
            .validate()
            .is_err());
        assert!(base
            .clone()
            .with_free(Param::R, 0.0, f64::INFINITY)
            .validate()
            .is_err());
        let mut times = base.clone().with_free(Param::R, 0.0, 1e6);
        times.form = RelaxationForm::Times;
        assert!(times.validate().is_err());
        assert!(base.with_free(Param::R, 1.0, 1e6).validate().is_ok());
    }
}
