//! Command-line flags, the key-value config file, and resolution of both into
//! internal units.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpmas::analytic::RelaxationParams;
use cpmas::coupling::{CouplingParams, Orientation, RfScheme, SpinningParams, TimeGrid};
use cpmas::fit::{coupling_from_distance, IsotopePair, Param, RelaxationForm};
use cpmas::powder::OrientationSetSpec;
use cpmas::units::{
    deg_to_rad, inverse_us_from_rate, khz_to_rad_s, ms_to_s, rad_s_to_khz, rad_to_deg,
    rate_from_inverse_us, s_to_ms, s_to_us, us_to_s,
};

use crate::error::CliError;

pub const DEFAULT_B1_KHZ: f64 = 80.0;
/// d/2π in kHz, i.e. d/π = 5 kHz.
pub const DEFAULT_D_KHZ: f64 = 2.5;
pub const DEFAULT_MAS_KHZ: f64 = 2.0;
pub const DEFAULT_BETA_DEG: f64 = 45.0;
pub const DEFAULT_TMAX_US: f64 = 1000.0;
pub const DEFAULT_DT_US: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.02;
pub const DEFAULT_PAIR: &str = "1H-13C";

#[derive(Debug, Parser)]
#[command(
    name = "cpmas",
    version,
    about = "Cross-polarization transfer under magic-angle spinning",
    long_about = "Cross-polarization transfer under magic-angle spinning.\n\n\
                  User units: fields, couplings and offsets in kHz (as ω/2π; --d-khz takes d/2π), \
                  times in µs (T1ρ in ms), angles in degrees.\n\
                  `--config FILE` reads `key = value` lines (keys are flag names without dashes); \
                  flags given on the command line override file values."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form transfer efficiency for one orientation: CSV `t_us,eta`.
    #[command(args_override_self = true)]
    Simulate(Common),
    /// Powder-averaged build-up curve with relaxation: CSV `time_us,magnetization`.
    #[command(args_override_self = true)]
    Powder {
        #[command(flatten)]
        common: Common,
        /// Standard deviation of Gaussian noise added to the curve (seeded by --seed).
        #[arg(long, value_name = "SIGMA")]
        noise: Option<f64>,
    },
    /// Density-matrix propagation for one orientation: CSV `t_us,sy,iy,dq_y`.
    #[command(args_override_self = true)]
    Oracle(Common),
    /// Closed form against the density-matrix oracle: CSV `t_us,eta_analytic,sy_oracle`.
    /// Exits with status 2 when the maximum deviation exceeds --threshold.
    #[command(args_override_self = true)]
    Compare(Common),
    /// Least-squares fit of a build-up curve: CSV `time_us,data,model,residual`.
    #[command(args_override_self = true)]
    Fit {
        #[command(flatten)]
        common: Common,
        /// Build-up data with header `time_us,magnetization[,sigma]`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Comma-separated free parameters out of d, r, r1, t1rho, m0.
        #[arg(long, value_delimiter = ',', default_value = "r,r1,t1rho,m0", value_parser = parse_param)]
        free: Vec<Param>,
        /// Optimize R and R1 as rates or as their reciprocal times.
        #[arg(long, value_enum, default_value_t = FormArg::Rates)]
        form: FormArg,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    Rates,
    Times,
}

impl From<FormArg> for RelaxationForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Rates => RelaxationForm::Rates,
            FormArg::Times => RelaxationForm::Times,
        }
    }
}

fn parse_param(s: &str) -> Result<Param, String> {
    s.parse().map_err(|e: cpmas::Error| e.to_string())
}

fn parse_orient_set(s: &str) -> Result<OrientationSetSpec, String> {
    s.parse().map_err(|e: cpmas::Error| e.to_string())
}

fn parse_pair(s: &str) -> Result<IsotopePair, String> {
    s.parse().map_err(|e: cpmas::Error| e.to_string())
}

/// Flags shared by every command. Unset values fall back to defaults in
/// [`Common::resolve`].
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// I-channel spin-lock field ω1I/2π in kHz [default: 80].
    #[arg(long)]
    pub b1i_khz: Option<f64>,
    /// S-channel spin-lock field ω1S/2π in kHz [default: 80].
    #[arg(long)]
    pub b1s_khz: Option<f64>,
    /// Dipolar coupling d/2π in kHz [default: 2.5].
    #[arg(long, allow_negative_numbers = true)]
    pub d_khz: Option<f64>,
    /// Internuclear distance in Å; sets d from --pair and takes precedence over --d-khz.
    #[arg(long)]
    pub distance_a: Option<f64>,
    /// Isotope pair for --distance-a, e.g. 1H-13C [default: 1H-13C].
    #[arg(long, value_parser = parse_pair)]
    pub pair: Option<IsotopePair>,
    /// Spinning rate ωr/2π in kHz; 0 for a stationary sample [default: 2].
    #[arg(long)]
    pub mas_khz: Option<f64>,
    /// I-channel resonance offset in kHz [default: 0].
    #[arg(long, allow_negative_numbers = true)]
    pub offset_i_khz: Option<f64>,
    /// S-channel resonance offset in kHz [default: 0].
    #[arg(long, allow_negative_numbers = true)]
    pub offset_s_khz: Option<f64>,
    /// Polar angle β of the internuclear vector in the rotor frame [default: 45].
    #[arg(long)]
    pub beta_deg: Option<f64>,
    /// Azimuth γ in the rotor frame [default: 0].
    #[arg(long, allow_negative_numbers = true)]
    pub gamma_deg: Option<f64>,
    /// Last sample time in µs [default: 1000].
    #[arg(long)]
    pub tmax_us: Option<f64>,
    /// Sample spacing in µs [default: 1].
    #[arg(long)]
    pub dt_us: Option<f64>,
    /// Powder ensemble: grid:NxM or zcw:L [default: zcw:8].
    #[arg(long, value_parser = parse_orient_set)]
    pub orient_set: Option<OrientationSetSpec>,
    /// 1/R in µs; omitted means no spin-diffusion term.
    #[arg(long)]
    pub r_inv_us: Option<f64>,
    /// 1/R1 in µs; omitted means no R1 term.
    #[arg(long)]
    pub r1_inv_us: Option<f64>,
    /// T1ρ in ms; omitted means no decay.
    #[arg(long)]
    pub t1rho_ms: Option<f64>,
    /// Equilibrium magnetization M0 [default: 1].
    #[arg(long)]
    pub m0: Option<f64>,
    /// Random seed for noise generation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle substeps per sample interval [default: the minimum the step rule allows].
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Maximum deviation accepted by `compare` [default: 0.02].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write the CSV here; the report then goes to stdout.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Key-value config file; already merged before parsing.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
}

/// Everything a command needs, in internal units (rad/s, s, rad).
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub rf: RfScheme,
    pub coupling: CouplingParams,
    pub distance: Option<(f64, IsotopePair)>,
    pub spinning: SpinningParams,
    pub orient: Orientation,
    pub grid: TimeGrid,
    pub orient_set: OrientationSetSpec,
    pub relax: RelaxationParams,
    pub seed: u64,
    pub substeps: Option<usize>,
    pub threshold: f64,
    pub out: Option<PathBuf>,
}

fn positive(name: &str, v: f64) -> Result<f64, CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(CliError::Config(format!(
            "--{name} must be finite and > 0, got {v}"
        )))
    }
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let b1i = positive("b1i-khz", self.b1i_khz.unwrap_or(DEFAULT_B1_KHZ))?;
        let b1s = positive("b1s-khz", self.b1s_khz.unwrap_or(DEFAULT_B1_KHZ))?;
        let rf = RfScheme::new(
            khz_to_rad_s(b1i),
            khz_to_rad_s(b1s),
            khz_to_rad_s(self.offset_i_khz.unwrap_or(0.0)),
            khz_to_rad_s(self.offset_s_khz.unwrap_or(0.0)),
        )?;

        let pair = match self.pair {
            Some(p) => p,
            None => DEFAULT_PAIR.parse()?,
        };
        let (d, distance) = match self.distance_a {
            Some(r) => (
                coupling_from_distance(positive("distance-a", r)?, pair)?,
                Some((r, pair)),
            ),
            None => (khz_to_rad_s(self.d_khz.unwrap_or(DEFAULT_D_KHZ)), None),
        };
        let coupling = CouplingParams::new(d)?;

        let mas = self.mas_khz.unwrap_or(DEFAULT_MAS_KHZ);
        if !(mas.is_finite() && mas >= 0.0) {
            return Err(CliError::Config(format!(
                "--mas-khz must be finite and ≥ 0, got {mas}"
            )));
        }
        let spinning = SpinningParams::new(khz_to_rad_s(mas))?;
        let orient = Orientation::new(
            deg_to_rad(self.beta_deg.unwrap_or(DEFAULT_BETA_DEG)),
            deg_to_rad(self.gamma_deg.unwrap_or(0.0)),
        )?;

        let tmax = self.tmax_us.unwrap_or(DEFAULT_TMAX_US);
        let dt = self.dt_us.unwrap_or(DEFAULT_DT_US);
        if !(tmax.is_finite() && tmax > 0.0) {
            return Err(CliError::Config(format!(
                "--tmax-us must be finite and > 0, got {tmax}"
            )));
        }
        let grid = TimeGrid::spanning(us_to_s(tmax), us_to_s(positive("dt-us", dt)?))?;

        let rate = |name, v: Option<f64>| {
            v.map_or(Ok(0.0), |t| positive(name, t).map(rate_from_inverse_us))
        };
        let relax = RelaxationParams::new(
            positive("m0", self.m0.unwrap_or(1.0))?,
            rate("r-inv-us", self.r_inv_us)?,
            rate("r1-inv-us", self.r1_inv_us)?,
            self.t1rho_ms
                .map_or(Ok(f64::INFINITY), |t| positive("t1rho-ms", t).map(ms_to_s))?,
        )?;

        let threshold = self.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(CliError::Config(format!(
                "--threshold must be finite and ≥ 0, got {threshold}"
            )));
        }
        if self.substeps == Some(0) {
            return Err(CliError::Config("--substeps must be ≥ 1".into()));
        }

        Ok(RunConfig {
            rf,
            coupling,
            distance,
            spinning,
            orient,
            grid,
            orient_set: self.orient_set.unwrap_or_default(),
            relax,
            seed: self.seed.unwrap_or(0),
            substeps: self.substeps,
            threshold,
            out: self.out.clone(),
        })
    }
}

impl RunConfig {
    /// Sample times in µs, `k·dt`.
    pub fn times_us(&self) -> Vec<f64> {
        let dt_us = s_to_us(self.grid.dt());
        (0..self.grid.len()).map(|k| k as f64 * dt_us).collect()
    }

    pub fn times_s(&self) -> Vec<f64> {
        self.grid.times().collect()
    }

    /// `key = value` lines echoing the physical inputs in user units.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("b1i_khz", rad_s_to_khz(self.rf.omega1_i).to_string());
        kv("b1s_khz", rad_s_to_khz(self.rf.omega1_s).to_string());
        kv("offset_i_khz", rad_s_to_khz(self.rf.offset_i).to_string());
        kv("offset_s_khz", rad_s_to_khz(self.rf.offset_s).to_string());
        kv("d_khz", rad_s_to_khz(self.coupling.d).to_string());
        if let Some((r, pair)) = self.distance {
            kv("distance_a", r.to_string());
            kv("pair", pair.to_string());
        }
        kv("mas_khz", rad_s_to_khz(self.spinning.omega_r).to_string());
        kv("beta_deg", rad_to_deg(self.orient.beta()).to_string());
        kv("gamma_deg", rad_to_deg(self.orient.gamma()).to_string());
        kv("tmax_us", s_to_us(self.grid.last_time()).to_string());
        kv("dt_us", s_to_us(self.grid.dt()).to_string());
        kv("points", self.grid.len().to_string());
        kv("orient_set", self.orient_set.to_string());
        kv("r_inv_us", inverse_us_from_rate(self.relax.r).to_string());
        kv("r1_inv_us", inverse_us_from_rate(self.relax.r1).to_string());
        kv("t1rho_ms", s_to_ms(self.relax.t1rho).to_string());
        kv("m0", self.relax.m0.to_string());
        kv("seed", self.seed.to_string());
        s
    }
}

/// Reads `key = value` lines (`#` comments, blank lines ignored) into
/// `--key=value` arguments. Underscores in keys are accepted for dashes.
pub fn config_file_args(path: &Path) -> Result<Vec<OsString>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                i + 1
            ))
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Config(format!(
                "{}:{}: invalid key `{}`",
                path.display(),
                i + 1,
                key
            )));
        }
        args.push(OsString::from(format!("--{key}={}", value.trim())));
    }
    Ok(args)
}

/// Keys that set the same quantity; a command-line flag from a group
/// shadows every file entry in that group.
const KEY_GROUPS: &[&[&str]] = &[&["d-khz", "distance-a"]];

fn flag_key(arg: &str) -> Option<&str> {
    let body = arg.strip_prefix("--")?;
    Some(body.split_once('=').map_or(body, |(k, _)| k))
}

fn shadowed(file_key: &str, cli_keys: &[String]) -> bool {
    cli_keys.iter().any(|k| {
        k == file_key
            || KEY_GROUPS
                .iter()
                .any(|g| g.contains(&k.as_str()) && g.contains(&file_key))
    })
}

/// Splices config-file arguments in right after the subcommand, dropping
/// those the command line sets itself.
pub fn merge_config_args(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut config = None;
    let mut iter = argv.iter().skip(1);
    while let Some(a) = iter.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = iter.next().map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(path) = config else {
        return Ok(argv);
    };
    let Some(sub_idx) = argv
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Ok(argv);
    };
    let sub_idx = sub_idx + 1;
    let cli_keys: Vec<String> = argv[sub_idx + 1..]
        .iter()
        .filter_map(|a| flag_key(&a.to_string_lossy()).map(str::to_owned))
        .collect();
    let mut merged: Vec<OsString> = argv[..=sub_idx].to_vec();
    for arg in config_file_args(&path)? {
        let s = arg.to_string_lossy().into_owned();
        if !flag_key(&s).is_some_and(|k| shadowed(k, &cli_keys)) {
            merged.push(arg);
        }
    }
    merged.extend_from_slice(&argv[sub_idx + 1..]);
    Ok(merged)
}
