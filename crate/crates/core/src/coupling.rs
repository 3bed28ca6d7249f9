//! Domain types and the dipolar-coupling kernel.
//!
//! Under magic-angle spinning the heteronuclear coupling of a crystallite with
//! Euler angles (β, γ) in the rotor frame is
//!
//! ```text
//! d(t) = d·[√2·sin(2β)·cos(ω_r·t + γ) − sin²(β)·cos(2ω_r·t + 2γ)]
//! ```
//!
//! and every transfer quantity depends on it only through the accumulated
//! phase `φ(t) = ∫₀ᵗ d(t′) dt′`, see [`dipolar_phase`].

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2, TAU};

use crate::{Error, Result};

/// Euler angles of the dipolar tensor in the rotor-fixed frame.
///
/// `beta ∈ [0, π]`, `gamma ∈ [0, 2π)`. The constructor wraps `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Orientation {
    beta: f64,
    gamma: f64,
}

impl Orientation {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !(0.0..=PI).contains(&beta) {
            return Err(Error::invalid("beta", format!("{beta} is outside [0, π]")));
        }
        if !gamma.is_finite() {
            return Err(Error::invalid("gamma", "must be finite"));
        }
        let mut gamma = gamma.rem_euclid(TAU);
        // rem_euclid can round up to exactly 2π for tiny negative inputs
        if gamma >= TAU {
            gamma = 0.0;
        }
        Ok(Self { beta, gamma })
    }

    pub fn from_degrees(beta_deg: f64, gamma_deg: f64) -> Result<Self> {
        Self::new(beta_deg.to_radians(), gamma_deg.to_radians())
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Dipolar anisotropy constant `d` in rad/s. Negative values are allowed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingParams {
    pub d: f64,
}

impl CouplingParams {
    pub fn new(d: f64) -> Result<Self> {
        if !d.is_finite() {
            return Err(Error::invalid("d", "must be finite"));
        }
        Ok(Self { d })
    }
}

/// Rotor angular frequency `ω_r` in rad/s; zero selects a stationary sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpinningParams {
    pub omega_r: f64,
}

impl SpinningParams {
    pub fn new(omega_r: f64) -> Result<Self> {
        if !(omega_r.is_finite() && omega_r >= 0.0) {
            return Err(Error::invalid(
                "omega_r",
                format!("{omega_r} must be finite and ≥ 0"),
            ));
        }
        Ok(Self { omega_r })
    }

    pub fn stationary() -> Self {
        Self { omega_r: 0.0 }
    }

    /// Rotor period `2π/ω_r`, or `None` for a stationary sample.
    pub fn rotor_period(&self) -> Option<f64> {
        (self.omega_r > 0.0).then(|| TAU / self.omega_r)
    }
}

/// Spin-lock amplitudes and resonance offsets, all rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfScheme {
    pub omega1_i: f64,
    pub omega1_s: f64,
    pub offset_i: f64,
    pub offset_s: f64,
}

impl RfScheme {
    pub fn new(omega1_i: f64, omega1_s: f64, offset_i: f64, offset_s: f64) -> Result<Self> {
        if !(omega1_i.is_finite() && omega1_i > 0.0) {
            return Err(Error::invalid("omega1_i", "must be finite and > 0"));
        }
        if !(omega1_s.is_finite() && omega1_s > 0.0) {
            return Err(Error::invalid("omega1_s", "must be finite and > 0"));
        }
        if !(offset_i.is_finite() && offset_s.is_finite()) {
            return Err(Error::invalid("offset", "offsets must be finite"));
        }
        Ok(Self {
            omega1_i,
            omega1_s,
            offset_i,
            offset_s,
        })
    }

    pub fn on_resonance(omega1_i: f64, omega1_s: f64) -> Result<Self> {
        Self::new(omega1_i, omega1_s, 0.0, 0.0)
    }

    pub fn is_on_resonance(&self) -> bool {
        self.offset_i == 0.0 && self.offset_s == 0.0
    }
}

/// Effective spin-lock fields and their tilt from the z axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveField {
    pub omega1_ie: f64,
    pub omega1_se: f64,
    pub theta_i: f64,
    pub theta_s: f64,
}

/// Uniform sampling `t_k = k·dt`, `k = 0..n_points`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    n_points: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_points: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("{dt} must be finite and > 0")));
        }
        if n_points == 0 {
            return Err(Error::invalid("n_points", "grid needs at least one point"));
        }
        Ok(Self { dt, n_points })
    }

    /// Grid from 0 to `t_max` inclusive (up to rounding of `t_max/dt`).
    pub fn spanning(t_max: f64, dt: f64) -> Result<Self> {
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::invalid(
                "t_max",
                format!("{t_max} must be finite and > 0"),
            ));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("{dt} must be finite and > 0")));
        }
        let steps = (t_max / dt + 1e-9).floor() as usize;
        Self::new(dt, steps + 1)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        self.n_points == 0
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn last_time(&self) -> f64 {
        self.time(self.n_points - 1)
    }

    pub fn times(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        (0..self.n_points).map(move |k| self.time(k))
    }
}

/// Instantaneous dipolar coupling `d(t)` in rad/s.
pub fn dipolar_coupling_at(
    coupling: CouplingParams,
    orient: Orientation,
    spin: SpinningParams,
    t: f64,
) -> f64 {
    let (beta, gamma) = (orient.beta, orient.gamma);
    let wt = spin.omega_r * t;
    let sin_b = beta.sin();
    coupling.d
        * (SQRT_2 * (2.0 * beta).sin() * (wt + gamma).cos()
            - sin_b * sin_b * (2.0 * wt + 2.0 * gamma).cos())
}

/// Accumulated dipolar phase `φ(t) = ∫₀ᵗ d(t′) dt′` in radians.
///
/// For ω_r > 0 this is the closed-form antiderivative
/// `(d/2ω_r)·{2√2·sin2β·[sin(ω_r t+γ) − sin γ] − sin²β·[sin(2ω_r t+2γ) − sin 2γ]}`,
/// evaluated with `sin(a+x) − sin a = 2·cos(a + x/2)·sin(x/2)` so small
/// `ω_r·t` does not cancel. For ω_r = 0 it is `d(0)·t`.
pub fn dipolar_phase(
    coupling: CouplingParams,
    orient: Orientation,
    spin: SpinningParams,
    t: f64,
) -> f64 {
    let w = spin.omega_r;
    if w == 0.0 {
        return dipolar_coupling_at(coupling, orient, spin, 0.0) * t;
    }
    let (beta, gamma) = (orient.beta, orient.gamma);
    let wt = w * t;
    let sin_b = beta.sin();
    let first = 2.0 * (gamma + 0.5 * wt).cos() * (0.5 * wt).sin();
    let second = 2.0 * (2.0 * gamma + wt).cos() * wt.sin();
    coupling.d / (2.0 * w) * (2.0 * SQRT_2 * (2.0 * beta).sin() * first - sin_b * sin_b * second)
}

/// Effective field magnitudes and tilt angles `θ = arccos(Δω/ω1e)`.
pub fn effective_field(rf: RfScheme) -> EffectiveField {
    let tilt = |omega1: f64, offset: f64| {
        if offset == 0.0 {
            (omega1, FRAC_PI_2)
        } else {
            let eff = omega1.hypot(offset);
            (eff, (offset / eff).acos())
        }
    };
    let (omega1_ie, theta_i) = tilt(rf.omega1_i, rf.offset_i);
    let (omega1_se, theta_s) = tilt(rf.omega1_s, rf.offset_s);
    EffectiveField {
        omega1_ie,
        omega1_se,
        theta_i,
        theta_s,
    }
}

/// The transfer-driving (perpendicular) part of the coupling in the
/// effective-field frame: `d·sin θ_I·sin θ_S`. The parallel part is dropped.
pub fn scaled_coupling(coupling: CouplingParams, eff: EffectiveField) -> CouplingParams {
    CouplingParams {
        d: coupling.d * eff.theta_i.sin() * eff.theta_s.sin(),
    }
}
