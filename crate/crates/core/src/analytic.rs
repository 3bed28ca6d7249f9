//! Closed-form CP dynamics at the Hartmann–Hahn match.
//!
//! In the zero-quantum subspace the matched Hamiltonian `d(t)·σ_z` commutes
//! with itself at all times, so the zero-order average Hamiltonian is exact
//! and the S-spin polarization is `η(t) = (1 − cos φ(t))/2` with
//! `φ = ∫ d(t) dt`. Spin diffusion and rotating-frame relaxation enter as the
//! phenomenological envelope of [`magnetization_value`].

use std::fmt;

use crate::coupling::{
    dipolar_coupling_at, dipolar_phase, CouplingParams, Orientation, SpinningParams, TimeGrid,
};
use crate::{Error, Result};

/// Amplitude and rates of the relaxation-damped build-up.
///
/// `t1rho = f64::INFINITY` disables the rotating-frame decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxationParams {
    pub m0: f64,
    /// I-spin diffusion rate, 1/s.
    pub r: f64,
    /// Damping rate of the coherent oscillation from remote I spins, 1/s.
    pub r1: f64,
    /// Rotating-frame relaxation time, s.
    pub t1rho: f64,
}

impl RelaxationParams {
    pub fn new(m0: f64, r: f64, r1: f64, t1rho: f64) -> Result<Self> {
        if !(m0.is_finite() && m0 > 0.0) {
            return Err(Error::invalid("M0", "must be finite and > 0"));
        }
        if !(r.is_finite() && r >= 0.0) {
            return Err(Error::invalid("R", "must be finite and ≥ 0"));
        }
        if !(r1.is_finite() && r1 >= 0.0) {
            return Err(Error::invalid("R1", "must be finite and ≥ 0"));
        }
        if t1rho.is_nan() || t1rho <= 0.0 {
            return Err(Error::invalid(
                "T1rho",
                "must be > 0 (infinity disables the decay)",
            ));
        }
        Ok(Self { m0, r, r1, t1rho })
    }

    /// `M0 = 1`, no diffusion, no relaxation: `M(t) = η(t)`.
    pub fn none() -> Self {
        Self {
            m0: 1.0,
            r: 0.0,
            r1: 0.0,
            t1rho: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Efficiency,
    Magnetization,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Efficiency => "efficiency",
            CurveKind::Magnetization => "magnetization",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A transfer-efficiency or magnetization trajectory on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CpCurve {
    grid: TimeGrid,
    values: Vec<f64>,
    kind: CurveKind,
}

impl CpCurve {
    pub fn new(grid: TimeGrid, values: Vec<f64>, kind: CurveKind) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "curve",
                format!("{} values for a {}-point grid", values.len(), grid.len()),
            ));
        }
        if kind == CurveKind::Efficiency
            && values.iter().any(|v| !(-1e-12..=1.0 + 1e-12).contains(v))
        {
            return Err(Error::invalid(
                "curve",
                "efficiency samples must lie in [0, 1]",
            ));
        }
        Ok(Self { grid, values, kind })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `(t, value)` pairs.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid.times().zip(self.values.iter().copied())
    }
}

/// Transfer efficiency `η(t) = (1 − cos φ(t))/2 ∈ [0, 1]`.
pub fn transfer_efficiency(
    coupling: CouplingParams,
    orient: Orientation,
    spin: SpinningParams,
    t: f64,
) -> f64 {
    efficiency_from_phase(dipolar_phase(coupling, orient, spin, t))
}

pub fn efficiency_from_phase(phi: f64) -> f64 {
    0.5 * (1.0 - phi.cos())
}

pub fn efficiency_curve(
    coupling: CouplingParams,
    orient: Orientation,
    spin: SpinningParams,
    grid: TimeGrid,
) -> CpCurve {
    let values = grid
        .times()
        .map(|t| transfer_efficiency(coupling, orient, spin, t))
        .collect();
    CpCurve {
        grid,
        values,
        kind: CurveKind::Efficiency,
    }
}

/// `M(t) = M0·{1 − ½e^(−Rt) − ½e^(−R1·t)·(1 − 2η)}·e^(−t/T1ρ)`.
pub fn magnetization_value(eta: f64, t: f64, relax: &RelaxationParams) -> f64 {
    relax.m0
        * (1.0 - 0.5 * (-relax.r * t).exp() - 0.5 * (-relax.r1 * t).exp() * (1.0 - 2.0 * eta))
        * (-t / relax.t1rho).exp()
}

/// Applies the relaxation envelope to an efficiency curve.
pub fn magnetization(eta_curve: &CpCurve, relax: &RelaxationParams) -> Result<CpCurve> {
    if eta_curve.kind != CurveKind::Efficiency {
        return Err(Error::CurveKind {
            expected: CurveKind::Efficiency.name(),
            found: eta_curve.kind.name(),
        });
    }
    let values = eta_curve
        .points()
        .map(|(t, eta)| magnetization_value(eta, t, relax))
        .collect();
    Ok(CpCurve {
        grid: eta_curve.grid,
        values,
        kind: CurveKind::Magnetization,
    })
}

/// Stationary-sample magnetization with `cos(d_orient·t)` written out directly.
pub fn static_magnetization(
    coupling: CouplingParams,
    orient: Orientation,
    relax: &RelaxationParams,
    grid: TimeGrid,
) -> CpCurve {
    let d_orient = dipolar_coupling_at(coupling, orient, SpinningParams::stationary(), 0.0);
    let values = grid
        .times()
        .map(|t| {
            relax.m0
                * (1.0
                    - 0.5 * (-relax.r * t).exp()
                    - 0.5 * (-relax.r1 * t).exp() * (d_orient * t).cos())
                * (-t / relax.t1rho).exp()
        })
        .collect();
    CpCurve {
        grid,
        values,
        kind: CurveKind::Magnetization,
    }
}
