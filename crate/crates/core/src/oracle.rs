//! Density-matrix propagation of the full two-spin CP Hamiltonian.
//!
//! Operators live in the 4-dimensional product basis |αα⟩, |αβ⟩, |βα⟩, |ββ⟩
//! (first factor I, second S) with spin-½ matrices, so `Tr(I_y²) = 1`.
//!
//! The zero-quantum (ZQ) and double-quantum (DQ) subspaces are spanned by the
//! eigenstates of `I_y`, `S_y`: ZQ = {|+−⟩, |−+⟩}, DQ = {|++⟩, |−−⟩}. On each
//! 2×2 block we use spin-½ fictitious operators labelled so that
//! `σ_y = ½(I_y ∓ S_y)` (polarization axis) and `σ_z` is the block part of
//! `2·I_z·S_z` (dipolar axis).

use std::f64::consts::TAU;

use nalgebra::{Matrix2, Matrix4, SymmetricEigen};
use num_complex::Complex64;

use crate::coupling::{
    dipolar_coupling_at, effective_field, CouplingParams, Orientation, RfScheme, SpinningParams,
    TimeGrid,
};
use crate::{Error, Result};

pub type Matrix4c = Matrix4<Complex64>;
pub type Matrix2c = Matrix2<Complex64>;

/// Minimum number of steps per period of the fastest frequency.
pub const STEPS_PER_PERIOD: f64 = 50.0;

const HERMITIAN_TOL: f64 = 1e-12;
const ZQ: [usize; 2] = [1, 2];
const DQ: [usize; 2] = [0, 3];

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spin {
    I,
    S,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

fn pauli_half(axis: Axis) -> Matrix2c {
    match axis {
        Axis::X => Matrix2c::new(c(0.0, 0.0), c(0.5, 0.0), c(0.5, 0.0), c(0.0, 0.0)),
        Axis::Y => Matrix2c::new(c(0.0, 0.0), c(0.0, -0.5), c(0.0, 0.5), c(0.0, 0.0)),
        Axis::Z => Matrix2c::new(c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.5, 0.0)),
    }
}

fn kron(a: &Matrix2c, b: &Matrix2c) -> Matrix4c {
    Matrix4c::from_fn(|r, col| a[(r / 2, col / 2)] * b[(r % 2, col % 2)])
}

/// A 4×4 operator on the two-spin Hilbert space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperator(Matrix4c);

impl SpinOperator {
    pub fn from_matrix(m: Matrix4c) -> Self {
        Self(m)
    }

    pub fn zero() -> Self {
        Self(Matrix4c::zeros())
    }

    pub fn identity() -> Self {
        Self(Matrix4c::identity())
    }

    /// Single-spin operator, e.g. `I_y` or `S_z`.
    pub fn single(spin: Spin, axis: Axis) -> Self {
        let one = Matrix2c::identity();
        let p = pauli_half(axis);
        match spin {
            Spin::I => Self(kron(&p, &one)),
            Spin::S => Self(kron(&one, &p)),
        }
    }

    pub fn matrix(&self) -> &Matrix4c {
        &self.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0 * c(k, 0.0))
    }

    pub fn plus(&self, other: &Self) -> Self {
        Self(self.0 + other.0)
    }

    pub fn minus(&self, other: &Self) -> Self {
        Self(self.0 - other.0)
    }

    pub fn product(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    pub fn commutator(&self, other: &Self) -> Self {
        Self(self.0 * other.0 - other.0 * self.0)
    }

    pub fn adjoint(&self) -> Self {
        Self(self.0.adjoint())
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    /// Largest element modulus.
    pub fn max_norm(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `max |A_ij − conj(A_ji)|`.
    pub fn hermitian_asymmetry(&self) -> f64 {
        (self.0 - self.0.adjoint())
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

/// A two-spin density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix(Matrix4c);

impl DensityMatrix {
    pub fn from_operator(op: &SpinOperator) -> Self {
        Self(op.0)
    }

    /// `ρ(0) = I_y`, the spin-locked I polarization.
    pub fn i_polarized() -> Self {
        Self::from_operator(&SpinOperator::single(Spin::I, Axis::Y))
    }

    pub fn matrix(&self) -> &Matrix4c {
        &self.0
    }

    pub fn trace(&self) -> Complex64 {
        self.0.trace()
    }

    /// `Tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        (self.0 * self.0).trace().re
    }

    pub fn hermitian_asymmetry(&self) -> f64 {
        SpinOperator(self.0).hermitian_asymmetry()
    }

    /// `Re Tr(O·ρ)`.
    pub fn expectation(&self, op: &SpinOperator) -> f64 {
        let (a, b) = (&op.0, &self.0);
        let mut acc = 0.0;
        for i in 0..4 {
            for k in 0..4 {
                acc += (a[(i, k)] * b[(k, i)]).re;
            }
        }
        acc
    }

    fn transform(&mut self, u: &Matrix4c) {
        self.0 = u * self.0 * u.adjoint();
    }
}

/// Everything that defines the spin-pair Hamiltonian at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpConditions {
    pub rf: RfScheme,
    pub coupling: CouplingParams,
    pub orient: Orientation,
    pub spin: SpinningParams,
}

impl CpConditions {
    /// Unit operators along the I and S effective-field axes, `sin θ·X_y + cos θ·X_z`.
    pub fn effective_axes(&self) -> (SpinOperator, SpinOperator) {
        let eff = effective_field(self.rf);
        let along = |spin, theta: f64| {
            SpinOperator::single(spin, Axis::Y)
                .scaled(theta.sin())
                .plus(&SpinOperator::single(spin, Axis::Z).scaled(theta.cos()))
        };
        (along(Spin::I, eff.theta_i), along(Spin::S, eff.theta_s))
    }

    /// Fastest angular frequency the step rule has to resolve.
    fn fastest_frequency(&self) -> f64 {
        let eff = effective_field(self.rf);
        (eff.omega1_ie + eff.omega1_se).max(2.0 * self.spin.omega_r)
    }
}

/// `H(t) = ω1I·I_y + ω1S·S_y + ΔωI·I_z + ΔωS·S_z + 2·d(t)·I_z·S_z`.
pub fn hamiltonian_at(cond: &CpConditions, t: f64) -> SpinOperator {
    let ops = Operators::get();
    let d_t = dipolar_coupling_at(cond.coupling, cond.orient, cond.spin, t);
    let rf = &cond.rf;
    let m = ops.iy * c(rf.omega1_i, 0.0)
        + ops.sy * c(rf.omega1_s, 0.0)
        + ops.iz * c(rf.offset_i, 0.0)
        + ops.sz * c(rf.offset_s, 0.0)
        + ops.izsz * c(2.0 * d_t, 0.0);
    SpinOperator(m)
}

struct Operators {
    iy: Matrix4c,
    sy: Matrix4c,
    iz: Matrix4c,
    sz: Matrix4c,
    izsz: Matrix4c,
}

impl Operators {
    fn get() -> Self {
        let iy = SpinOperator::single(Spin::I, Axis::Y).0;
        let sy = SpinOperator::single(Spin::S, Axis::Y).0;
        let iz = SpinOperator::single(Spin::I, Axis::Z).0;
        let sz = SpinOperator::single(Spin::S, Axis::Z).0;
        Self {
            iy,
            sy,
            iz,
            sz,
            izsz: iz * sz,
        }
    }
}

/// `exp(−i·h·dt)` for Hermitian `h`, via eigendecomposition.
pub fn matrix_exponential_step(h: &SpinOperator, dt: f64) -> Result<SpinOperator> {
    let asym = h.hermitian_asymmetry();
    if asym > HERMITIAN_TOL * h.max_norm().max(1.0) {
        return Err(Error::NonHermitian { asymmetry: asym });
    }
    Ok(SpinOperator(expm_hermitian4(&h.0, dt)))
}

fn expm_hermitian4(h: &Matrix4c, dt: f64) -> Matrix4c {
    // symmetrize so the eigensolver sees an exactly Hermitian input
    let herm = (h + h.adjoint()) * c(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let q = &eig.eigenvectors;
    let mut scaled = *q;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let phase = Complex64::from_polar(1.0, -lambda * dt);
        for r in 0..4 {
            scaled[(r, k)] *= phase;
        }
    }
    scaled * q.adjoint()
}

fn expm_hermitian2(h: &Matrix2c, dt: f64) -> Matrix2c {
    let herm = (h + h.adjoint()) * c(0.5, 0.0);
    let eig = SymmetricEigen::new(herm);
    let q = &eig.eigenvectors;
    let mut scaled = *q;
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let phase = Complex64::from_polar(1.0, -lambda * dt);
        for r in 0..2 {
            scaled[(r, k)] *= phase;
        }
    }
    scaled * q.adjoint()
}

/// Expectation values sampled on a time grid.
///
/// All three series are divided by the same normalization, chosen so that
/// the initial I polarization reads 1. With `ρ(0) = I_y` the S signal is then
/// directly comparable to the transfer efficiency η, `|⟨S_y⟩| ≤ 1`, and
/// `⟨σ_y^Σ⟩(0) = ½`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub sy: Vec<f64>,
    pub iy: Vec<f64>,
    pub dq_y: Vec<f64>,
}

/// Number of substeps per grid interval demanded by the step rule
/// (≥ 50 steps per period of `max(ω1Ie + ω1Se, 2ω_r)`).
pub fn required_substeps(cond: &CpConditions, dt: f64) -> usize {
    let f_max = cond.fastest_frequency() / TAU;
    let ratio = dt * STEPS_PER_PERIOD * f_max;
    ((ratio - 1e-9).ceil() as usize).max(1)
}

/// Advances `rho` by `n_steps` midpoint steps of length `step` starting at `t0`.
pub fn evolve(
    rho: &DensityMatrix,
    cond: &CpConditions,
    t0: f64,
    step: f64,
    n_steps: usize,
) -> DensityMatrix {
    let mut rho = rho.clone();
    for j in 0..n_steps {
        let t_mid = t0 + (j as f64 + 0.5) * step;
        let u = expm_hermitian4(&hamiltonian_at(cond, t_mid).0, step);
        rho.transform(&u);
    }
    rho
}

fn run(
    rho0: &DensityMatrix,
    cond: &CpConditions,
    grid: &TimeGrid,
    substeps: usize,
    observables: &[SpinOperator; 3],
    norm: f64,
) -> Result<[Vec<f64>; 3]> {
    let required = required_substeps(cond, grid.dt());
    if substeps < required {
        return Err(Error::StepRule {
            required,
            given: substeps,
        });
    }
    let step = grid.dt() / substeps as f64;
    let mut out: [Vec<f64>; 3] = Default::default();
    let mut rho = rho0.clone();
    for k in 0..grid.len() {
        if k > 0 {
            let t0 = grid.time(k - 1);
            for j in 0..substeps {
                let t_mid = t0 + (j as f64 + 0.5) * step;
                let u = expm_hermitian4(&hamiltonian_at(cond, t_mid).0, step);
                rho.transform(&u);
            }
        }
        for (series, op) in out.iter_mut().zip(observables) {
            series.push(rho.expectation(op) / norm);
        }
    }
    Ok(out)
}

/// Propagates `rho0` and records `⟨S_y⟩`, `⟨I_y⟩` and `⟨σ_y^Σ⟩`,
/// normalized by `Tr(I_y·ρ0)` (or not at all when that vanishes).
pub fn propagate(
    rho0: &DensityMatrix,
    cond: &CpConditions,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory> {
    let iy = SpinOperator::single(Spin::I, Axis::Y);
    let sy = SpinOperator::single(Spin::S, Axis::Y);
    let dq = dq_operator(Axis::Y);
    let n = rho0.expectation(&iy);
    let norm = if n.abs() > 1e-300 { n } else { 1.0 };
    let [sy, iy, dq_y] = run(rho0, cond, grid, substeps, &[sy, iy, dq], norm)?;
    Ok(Trajectory {
        grid: *grid,
        sy,
        iy,
        dq_y,
    })
}

/// Starts from I polarization along the I effective field and records the
/// polarizations along the effective-field axes. On resonance this is
/// identical to [`propagate`] from `I_y`.
pub fn propagate_effective(
    cond: &CpConditions,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Trajectory> {
    let (ie, se) = cond.effective_axes();
    let rho0 = DensityMatrix::from_operator(&ie);
    let dq = ie.plus(&se).scaled(0.5);
    let norm = rho0.expectation(&ie);
    let [sy, iy, dq_y] = run(&rho0, cond, grid, substeps, &[se, ie, dq], norm)?;
    Ok(Trajectory {
        grid: *grid,
        sy,
        iy,
        dq_y,
    })
}

/// `⟨S_y⟩` from `ρ(0) = I_y` evolved separately in the ZQ and DQ blocks.
/// Only valid on resonance, where the Hamiltonian is block diagonal.
pub fn propagate_blockwise(
    cond: &CpConditions,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<Vec<f64>> {
    if !cond.rf.is_on_resonance() {
        return Err(Error::OffResonanceBlocks);
    }
    let required = required_substeps(cond, grid.dt());
    if substeps < required {
        return Err(Error::StepRule {
            required,
            given: substeps,
        });
    }
    let rho0 = to_y_basis(&SpinOperator::single(Spin::I, Axis::Y).0);
    let sy = to_y_basis(&SpinOperator::single(Spin::S, Axis::Y).0);
    let mut zq = block(&rho0, ZQ);
    let mut dq = block(&rho0, DQ);
    let (sy_zq, sy_dq) = (block(&sy, ZQ), block(&sy, DQ));
    let step = grid.dt() / substeps as f64;
    let mut out = Vec::with_capacity(grid.len());
    for k in 0..grid.len() {
        if k > 0 {
            let t0 = grid.time(k - 1);
            for j in 0..substeps {
                let h = to_y_basis(&hamiltonian_at(cond, t0 + (j as f64 + 0.5) * step).0);
                let uz = expm_hermitian2(&block(&h, ZQ), step);
                let ud = expm_hermitian2(&block(&h, DQ), step);
                zq = uz * zq * uz.adjoint();
                dq = ud * dq * ud.adjoint();
            }
        }
        out.push((sy_zq * zq).trace().re + (sy_dq * dq).trace().re);
    }
    Ok(out)
}

/// `max |⟨σ_y^Σ⟩(t) − ⟨σ_y^Σ⟩(0)|`.
pub fn dq_constancy_report(traj: &Trajectory) -> f64 {
    let Some(&first) = traj.dq_y.first() else {
        return 0.0;
    };
    traj.dq_y
        .iter()
        .map(|v| (v - first).abs())
        .fold(0.0, f64::max)
}

// --- ZQ/DQ decomposition -------------------------------------------------

/// Columns are the y-quantized states |++⟩, |+−⟩, |−+⟩, |−−⟩.
fn y_basis() -> Matrix4c {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let v = Matrix2c::new(c(s, 0.0), c(s, 0.0), c(0.0, s), c(0.0, -s));
    kron(&v, &v)
}

fn to_y_basis(m: &Matrix4c) -> Matrix4c {
    let v = y_basis();
    v.adjoint() * m * v
}

fn from_y_basis(m: &Matrix4c) -> Matrix4c {
    let v = y_basis();
    v * m * v.adjoint()
}

fn block(m: &Matrix4c, idx: [usize; 2]) -> Matrix2c {
    Matrix2c::from_fn(|r, col| m[(idx[r], idx[col])])
}

fn embed(b: &Matrix2c, idx: [usize; 2]) -> Matrix4c {
    let mut m = Matrix4c::zeros();
    for r in 0..2 {
        for col in 0..2 {
            m[(idx[r], idx[col])] = b[(r, col)];
        }
    }
    m
}

/// Fictitious spin-½ operator on a block, in the labelling where `y` is the
/// polarization axis and `z` the dipolar axis.
fn fictitious(axis: Axis) -> Matrix2c {
    match axis {
        Axis::X => pauli_half(Axis::Y),
        Axis::Y => pauli_half(Axis::Z),
        Axis::Z => pauli_half(Axis::X),
    }
}

/// `σ_axis^Δ` as a 4×4 operator (zero outside the ZQ block).
pub fn zq_operator(axis: Axis) -> SpinOperator {
    SpinOperator(from_y_basis(&embed(&fictitious(axis), ZQ)))
}

/// `σ_axis^Σ` as a 4×4 operator (zero outside the DQ block).
pub fn dq_operator(axis: Axis) -> SpinOperator {
    SpinOperator(from_y_basis(&embed(&fictitious(axis), DQ)))
}

/// Expansion `c_x·σ_x + c_y·σ_y + c_z·σ_z + c_1·1` of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FictitiousCoefficients {
    pub x: Complex64,
    pub y: Complex64,
    pub z: Complex64,
    pub identity: Complex64,
}

impl FictitiousCoefficients {
    fn of(b: &Matrix2c) -> Self {
        let coeff = |axis| (fictitious(axis) * b).trace() * 2.0;
        Self {
            x: coeff(Axis::X),
            y: coeff(Axis::Y),
            z: coeff(Axis::Z),
            identity: b.trace() * 0.5,
        }
    }

    fn matrix(&self) -> Matrix2c {
        fictitious(Axis::X) * self.x
            + fictitious(Axis::Y) * self.y
            + fictitious(Axis::Z) * self.z
            + Matrix2c::identity() * self.identity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZqDqComponents {
    /// ZQ block in the basis (|+−⟩, |−+⟩).
    pub zq: Matrix2c,
    /// DQ block in the basis (|++⟩, |−−⟩).
    pub dq: Matrix2c,
    pub zq_coeffs: FictitiousCoefficients,
    pub dq_coeffs: FictitiousCoefficients,
    /// Frobenius norm of the part coupling the two subspaces.
    pub remainder_norm: f64,
}

impl ZqDqComponents {
    pub fn zq_part(&self) -> SpinOperator {
        SpinOperator(from_y_basis(&embed(&self.zq_coeffs.matrix(), ZQ)))
    }

    pub fn dq_part(&self) -> SpinOperator {
        SpinOperator(from_y_basis(&embed(&self.dq_coeffs.matrix(), DQ)))
    }

    /// ZQ + DQ parts; equals the input when `remainder_norm` is zero.
    pub fn recompose(&self) -> SpinOperator {
        self.zq_part().plus(&self.dq_part())
    }
}

pub fn zq_dq_decompose(op: &SpinOperator) -> ZqDqComponents {
    let y = to_y_basis(&op.0);
    let zq = block(&y, ZQ);
    let dq = block(&y, DQ);
    let mut remainder = 0.0;
    for &r in &ZQ {
        for &col in &DQ {
            remainder += y[(r, col)].norm_sqr() + y[(col, r)].norm_sqr();
        }
    }
    ZqDqComponents {
        zq,
        dq,
        zq_coeffs: FictitiousCoefficients::of(&zq),
        dq_coeffs: FictitiousCoefficients::of(&dq),
        remainder_norm: remainder.sqrt(),
    }
}

// --- trajectory analysis -------------------------------------------------

/// Times at which `samples − level` changes sign, linearly interpolated.
pub fn level_crossings(samples: &[f64], dt: f64, level: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for (k, w) in samples.windows(2).enumerate() {
        let (a, b) = (w[0] - level, w[1] - level);
        if a == 0.0 {
            if k > 0 {
                out.push(k as f64 * dt);
            }
        } else if a * b < 0.0 {
            out.push((k as f64 + a / (a - b)) * dt);
        }
    }
    out
}

/// Angular frequency of an oscillation about `level`, from the spacing of
/// its first and last crossings. `None` with fewer than two crossings.
pub fn oscillation_frequency(samples: &[f64], dt: f64, level: f64) -> Option<f64> {
    let x = level_crossings(samples, dt, level);
    (x.len() >= 2).then(|| std::f64::consts::PI * (x.len() - 1) as f64 / (x[x.len() - 1] - x[0]))
}

/// First time `samples` reaches `level` from below, linearly interpolated.
pub fn first_rise_through(samples: &[f64], dt: f64, level: f64) -> Option<f64> {
    samples.windows(2).enumerate().find_map(|(k, w)| {
        (w[0] < level && w[1] >= level).then(|| (k as f64 + (level - w[0]) / (w[1] - w[0])) * dt)
    })
}
