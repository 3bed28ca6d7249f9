//! Orientation ensembles and powder averaging.
//!
//! Weights are normalized to sum to one, so the average of a constant is that
//! constant. Averages are reduced deterministically: per-orientation curves
//! may be computed in parallel, but the sum always runs over the entries in
//! canonical order (sorted by β, then γ, then weight) with Neumaier
//! compensated summation. The result is therefore bit-identical across runs,
//! thread counts and permutations of the set.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::analytic::{CpCurve, CurveKind};
use crate::coupling::{Orientation, TimeGrid};
use crate::{Error, Result};

/// Sizes of the equal-weight low-discrepancy sets; level `L` has
/// `ZCW_SIZES[L - 1]` points. Each size is a Fibonacci number.
pub const ZCW_SIZES: [usize; 16] = [
    21, 34, 55, 89, 144, 233, 377, 610, 987, 1597, 2584, 4181, 6765, 10946, 17711, 28657,
];

/// Smallest level with at least 610 points; used by default for fitting.
pub const DEFAULT_ZCW_LEVEL: usize = 8;

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    entries: Vec<(Orientation, f64)>,
}

impl OrientationSet {
    /// Builds a set from positive weights, normalizing them to sum to one.
    pub fn new(entries: Vec<(Orientation, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("orientation set", "must not be empty"));
        }
        if entries.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid(
                "orientation set",
                "weights must be finite and > 0",
            ));
        }
        let total = neumaier_sum(entries.iter().map(|(_, w)| *w));
        let entries = entries.into_iter().map(|(o, w)| (o, w / total)).collect();
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(Orientation, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        neumaier_sum(self.entries.iter().map(|(_, w)| *w))
    }

    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| {
            let (oa, wa) = self.entries[a];
            let (ob, wb) = self.entries[b];
            oa.beta()
                .total_cmp(&ob.beta())
                .then(oa.gamma().total_cmp(&ob.gamma()))
                .then(wa.total_cmp(&wb))
                .then(Ordering::Equal)
        });
        idx
    }

    /// Weighted mean of a scalar function of orientation.
    pub fn mean<F>(&self, f: F) -> f64
    where
        F: Fn(Orientation) -> f64,
    {
        let mut acc = Neumaier::default();
        for i in self.canonical_order() {
            let (o, w) = self.entries[i];
            acc.add(w * f(o));
        }
        acc.total()
    }
}

/// Midpoint grid `β_i = (i+½)π/n_beta`, `γ_j = (j+½)2π/n_gamma`, weights ∝ sin β_i.
pub fn grid_orientation_set(n_beta: usize, n_gamma: usize) -> Result<OrientationSet> {
    if n_beta == 0 || n_gamma == 0 {
        return Err(Error::invalid(
            "grid counts",
            "n_beta and n_gamma must be ≥ 1",
        ));
    }
    let mut entries = Vec::with_capacity(n_beta * n_gamma);
    for i in 0..n_beta {
        let beta = (i as f64 + 0.5) * PI / n_beta as f64;
        let w = beta.sin();
        for j in 0..n_gamma {
            let gamma = (j as f64 + 0.5) * TAU / n_gamma as f64;
            entries.push((Orientation::new(beta, gamma)?, w));
        }
    }
    OrientationSet::new(entries)
}

/// Equal-weight Zaremba–Conroy–Wolfsberg set over the full sphere.
///
/// With `N = F_k` and `g = F_(k−2)`, point `j` has `cos β_j = 1 − 2(j+½)/N`
/// and `γ_j = 2π·frac(j·g/N)`.
pub fn zcw_orientation_set(level: usize) -> Result<OrientationSet> {
    if level == 0 || level > ZCW_SIZES.len() {
        return Err(Error::UnsupportedLevel {
            level,
            max: ZCW_SIZES.len(),
            sizes: ZCW_SIZES.map(|n| n.to_string()).join(", "),
        });
    }
    let n = ZCW_SIZES[level - 1];
    let g = fibonacci_two_below(n);
    let entries = (0..n)
        .map(|j| {
            let cos_b = 1.0 - 2.0 * (j as f64 + 0.5) / n as f64;
            let frac = ((j * g) % n) as f64 / n as f64;
            Orientation::new(cos_b.clamp(-1.0, 1.0).acos(), TAU * frac).map(|o| (o, 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    OrientationSet::new(entries)
}

fn fibonacci_two_below(n: usize) -> usize {
    let (mut a, mut b, mut c) = (1usize, 1usize, 2usize);
    while c < n {
        (a, b, c) = (b, c, b + c);
    }
    debug_assert_eq!(c, n);
    a
}

/// How to build an ensemble; parses `grid:NxM` and `zcw:L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrientationSetSpec {
    Grid { n_beta: usize, n_gamma: usize },
    Zcw { level: usize },
}

impl Default for OrientationSetSpec {
    fn default() -> Self {
        OrientationSetSpec::Zcw {
            level: DEFAULT_ZCW_LEVEL,
        }
    }
}

impl OrientationSetSpec {
    pub fn build(self) -> Result<OrientationSet> {
        match self {
            OrientationSetSpec::Grid { n_beta, n_gamma } => grid_orientation_set(n_beta, n_gamma),
            OrientationSetSpec::Zcw { level } => zcw_orientation_set(level),
        }
    }
}

impl fmt::Display for OrientationSetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrientationSetSpec::Grid { n_beta, n_gamma } => write!(f, "grid:{n_beta}x{n_gamma}"),
            OrientationSetSpec::Zcw { level } => write!(f, "zcw:{level}"),
        }
    }
}

impl FromStr for OrientationSetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("orientation set", format!("`{s}` is not grid:NxM or zcw:L"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind.trim() {
            "grid" => {
                let (a, b) = rest.split_once(['x', 'X']).ok_or_else(bad)?;
                let n_beta = a.trim().parse().map_err(|_| bad())?;
                let n_gamma = b.trim().parse().map_err(|_| bad())?;
                if n_beta == 0 || n_gamma == 0 {
                    return Err(bad());
                }
                Ok(OrientationSetSpec::Grid { n_beta, n_gamma })
            }
            "zcw" => {
                let level = rest.trim().parse().map_err(|_| bad())?;
                if level == 0 || level > ZCW_SIZES.len() {
                    return Err(Error::UnsupportedLevel {
                        level,
                        max: ZCW_SIZES.len(),
                        sizes: ZCW_SIZES.map(|n| n.to_string()).join(", "),
                    });
                }
                Ok(OrientationSetSpec::Zcw { level })
            }
            _ => Err(bad()),
        }
    }
}

/// Weighted pointwise average of per-orientation sample vectors.
///
/// Every call to `f` must return the same number of samples.
pub fn powder_average_values<F>(f: F, set: &OrientationSet) -> Result<Vec<f64>>
where
    F: Fn(Orientation) -> Vec<f64> + Sync,
{
    let order = set.canonical_order();
    let mut acc: Vec<Neumaier> = Vec::new();
    for chunk in order.chunks(CHUNK) {
        let rows: Vec<Vec<f64>> = chunk.par_iter().map(|&i| f(set.entries[i].0)).collect();
        for (&i, row) in chunk.iter().zip(rows) {
            if acc.is_empty() {
                acc = vec![Neumaier::default(); row.len()];
            } else if acc.len() != row.len() {
                return Err(Error::GridMismatch);
            }
            let w = set.entries[i].1;
            for (a, v) in acc.iter_mut().zip(row) {
                a.add(w * v);
            }
        }
    }
    Ok(acc.into_iter().map(|a| a.total()).collect())
}

/// Powder average of CP curves; all curves must share one grid and kind.
pub fn powder_average<F>(per_orientation_curve: F, set: &OrientationSet) -> Result<CpCurve>
where
    F: Fn(Orientation) -> CpCurve + Sync,
{
    let order = set.canonical_order();
    let mut shape: Option<(TimeGrid, CurveKind)> = None;
    let mut acc: Vec<Neumaier> = Vec::new();
    for chunk in order.chunks(CHUNK) {
        let curves: Vec<CpCurve> = chunk
            .par_iter()
            .map(|&i| per_orientation_curve(set.entries[i].0))
            .collect();
        for (&i, curve) in chunk.iter().zip(curves) {
            match shape {
                None => {
                    shape = Some((*curve.grid(), curve.kind()));
                    acc = vec![Neumaier::default(); curve.values().len()];
                }
                Some((grid, kind)) => {
                    if grid != *curve.grid() || kind != curve.kind() {
                        return Err(Error::GridMismatch);
                    }
                }
            }
            let w = set.entries[i].1;
            for (a, v) in acc.iter_mut().zip(curve.values()) {
                a.add(w * v);
            }
        }
    }
    let (grid, kind) = shape.expect("orientation sets are never empty");
    let mut values: Vec<f64> = acc.into_iter().map(|a| a.total()).collect();
    if kind == CurveKind::Efficiency {
        // a convex combination of [0, 1] values; clip the last-ulp overshoot
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
    }
    CpCurve::new(grid, values, kind)
}

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(self) -> f64 {
        self.sum + self.comp
    }
}

fn neumaier_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut acc = Neumaier::default();
    xs.for_each(|x| acc.add(x));
    acc.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::efficiency_curve;
    use crate::coupling::{CouplingParams, SpinningParams};
    use crate::units::khz_to_rad_s;

    #[test]
    fn single_cell_grid() {
        let set = grid_orientation_set(1, 1).unwrap();
        assert_eq!(set.len(), 1);
        let (o, w) = set.entries()[0];
        assert_eq!(o.beta(), PI / 2.0);
        assert_eq!(o.gamma(), PI);
        assert_eq!(w, 1.0);
    }

    #[test]
    fn weights_sum_to_one() {
        for (a, b) in [(1, 7), (3, 3), (17, 5), (64, 64)] {
            let s = grid_orientation_set(a, b).unwrap();
            assert!((s.weight_sum() - 1.0).abs() < 1e-12);
        }
        for level in 1..=ZCW_SIZES.len() {
            let s = zcw_orientation_set(level).unwrap();
            assert_eq!(s.len(), ZCW_SIZES[level - 1]);
            assert!((s.weight_sum() - 1.0).abs() < 1e-12);
            let w0 = s.entries()[0].1;
            assert!(s.entries().iter().all(|(_, w)| *w == w0));
        }
    }

    #[test]
    fn cos_squared_sphere_average() {
        let grid = grid_orientation_set(64, 64).unwrap();
        let m = grid.mean(|o| o.beta().cos().powi(2));
        assert!((m - 1.0 / 3.0).abs() < 1e-4, "{m}");
        let zcw = zcw_orientation_set(9).unwrap();
        assert!(zcw.len() >= 987);
        let m = zcw.mean(|o| o.beta().cos().powi(2));
        assert!((m - 1.0 / 3.0).abs() < 1e-3, "{m}");
    }

    #[test]
    fn zcw_covers_the_sphere() {
        let s = zcw_orientation_set(10).unwrap();
        let (mut bmin, mut bmax, mut gmin, mut gmax) = (PI, 0.0f64, TAU, 0.0f64);
        for (o, _) in s.entries() {
            bmin = bmin.min(o.beta());
            bmax = bmax.max(o.beta());
            gmin = gmin.min(o.gamma());
            gmax = gmax.max(o.gamma());
        }
        assert!(bmin < 0.1 && bmax > PI - 0.1);
        assert!(gmin < 0.1 && gmax > TAU - 0.1);
    }

    #[test]
    fn unsupported_level_lists_sizes() {
        let err = zcw_orientation_set(0).unwrap_err().to_string();
        assert!(err.contains("610"), "{err}");
        assert!(zcw_orientation_set(ZCW_SIZES.len() + 1).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "grid:64x32".parse::<OrientationSetSpec>().unwrap(),
            OrientationSetSpec::Grid {
                n_beta: 64,
                n_gamma: 32
            }
        );
        assert_eq!(
            "zcw:8".parse::<OrientationSetSpec>().unwrap(),
            OrientationSetSpec::Zcw { level: 8 }
        );
        assert!("zcw:99".parse::<OrientationSetSpec>().is_err());
        assert!("grid:0x3".parse::<OrientationSetSpec>().is_err());
        assert!("lebedev:5".parse::<OrientationSetSpec>().is_err());
        let s = OrientationSetSpec::Grid {
            n_beta: 3,
            n_gamma: 4,
        };
        assert_eq!(s.to_string().parse::<OrientationSetSpec>().unwrap(), s);
    }

    fn crystallite_curve(o: Orientation) -> CpCurve {
        efficiency_curve(
            CouplingParams::new(5000.0 * PI).unwrap(),
            o,
            SpinningParams::new(khz_to_rad_s(2.0)).unwrap(),
            TimeGrid::spanning(1e-3, 5e-6).unwrap(),
        )
    }

    #[test]
    fn singleton_average_is_identity() {
        let o = Orientation::new(1.1, 0.2).unwrap();
        let set = OrientationSet::new(vec![(o, 3.0)]).unwrap();
        let avg = powder_average(crystallite_curve, &set).unwrap();
        assert_eq!(avg, crystallite_curve(o));
    }

    #[test]
    fn constant_curve_averages_to_itself() {
        let grid = TimeGrid::new(1e-6, 5).unwrap();
        let set = grid_orientation_set(13, 7).unwrap();
        let avg = powder_average(
            |_| CpCurve::new(grid, vec![0.37; 5], CurveKind::Magnetization).unwrap(),
            &set,
        )
        .unwrap();
        for v in avg.values() {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let set = grid_orientation_set(4, 4).unwrap();
        let res = powder_average(
            |o| {
                let n = if o.beta() < 1.0 { 3 } else { 4 };
                CpCurve::new(
                    TimeGrid::new(1e-6, n).unwrap(),
                    vec![0.0; n],
                    CurveKind::Efficiency,
                )
                .unwrap()
            },
            &set,
        );
        assert!(matches!(res, Err(Error::GridMismatch)));
    }

    #[test]
    fn average_stays_in_range_and_keeps_echo_nulls() {
        let set = zcw_orientation_set(6).unwrap();
        let avg = powder_average(crystallite_curve, &set).unwrap();
        assert!(avg.values().iter().all(|v| (0.0..=1.0).contains(v)));
        // 5 µs steps: rotor echoes at index 100 and 200
        assert!(avg.values()[100] < 1e-18);
        assert!(avg.values()[200] < 1e-18);
    }

    #[test]
    fn permutation_is_bit_identical() {
        let set = grid_orientation_set(9, 11).unwrap();
        let mut shuffled = set.entries().to_vec();
        shuffled.reverse();
        shuffled.rotate_left(17);
        let other = OrientationSet { entries: shuffled };
        let a = powder_average(crystallite_curve, &set).unwrap();
        let b = powder_average(crystallite_curve, &other).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
