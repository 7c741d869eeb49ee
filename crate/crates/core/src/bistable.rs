//! Bistable pressure–volume laws for hyperelastic chambers.
//!
//! Every chamber follows a non-monotonic constitutive curve p = f(v) with three
//! segments: a rising low-volume branch (branch 0), a falling spinodal segment,
//! and a rising high-volume branch (branch 1). The two fold points
//! (v_max, p_max) and (v_min, p_min) separate the segments, with
//! v_max < v_min and p_max > p_min. Inside the pressure window
//! (p_min, p_max) both stable branches are available, which is what gives a
//! chamber its one bit of mechanical memory.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fold-point coincidence tolerance: a pressure closer than this to a fold is
/// treated as sitting exactly on the fold.
pub const FOLD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LawError {
    #[error("volume {0} is negative")]
    NegativeVolume(f64),
    #[error("pressure {p} is outside the range of branch {branch:?}")]
    BranchInfeasible { p: f64, branch: Branch },
    #[error("pressure {0} is outside the spinodal range")]
    SpinodalInfeasible(f64),
    #[error("invalid law: {0}")]
    Invalid(String),
}

/// One of the two rising (stable) segments of the law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Low-volume branch, domain [0, v_max].
    Zero,
    /// High-volume branch, domain [v_min, ∞).
    One,
}

/// Ternary classification of a chamber volume.
///
/// `State0` iff v ≤ v_max, `State1` iff v ≥ v_min, `Spinodal` strictly between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryState {
    State0,
    Spinodal,
    State1,
}

impl BinaryState {
    /// Collapses to the binary label used by the learning rules: 1 iff on branch 1.
    pub fn as_bit(self) -> bool {
        matches!(self, BinaryState::State1)
    }
}

/// Piecewise-linear law with a single linear segment per branch.
///
/// Branch 0: p = p_max + slope0·(v − v_max) on [0, v_max].
/// Spinodal: straight line between the folds on (v_max, v_min).
/// Branch 1: p = p_min + slope1·(v − v_min) on [v_min, ∞).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrilinearLaw {
    pub v_max: f64,
    pub p_max: f64,
    pub v_min: f64,
    pub p_min: f64,
    pub slope0: f64,
    pub slope1: f64,
}

/// Tabulated law: three strictly monotone sample tables joined at the folds.
///
/// Each entry is a `[v, p]` pair. Within a table the curve is interpolated
/// linearly; past the last branch-1 sample it is extrapolated with the final
/// segment slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableLaw {
    pub branch0: Vec<[f64; 2]>,
    pub spinodal: Vec<[f64; 2]>,
    pub branch1: Vec<[f64; 2]>,
}

/// A bistable constitutive law, either analytic or tabulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BistableLaw {
    Trilinear(TrilinearLaw),
    Table(TableLaw),
}

impl Default for BistableLaw {
    fn default() -> Self {
        BistableLaw::default_trilinear()
    }
}

impl BistableLaw {
    /// Default trilinear law: folds at (5, 5) and (9, 2), branch slopes 1 and 0.5.
    ///
    /// Branch 0 is then simply p = v, so round numbers stay round in tests.
    pub fn default_trilinear() -> Self {
        BistableLaw::Trilinear(TrilinearLaw {
            v_max: 5.0,
            p_max: 5.0,
            v_min: 9.0,
            p_min: 2.0,
            slope0: 1.0,
            slope1: 0.5,
        })
    }

    /// Tabulated balloon-style law: bistable window 0.8–1.1 Pa, snap-up near
    /// 2.55 cc, snap-down near 22 cc. Shaped like a rubber balloon's
    /// inflation curve: steep initial rise, long shallow plateau, restiffening.
    pub fn balloon_like() -> Self {
        let law = BistableLaw::Table(TableLaw {
            branch0: vec![
                [0.0, 0.0],
                [0.5, 0.35],
                [1.0, 0.62],
                [1.5, 0.83],
                [2.0, 0.99],
                [2.55, 1.1],
            ],
            spinodal: vec![
                [2.55, 1.1],
                [5.0, 1.02],
                [9.0, 0.95],
                [14.0, 0.88],
                [18.0, 0.83],
                [22.0, 0.8],
            ],
            branch1: vec![
                [22.0, 0.8],
                [26.0, 0.95],
                [30.0, 1.3],
                [34.0, 1.9],
                [38.0, 2.8],
                [42.0, 4.0],
            ],
        });
        law.validate().expect("builtin law is well formed");
        law
    }

    /// Checks the shape constraints; every loader must call this on laws that
    /// arrive from files.
    pub fn validate(&self) -> Result<(), LawError> {
        match self {
            BistableLaw::Trilinear(t) => t.validate(),
            BistableLaw::Table(t) => t.validate(),
        }
    }

    /// Volume at the first fold (end of branch 0).
    pub fn v_max(&self) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => t.v_max,
            BistableLaw::Table(t) => t.branch0.last().unwrap()[0],
        }
    }

    /// Pressure at the first fold (local maximum of the law).
    pub fn p_max(&self) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => t.p_max,
            BistableLaw::Table(t) => t.branch0.last().unwrap()[1],
        }
    }

    /// Volume at the second fold (start of branch 1).
    pub fn v_min(&self) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => t.v_min,
            BistableLaw::Table(t) => t.branch1.first().unwrap()[0],
        }
    }

    /// Pressure at the second fold (local minimum of the law).
    pub fn p_min(&self) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => t.p_min,
            BistableLaw::Table(t) => t.branch1.first().unwrap()[1],
        }
    }

    /// Both fold points as ((v_max, p_max), (v_min, p_min)).
    pub fn fold_points(&self) -> ((f64, f64), (f64, f64)) {
        (
            (self.v_max(), self.p_max()),
            (self.v_min(), self.p_min()),
        )
    }

    /// Chamber pressure at volume v. Errors on negative volume.
    pub fn pressure(&self, v: f64) -> Result<f64, LawError> {
        if v < 0.0 {
            return Err(LawError::NegativeVolume(v));
        }
        Ok(self.pressure_extended(v))
    }

    /// Pressure with the first and last segments extended linearly, so trial
    /// integrator states slightly outside the physical domain still evaluate.
    pub fn pressure_extended(&self, v: f64) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => {
                if v <= t.v_max {
                    t.p_max + t.slope0 * (v - t.v_max)
                } else if v < t.v_min {
                    let s = (t.p_min - t.p_max) / (t.v_min - t.v_max);
                    t.p_max + s * (v - t.v_max)
                } else {
                    t.p_min + t.slope1 * (v - t.v_min)
                }
            }
            BistableLaw::Table(t) => {
                if v <= t.branch0.last().unwrap()[0] {
                    interp_extend(&t.branch0, v)
                } else if v < t.branch1.first().unwrap()[0] {
                    interp_extend(&t.spinodal, v)
                } else {
                    interp_extend(&t.branch1, v)
                }
            }
        }
    }

    /// Slope of the law at v. At a fold the ambiguity is resolved toward the
    /// adjacent stable branch, so the returned slope is always the one a
    /// settled chamber would feel.
    pub fn stiffness(&self, v: f64) -> f64 {
        match self {
            BistableLaw::Trilinear(t) => {
                if v <= t.v_max {
                    t.slope0
                } else if v < t.v_min {
                    (t.p_min - t.p_max) / (t.v_min - t.v_max)
                } else {
                    t.slope1
                }
            }
            BistableLaw::Table(t) => {
                if v <= t.branch0.last().unwrap()[0] {
                    segment_slope(&t.branch0, v)
                } else if v < t.branch1.first().unwrap()[0] {
                    segment_slope(&t.spinodal, v)
                } else {
                    segment_slope(&t.branch1, v)
                }
            }
        }
    }

    /// True when v lies within `FOLD_TOL` of either fold volume.
    pub fn is_fold(&self, v: f64) -> bool {
        (v - self.v_max()).abs() <= FOLD_TOL || (v - self.v_min()).abs() <= FOLD_TOL
    }

    /// Ternary state of a chamber at volume v.
    pub fn classify(&self, v: f64) -> BinaryState {
        if v <= self.v_max() {
            BinaryState::State0
        } else if v >= self.v_min() {
            BinaryState::State1
        } else {
            BinaryState::Spinodal
        }
    }

    /// Binary label used by the learning rules: true iff the chamber sits on
    /// branch 1.
    pub fn binary(&self, v: f64) -> bool {
        self.classify(v).as_bit()
    }

    /// Volume on the requested stable branch at pressure p.
    ///
    /// Branch 0 accepts p ∈ [f(0), p_max]; branch 1 accepts p ≥ p_min
    /// (extrapolating past the last table sample for tabulated laws).
    pub fn inverse_branch(&self, p: f64, branch: Branch) -> Result<f64, LawError> {
        match self {
            BistableLaw::Trilinear(t) => match branch {
                Branch::Zero => {
                    let p_floor = t.p_max - t.slope0 * t.v_max;
                    if p < p_floor - FOLD_TOL || p > t.p_max + FOLD_TOL {
                        return Err(LawError::BranchInfeasible { p, branch });
                    }
                    Ok(((p - t.p_max) / t.slope0 + t.v_max).clamp(0.0, t.v_max))
                }
                Branch::One => {
                    if p < t.p_min - FOLD_TOL {
                        return Err(LawError::BranchInfeasible { p, branch });
                    }
                    Ok(((p - t.p_min) / t.slope1 + t.v_min).max(t.v_min))
                }
            },
            BistableLaw::Table(t) => match branch {
                Branch::Zero => {
                    let lo = t.branch0.first().unwrap()[1];
                    let hi = t.branch0.last().unwrap()[1];
                    if p < lo - FOLD_TOL || p > hi + FOLD_TOL {
                        return Err(LawError::BranchInfeasible { p, branch });
                    }
                    Ok(invert_increasing(&t.branch0, p.clamp(lo, hi)))
                }
                Branch::One => {
                    let lo = t.branch1.first().unwrap()[1];
                    if p < lo - FOLD_TOL {
                        return Err(LawError::BranchInfeasible { p, branch });
                    }
                    Ok(invert_increasing(&t.branch1, p.max(lo)))
                }
            },
        }
    }

    /// Volume on the falling spinodal segment at pressure p ∈ (p_min, p_max).
    ///
    /// Needed only when enumerating equilibria; spinodal states are never
    /// targets of the learning rules.
    pub fn inverse_spinodal(&self, p: f64) -> Result<f64, LawError> {
        if p <= self.p_min() + FOLD_TOL || p >= self.p_max() - FOLD_TOL {
            return Err(LawError::SpinodalInfeasible(p));
        }
        match self {
            BistableLaw::Trilinear(t) => {
                let s = (t.p_min - t.p_max) / (t.v_min - t.v_max);
                Ok(t.v_max + (p - t.p_max) / s)
            }
            BistableLaw::Table(t) => Ok(invert_decreasing(&t.spinodal, p)),
        }
    }

    /// Elastic energy stored at volume v: the integral of f from 0 to v.
    pub fn elastic_energy(&self, v: f64) -> Result<f64, LawError> {
        if v < 0.0 {
            return Err(LawError::NegativeVolume(v));
        }
        match self {
            BistableLaw::Trilinear(t) => {
                let seg = |a: f64, b: f64| {
                    let fa = self.pressure_extended(a);
                    let fb = self.pressure_extended(b);
                    0.5 * (fa + fb) * (b - a)
                };
                let mut e = seg(0.0, v.min(t.v_max));
                if v > t.v_max {
                    e += seg(t.v_max, v.min(t.v_min));
                }
                if v > t.v_min {
                    e += seg(t.v_min, v);
                }
                Ok(e)
            }
            BistableLaw::Table(t) => {
                let mut e = 0.0;
                let mut prev = 0.0f64;
                let mut done = false;
                for table in [&t.branch0, &t.spinodal, &t.branch1] {
                    for w in table.windows(2) {
                        let (a, b) = (w[0][0], w[1][0]);
                        if b <= prev {
                            continue;
                        }
                        let lo = prev.max(a);
                        let hi = v.min(b);
                        if hi > lo {
                            e += 0.5
                                * (self.pressure_extended(lo) + self.pressure_extended(hi))
                                * (hi - lo);
                            prev = hi;
                        }
                        if v <= b {
                            done = true;
                            break;
                        }
                    }
                    if done {
                        break;
                    }
                }
                if !done && v > prev {
                    // Past the table: trapezoid on the extrapolated tail.
                    e += 0.5 * (self.pressure_extended(prev) + self.pressure_extended(v)) * (v - prev);
                }
                Ok(e)
            }
        }
    }
}

impl TrilinearLaw {
    fn validate(&self) -> Result<(), LawError> {
        if !(self.v_max > 0.0) {
            return Err(LawError::Invalid(format!("v_max must be positive, got {}", self.v_max)));
        }
        if !(self.v_min > self.v_max) {
            return Err(LawError::Invalid(format!(
                "fold volumes must satisfy v_max < v_min, got {} and {}",
                self.v_max, self.v_min
            )));
        }
        if !(self.p_max > self.p_min) {
            return Err(LawError::Invalid(format!(
                "fold pressures must satisfy p_min < p_max, got {} and {}",
                self.p_min, self.p_max
            )));
        }
        if !(self.slope0 > 0.0) || !(self.slope1 > 0.0) {
            return Err(LawError::Invalid(format!(
                "branch slopes must be positive, got {} and {}",
                self.slope0, self.slope1
            )));
        }
        Ok(())
    }
}

impl TableLaw {
    fn validate(&self) -> Result<(), LawError> {
        check_monotone(&self.branch0, "branch0", true)?;
        check_monotone(&self.spinodal, "spinodal", false)?;
        check_monotone(&self.branch1, "branch1", true)?;
        let b0 = self.branch0.first().unwrap();
        if b0[0].abs() > FOLD_TOL {
            return Err(LawError::Invalid(format!(
                "branch0 must start at v = 0, got {}",
                b0[0]
            )));
        }
        let join = |a: &[f64; 2], b: &[f64; 2], name: &str| {
            if (a[0] - b[0]).abs() > 1e-9 || (a[1] - b[1]).abs() > 1e-9 {
                Err(LawError::Invalid(format!(
                    "tables must join continuously at the {name} fold"
                )))
            } else {
                Ok(())
            }
        };
        join(self.branch0.last().unwrap(), self.spinodal.first().unwrap(), "(v_max, p_max)")?;
        join(self.spinodal.last().unwrap(), self.branch1.first().unwrap(), "(v_min, p_min)")?;
        let p_max = self.branch0.last().unwrap()[1];
        let p_min = self.branch1.first().unwrap()[1];
        if !(p_max > p_min) {
            return Err(LawError::Invalid(format!(
                "fold pressures must satisfy p_min < p_max, got {p_min} and {p_max}"
            )));
        }
        Ok(())
    }
}

fn check_monotone(table: &[[f64; 2]], name: &str, p_increasing: bool) -> Result<(), LawError> {
    if table.len() < 2 {
        return Err(LawError::Invalid(format!("{name} needs at least two samples")));
    }
    for w in table.windows(2) {
        if !(w[1][0] > w[0][0]) {
            return Err(LawError::Invalid(format!("{name} volumes must strictly increase")));
        }
        let dp = w[1][1] - w[0][1];
        if p_increasing && !(dp > 0.0) {
            return Err(LawError::Invalid(format!("{name} pressures must strictly increase")));
        }
        if !p_increasing && !(dp < 0.0) {
            return Err(LawError::Invalid(format!("{name} pressures must strictly decrease")));
        }
    }
    Ok(())
}

/// Linear interpolation over a v-sorted table, extending the end segments.
fn interp_extend(table: &[[f64; 2]], v: f64) -> f64 {
    let k = match table.iter().position(|s| s[0] > v) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => table.len() - 2,
    };
    let (a, b) = (table[k], table[k + 1]);
    a[1] + (b[1] - a[1]) / (b[0] - a[0]) * (v - a[0])
}

fn segment_slope(table: &[[f64; 2]], v: f64) -> f64 {
    let k = match table.iter().position(|s| s[0] > v) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => table.len() - 2,
    };
    let (a, b) = (table[k], table[k + 1]);
    (b[1] - a[1]) / (b[0] - a[0])
}

/// Inverse interpolation on a table whose pressures strictly increase,
/// extending the last segment upward.
fn invert_increasing(table: &[[f64; 2]], p: f64) -> f64 {
    let k = match table.iter().position(|s| s[1] > p) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => table.len() - 2,
    };
    let (a, b) = (table[k], table[k + 1]);
    a[0] + (b[0] - a[0]) / (b[1] - a[1]) * (p - a[1])
}

/// Inverse interpolation on a table whose pressures strictly decrease.
fn invert_decreasing(table: &[[f64; 2]], p: f64) -> f64 {
    let k = match table.iter().position(|s| s[1] < p) {
        Some(0) => 0,
        Some(k) => k - 1,
        None => table.len() - 2,
    };
    let (a, b) = (table[k], table[k + 1]);
    a[0] + (b[0] - a[0]) / (b[1] - a[1]) * (p - a[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn law() -> BistableLaw {
        BistableLaw::default_trilinear()
    }

    #[test]
    fn default_law_fold_points() {
        let ((vx, px), (vn, pn)) = law().fold_points();
        assert_eq!((vx, px), (5.0, 5.0));
        assert_eq!((vn, pn), (9.0, 2.0));
    }

    #[test]
    fn pressure_on_all_segments() {
        let l = law();
        assert_relative_eq!(l.pressure(3.0).unwrap(), 3.0);
        assert_relative_eq!(l.pressure(5.0).unwrap(), 5.0);
        assert_relative_eq!(l.pressure(7.0).unwrap(), 5.0 - 0.75 * 2.0);
        assert_relative_eq!(l.pressure(9.0).unwrap(), 2.0);
        assert_relative_eq!(l.pressure(15.0).unwrap(), 5.0);
        assert!(matches!(l.pressure(-0.1), Err(LawError::NegativeVolume(_))));
    }

    #[test]
    fn branch_inversions() {
        let l = law();
        assert_relative_eq!(l.inverse_branch(3.0, Branch::Zero).unwrap(), 3.0);
        assert_relative_eq!(l.inverse_branch(3.0, Branch::One).unwrap(), 11.0);
        assert_relative_eq!(l.inverse_branch(5.5, Branch::One).unwrap(), 16.0);
        assert_relative_eq!(l.inverse_branch(1.5, Branch::Zero).unwrap(), 1.5);
        assert!(l.inverse_branch(5.5, Branch::Zero).is_err());
        assert!(l.inverse_branch(1.5, Branch::One).is_err());
    }

    #[test]
    fn spinodal_inverse_matches_forward() {
        let l = law();
        for p in [2.3, 3.0, 4.9] {
            let v = l.inverse_spinodal(p).unwrap();
            assert!(v > 5.0 && v < 9.0);
            assert_relative_eq!(l.pressure(v).unwrap(), p, epsilon = 1e-12);
        }
        assert!(l.inverse_spinodal(1.9).is_err());
        assert!(l.inverse_spinodal(5.0).is_err());
    }

    #[test]
    fn classification_boundaries() {
        let l = law();
        assert_eq!(l.classify(5.0), BinaryState::State0);
        assert_eq!(l.classify(5.0 + 1e-9), BinaryState::Spinodal);
        assert_eq!(l.classify(9.0), BinaryState::State1);
        assert!(!l.binary(8.9));
        assert!(l.binary(9.0));
    }

    #[test]
    fn stiffness_fold_tie_break() {
        let l = law();
        assert_relative_eq!(l.stiffness(5.0), 1.0);
        assert_relative_eq!(l.stiffness(9.0), 0.5);
        assert_relative_eq!(l.stiffness(7.0), -0.75);
    }

    #[test]
    fn energy_matches_quadrature() {
        let l = law();
        for v in [0.5, 4.0, 6.5, 12.0] {
            // Midpoint quadrature oracle on a fine grid.
            let m = 200_000;
            let h = v / m as f64;
            let quad: f64 = (0..m)
                .map(|k| l.pressure_extended((k as f64 + 0.5) * h) * h)
                .sum();
            assert_relative_eq!(l.elastic_energy(v).unwrap(), quad, epsilon = 1e-6);
        }
    }

    #[test]
    fn balloon_law_honors_anchors() {
        let l = BistableLaw::balloon_like();
        let ((vx, px), (vn, pn)) = l.fold_points();
        assert_relative_eq!(vx, 2.55);
        assert_relative_eq!(px, 1.1);
        assert_relative_eq!(vn, 22.0);
        assert_relative_eq!(pn, 0.8);
        // Round-trip through each branch.
        for p in [0.2, 0.6, 1.05] {
            let v = l.inverse_branch(p, Branch::Zero).unwrap();
            assert_relative_eq!(l.pressure(v).unwrap(), p, epsilon = 1e-12);
        }
        for p in [0.85, 1.2, 3.0] {
            let v = l.inverse_branch(p, Branch::One).unwrap();
            assert_relative_eq!(l.pressure(v).unwrap(), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn table_extrapolates_past_last_sample() {
        let l = BistableLaw::balloon_like();
        // Last branch-1 segment has slope (4.0 - 2.8) / 4 = 0.3.
        assert_relative_eq!(l.pressure(46.0).unwrap(), 4.0 + 0.3 * 4.0, epsilon = 1e-12);
        let v = l.inverse_branch(5.2, Branch::One).unwrap();
        assert_relative_eq!(v, 46.0, epsilon = 1e-9);
    }

    #[test]
    fn malformed_laws_rejected() {
        let bad = BistableLaw::Trilinear(TrilinearLaw {
            v_max: 9.0,
            p_max: 5.0,
            v_min: 5.0,
            p_min: 2.0,
            slope0: 1.0,
            slope1: 0.5,
        });
        assert!(bad.validate().is_err());
        let bad = BistableLaw::Trilinear(TrilinearLaw {
            v_max: 5.0,
            p_max: 2.0,
            v_min: 9.0,
            p_min: 5.0,
            slope0: 1.0,
            slope1: 0.5,
        });
        assert!(bad.validate().is_err());
        let mut t = match BistableLaw::balloon_like() {
            BistableLaw::Table(t) => t,
            _ => unreachable!(),
        };
        t.spinodal[2][1] = 1.2; // breaks monotone decrease
        assert!(BistableLaw::Table(t).validate().is_err());
    }

    #[test]
    fn law_json_round_trip() {
        for l in [law(), BistableLaw::balloon_like()] {
            let text = serde_json::to_string(&l).unwrap();
            let back: BistableLaw = serde_json::from_str(&text).unwrap();
            assert_eq!(l, back);
        }
        let text = serde_json::to_string(&law()).unwrap();
        assert!(text.contains("\"type\":\"trilinear\""));
    }
}
