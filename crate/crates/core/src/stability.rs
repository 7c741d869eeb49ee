//! Stability classification of volume-constrained equilibria.
//!
//! A closed connected network conserves total volume, so an equilibrium is a
//! constrained critical point of the summed elastic energy. Its character is
//! decided entirely by the chamber stiffnesses f'(v_i): eliminating one node
//! through the volume constraint leaves the reduced Hessian
//! H = diag(f'_i, i ≠ pivot) + f'_pivot · 𝟙𝟙ᵀ, and the equilibrium is stable
//! exactly when H is positive definite. Tube conductances scale relaxation
//! rates but never flip a label, so they are not an input here.
//!
//! Two equivalent tests are provided: leading principal minors of H in closed
//! form, and a count of spinodal-branch nodes with a stiffness-reciprocal sum
//! deciding the single-spinodal case. Both populate the same report and must
//! agree away from marginal inputs.

use crate::bistable::{BinaryState, BistableLaw};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold below which a minor, eigenvalue, or reciprocal sum is
/// reported as marginal instead of being trusted for a sign.
const MARGINAL_REL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum StabilityError {
    #[error("empty volume vector")]
    Empty,
    #[error("marginal input: node {node} sits at a fold (v = {v})")]
    MarginalInput { node: usize, v: f64 },
    #[error("pivot {pivot} out of range for {n} nodes")]
    PivotOutOfRange { pivot: usize, n: usize },
}

/// Verdict on a volume-constrained equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityLabel {
    Stable,
    Unstable,
    Marginal,
}

/// Everything a classification run measured.
///
/// `label` carries the verdict of whichever criterion produced the report;
/// the remaining fields let a caller audit it or apply the other criterion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub label: StabilityLabel,
    /// Number of chambers strictly inside the falling branch.
    pub spinodal_count: usize,
    /// Leading principal minors of the reduced Hessian, pivoting the last
    /// node; all positive exactly when the equilibrium is stable.
    pub minors: Vec<f64>,
    /// Smallest eigenvalue of the reduced Hessian. Absent for a single
    /// chamber (the constraint leaves no degrees of freedom) and for inputs
    /// at a fold, where the stiffness is ambiguous.
    pub min_eigenvalue: Option<f64>,
    /// Σ 1/f'(v_i) over every node, reported when exactly one node is
    /// spinodal; the equilibrium is then stable iff the sum is negative.
    pub inverse_stiffness_sum: Option<f64>,
    /// Nodes within tolerance of a fold volume. Non-empty forces Marginal.
    pub fold_nodes: Vec<usize>,
}

/// Reduced Hessian of the constrained energy at `v`, eliminating `pivot`.
///
/// H = diag(f'_i, i ≠ pivot) + f'_pivot · 𝟙𝟙ᵀ, an (n−1)×(n−1) symmetric
/// matrix (0×0 for a single chamber). Fold volumes carry no well-defined
/// stiffness and are rejected.
pub fn reduced_hessian(
    v: &DVector<f64>,
    law: &BistableLaw,
    pivot: usize,
) -> Result<DMatrix<f64>, StabilityError> {
    let n = v.nrows();
    if n == 0 {
        return Err(StabilityError::Empty);
    }
    if pivot >= n {
        return Err(StabilityError::PivotOutOfRange { pivot, n });
    }
    for i in 0..n {
        if law.is_fold(v[i]) {
            return Err(StabilityError::MarginalInput { node: i, v: v[i] });
        }
    }
    let others: Vec<usize> = (0..n).filter(|&i| i != pivot).collect();
    let fp = law.stiffness(v[pivot]);
    let mut h = DMatrix::<f64>::from_element(n - 1, n - 1, fp);
    for (k, &i) in others.iter().enumerate() {
        h[(k, k)] += law.stiffness(v[i]);
    }
    Ok(h)
}

/// Shared measurements behind both criteria.
struct Measurements {
    spinodal_count: usize,
    minors: Vec<f64>,
    min_eigenvalue: Option<f64>,
    reciprocal_sum: f64,
    reciprocal_scale: f64,
    fold_nodes: Vec<usize>,
}

fn measure(v: &DVector<f64>, law: &BistableLaw) -> Result<Measurements, StabilityError> {
    let n = v.nrows();
    if n == 0 {
        return Err(StabilityError::Empty);
    }
    let fold_nodes: Vec<usize> = (0..n).filter(|&i| law.is_fold(v[i])).collect();
    let stiffness: Vec<f64> = v.iter().map(|&vi| law.stiffness(vi)).collect();
    let spinodal_count = v
        .iter()
        .filter(|&&vi| law.classify(vi) == BinaryState::Spinodal)
        .count();

    // Leading principal minors of H with the last node as pivot:
    // M_y = [Π_{i≤y} f'_i] · [1 + f'_pivot Σ_{i≤y} 1/f'_i].
    let fp = stiffness[n - 1];
    let mut minors = Vec::with_capacity(n.saturating_sub(1));
    let mut prod = 1.0;
    let mut recip = 0.0;
    for &s in &stiffness[..n - 1] {
        prod *= s;
        recip += 1.0 / s;
        minors.push(prod * (1.0 + fp * recip));
    }

    let min_eigenvalue = if n >= 2 && fold_nodes.is_empty() {
        let h = reduced_hessian(v, law, n - 1)?;
        Some(h.symmetric_eigenvalues().min())
    } else {
        None
    };

    let reciprocal_sum: f64 = stiffness.iter().map(|s| 1.0 / s).sum();
    let reciprocal_scale: f64 = stiffness.iter().map(|s| 1.0 / s.abs()).sum();

    Ok(Measurements {
        spinodal_count,
        minors,
        min_eigenvalue,
        reciprocal_sum,
        reciprocal_scale,
        fold_nodes,
    })
}

fn report(m: Measurements, label: StabilityLabel) -> StabilityReport {
    StabilityReport {
        label,
        spinodal_count: m.spinodal_count,
        inverse_stiffness_sum: if m.spinodal_count == 1 {
            Some(m.reciprocal_sum)
        } else {
            None
        },
        minors: m.minors,
        min_eigenvalue: m.min_eigenvalue,
        fold_nodes: m.fold_nodes,
    }
}

/// Classify by the signs of the reduced-Hessian leading principal minors.
///
/// Stable iff every minor is positive; any minor within `1e-10` of zero
/// relative to the largest, or any chamber at a fold, yields Marginal.
pub fn minors_criterion(
    v: &DVector<f64>,
    law: &BistableLaw,
) -> Result<StabilityReport, StabilityError> {
    let m = measure(v, law)?;
    let scale = m.minors.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
    let label = if !m.fold_nodes.is_empty()
        || m.minors.iter().any(|&x| x.abs() < MARGINAL_REL * scale)
    {
        StabilityLabel::Marginal
    } else if m.minors.iter().all(|&x| x > 0.0) {
        StabilityLabel::Stable
    } else {
        StabilityLabel::Unstable
    };
    Ok(report(m, label))
}

/// Classify by counting spinodal chambers.
///
/// None → stable; two or more → unstable; exactly one → stable iff
/// Σ 1/f'(v_i) over every node is negative.
pub fn spinodal_rule(
    v: &DVector<f64>,
    law: &BistableLaw,
) -> Result<StabilityReport, StabilityError> {
    let m = measure(v, law)?;
    let label = if !m.fold_nodes.is_empty() {
        StabilityLabel::Marginal
    } else {
        match m.spinodal_count {
            0 => StabilityLabel::Stable,
            1 => {
                if m.reciprocal_sum.abs() < MARGINAL_REL * m.reciprocal_scale.max(1.0) {
                    StabilityLabel::Marginal
                } else if m.reciprocal_sum < 0.0 {
                    StabilityLabel::Stable
                } else {
                    StabilityLabel::Unstable
                }
            }
            _ => StabilityLabel::Unstable,
        }
    };
    Ok(report(m, label))
}
