//! Steady-state pressure solvers, branch-aware volume reconstruction, and
//! equilibrium enumeration.
//!
//! At steady state the tube flows balance the injections, `W p = q`, a linear
//! system in the pressures alone. Under pure flux drives the solution is a
//! one-parameter family (the conductance matrix annihilates the uniform
//! vector); with at least one pressure clamp it is unique. Either way the
//! pressures never depend on the chamber law: the law enters only afterwards,
//! when each pressure is pulled back through a branch of f to a volume.
//!
//! Because f is non-monotone, that pullback is one-to-many. A node at
//! pressure inside the bistable window can rest on the lower branch, the
//! falling branch, or the upper branch, and the Cartesian product over nodes
//! enumerates every fixed point of the drive. Closed systems are enumerated
//! per branch assignment by root-finding the uniform pressure that meets the
//! total-volume constraint.

use crate::bistable::{BinaryState, BistableLaw, Branch, LawError, FOLD_TOL};
use crate::network::{FlowNetwork, Laplacian};
use crate::stability::{minors_criterion, StabilityReport};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Residual bound (relative to the system scale) past which a solve is
/// treated as failed rather than returned.
const RESIDUAL_REL: f64 = 1e-10;

/// Hard cap on candidate branch assignments per enumeration, 3^14.
const ENUM_CAP: usize = 4_782_969;

/// Grid intervals used to bracket roots of the closed-system volume balance.
const CLOSED_GRID: usize = 512;

/// Absolute pressure tolerance for closed-system root refinement.
const CLOSED_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SteadyStateError {
    #[error("unbalanced injections: 1ᵀq = {sum:.3e}")]
    Unbalanced { sum: f64 },
    #[error("no pressure boundary condition; pure flux drives determine pressures only up to a constant")]
    NoPressureBc,
    #[error("singular reduced system; boundary conditions do not pin every free node")]
    SingularReduced,
    #[error("enumeration too large: {count} candidate assignments exceeds the cap of {cap}")]
    EnumerationTooLarge { count: usize, cap: usize },
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Law(#[from] LawError),
}

/// Steady pressures under balanced flux drives: every member of the family
/// `particular + α·𝟙` satisfies the flow balance, because a uniform offset
/// drives no flow. `particular` is the zero-mean member.
#[derive(Debug, Clone)]
pub struct PressureFamily {
    pub particular: DVector<f64>,
}

impl PressureFamily {
    /// Family member with uniform offset α.
    pub fn with_offset(&self, alpha: f64) -> DVector<f64> {
        self.particular.map(|p| p + alpha)
    }
}

/// Solve `W p = q` for balanced injections (1ᵀq = 0).
///
/// Uses the eigendecomposition of W, inverting every mode off the kernel and
/// discarding the uniform mode. The returned family satisfies the balance to
/// within `1e-10` of the system scale.
pub fn pressures_flux_bc(
    lap: &Laplacian,
    q: &DVector<f64>,
) -> Result<PressureFamily, SteadyStateError> {
    let n = lap.n();
    if q.nrows() != n {
        return Err(SteadyStateError::BadInput(format!(
            "injection vector has {} entries for {} nodes",
            q.nrows(),
            n
        )));
    }
    let sum: f64 = q.iter().sum();
    let scale_q: f64 = q.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
    if sum.abs() > 1e-9 * scale_q {
        return Err(SteadyStateError::Unbalanced { sum });
    }

    let eig = nalgebra::linalg::SymmetricEigen::new(lap.matrix().clone());
    let lambda_max = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l));
    let kernel_tol = 1e-12 * lambda_max.max(1.0);
    let mut p = DVector::<f64>::zeros(n);
    for k in 0..n {
        let lambda = eig.eigenvalues[k];
        if lambda <= kernel_tol {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        p.axpy(u.dot(q) / lambda, &u, 1.0);
    }

    let residual = (lap.matrix() * &p - q).amax();
    if residual > RESIDUAL_REL * system_scale(lap.matrix(), &p, q) {
        return Err(SteadyStateError::SingularReduced);
    }
    Ok(PressureFamily { particular: p })
}

/// Mixed boundary conditions: pressures prescribed at some nodes, constant
/// injections at some of the remaining ones.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MixedBc {
    /// (node, pressure) clamps; at least one is required.
    pub pressure: Vec<(usize, f64)>,
    /// (node, injection rate) at free nodes; unlisted free nodes carry zero.
    pub flux: Vec<(usize, f64)>,
}

/// Solution of a mixed-boundary steady state.
#[derive(Debug, Clone)]
pub struct MixedSolution {
    /// Full-length pressure vector, clamps included.
    pub pressures: DVector<f64>,
    /// Injection each clamped node must supply to hold its pressure.
    pub clamp_fluxes: Vec<(usize, f64)>,
}

/// Solve the steady flow balance with pressure clamps and injections.
///
/// The nodes split into clamped (c), injected (i), and plain free (r) blocks;
/// eliminating the injected block from its own balance rows leaves a Schur
/// system for the plain block,
/// `p_r = (W_ri W_ii⁻¹ W_ir − W_rr)⁻¹ [(W_rc − W_ri W_ii⁻¹ W_ic) p_c + W_ri W_ii⁻¹ q_i]`,
/// after which the injected pressures and the clamp fluxes follow by back-
/// substitution. Degenerate blocks (no injections, or no plain free nodes)
/// reduce to the corresponding single-block solves.
pub fn pressures_mixed_bc(
    lap: &Laplacian,
    bc: &MixedBc,
) -> Result<MixedSolution, SteadyStateError> {
    let n = lap.n();
    let w = lap.matrix();
    if bc.pressure.is_empty() {
        return Err(SteadyStateError::NoPressureBc);
    }
    let mut clamp_of = vec![None; n];
    for &(i, p) in &bc.pressure {
        if i >= n {
            return Err(SteadyStateError::BadInput(format!("clamped node {i} out of range")));
        }
        if clamp_of[i].replace(p).is_some() {
            return Err(SteadyStateError::BadInput(format!("node {i} clamped twice")));
        }
    }
    let mut inject_of = vec![None; n];
    for &(i, q) in &bc.flux {
        if i >= n {
            return Err(SteadyStateError::BadInput(format!("injected node {i} out of range")));
        }
        if clamp_of[i].is_some() {
            return Err(SteadyStateError::BadInput(format!(
                "node {i} is pressure-clamped; its flux is an outcome, not an input"
            )));
        }
        if inject_of[i].replace(q).is_some() {
            return Err(SteadyStateError::BadInput(format!("node {i} injected twice")));
        }
    }

    let clamped: Vec<usize> = (0..n).filter(|&i| clamp_of[i].is_some()).collect();
    let injected: Vec<usize> = (0..n).filter(|&i| inject_of[i].is_some()).collect();
    let plain: Vec<usize> =
        (0..n).filter(|&i| clamp_of[i].is_none() && inject_of[i].is_none()).collect();

    let p_c = DVector::from_fn(clamped.len(), |k, _| clamp_of[clamped[k]].unwrap());
    let q_i = DVector::from_fn(injected.len(), |k, _| inject_of[injected[k]].unwrap());

    let mut p = DVector::<f64>::zeros(n);
    for (k, &i) in clamped.iter().enumerate() {
        p[i] = p_c[k];
    }

    match (injected.is_empty(), plain.is_empty()) {
        (true, true) => {}
        (true, false) => {
            // No injections: W_rr p_r = −W_rc p_c.
            let w_rr = submatrix(w, &plain, &plain);
            let w_rc = submatrix(w, &plain, &clamped);
            let p_r = solve(&w_rr, -(&w_rc * &p_c))?;
            scatter(&mut p, &plain, &p_r);
        }
        (false, true) => {
            // Every free node is injected: W_ii p_i = q_i − W_ic p_c.
            let w_ii = submatrix(w, &injected, &injected);
            let w_ic = submatrix(w, &injected, &clamped);
            let p_i = solve(&w_ii, &q_i - &w_ic * &p_c)?;
            scatter(&mut p, &injected, &p_i);
        }
        (false, false) => {
            let w_ii = submatrix(w, &injected, &injected);
            let w_ic = submatrix(w, &injected, &clamped);
            let w_ir = submatrix(w, &injected, &plain);
            let w_rr = submatrix(w, &plain, &plain);
            let w_rc = submatrix(w, &plain, &clamped);
            let w_ri = submatrix(w, &plain, &injected);

            let lu = w_ii.lu();
            let x = lu.solve(&w_ir).ok_or(SteadyStateError::SingularReduced)?;
            let z = lu.solve(&w_ic).ok_or(SteadyStateError::SingularReduced)?;
            let u = lu.solve(&q_i).ok_or(SteadyStateError::SingularReduced)?;

            let m = &w_ri * &x - &w_rr;
            let rhs = (&w_rc - &w_ri * &z) * &p_c + &w_ri * &u;
            let p_r = m.lu().solve(&rhs).ok_or(SteadyStateError::SingularReduced)?;
            let p_i = u - &z * &p_c - &x * &p_r;
            scatter(&mut p, &plain, &p_r);
            scatter(&mut p, &injected, &p_i);
        }
    }

    // Clamp fluxes from the clamped block rows, and a residual audit on the
    // free rows.
    let q_full = w * &p;
    let clamp_fluxes: Vec<(usize, f64)> = clamped.iter().map(|&i| (i, q_full[i])).collect();
    let mut q_target = DVector::<f64>::zeros(n);
    for (k, &i) in injected.iter().enumerate() {
        q_target[i] = q_i[k];
    }
    let residual = injected
        .iter()
        .chain(plain.iter())
        .map(|&i| (q_full[i] - q_target[i]).abs())
        .fold(0.0, f64::max);
    if residual > RESIDUAL_REL * system_scale(w, &p, &q_target) {
        return Err(SteadyStateError::SingularReduced);
    }
    Ok(MixedSolution { pressures: p, clamp_fluxes })
}

fn submatrix(w: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| w[(rows[r], cols[c])])
}

fn scatter(p: &mut DVector<f64>, idx: &[usize], values: &DVector<f64>) {
    for (k, &i) in idx.iter().enumerate() {
        p[i] = values[k];
    }
}

fn solve(m: &DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>, SteadyStateError> {
    m.clone().lu().solve(&rhs).ok_or(SteadyStateError::SingularReduced)
}

fn system_scale(w: &DMatrix<f64>, p: &DVector<f64>, q: &DVector<f64>) -> f64 {
    let w_inf = w
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (w_inf * p.amax() + q.amax()).max(1.0)
}

/// Outcome of resolving pressures to volumes with branch memory.
#[derive(Debug, Clone)]
pub struct BranchResolution {
    pub volumes: DVector<f64>,
    pub branches: Vec<Branch>,
    /// Nodes whose pressure landed within `FOLD_TOL` of the incumbent
    /// branch's fold; kept on the incumbent branch.
    pub fold_ambiguous: Vec<usize>,
}

/// Pull steady pressures back to chamber volumes, honoring hysteresis.
///
/// A chamber keeps its incumbent branch while the pressure stays on that
/// branch's side of the fold: below p_max on branch 0, above p_min on
/// branch 1. Crossing the fold snaps it to the other branch. A pressure
/// within `FOLD_TOL` of the incumbent's fold is flagged ambiguous and
/// resolved to the incumbent.
pub fn volumes_from_pressures(
    p: &DVector<f64>,
    law: &BistableLaw,
    incumbent: &[Branch],
) -> Result<BranchResolution, SteadyStateError> {
    let n = p.nrows();
    if incumbent.len() != n {
        return Err(SteadyStateError::BadInput(format!(
            "{} incumbent branches for {n} pressures",
            incumbent.len()
        )));
    }
    let p_max = law.p_max();
    let p_min = law.p_min();
    let mut volumes = DVector::<f64>::zeros(n);
    let mut branches = Vec::with_capacity(n);
    let mut fold_ambiguous = Vec::new();
    for i in 0..n {
        let (branch, at_fold) = match incumbent[i] {
            Branch::Zero => {
                if p[i] > p_max + FOLD_TOL {
                    (Branch::One, false)
                } else {
                    (Branch::Zero, (p[i] - p_max).abs() <= FOLD_TOL)
                }
            }
            Branch::One => {
                if p[i] < p_min - FOLD_TOL {
                    (Branch::Zero, false)
                } else {
                    (Branch::One, (p[i] - p_min).abs() <= FOLD_TOL)
                }
            }
        };
        if at_fold {
            fold_ambiguous.push(i);
        }
        volumes[i] = law.inverse_branch(p[i], branch)?;
        branches.push(branch);
    }
    Ok(BranchResolution { volumes, branches, fold_ambiguous })
}

/// One steady state: pressures consistent with the drive, the volumes
/// realizing them, each chamber's segment, and the stability verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Equilibrium {
    pub pressures: Vec<f64>,
    pub volumes: Vec<f64>,
    pub states: Vec<BinaryState>,
    pub stability: StabilityReport,
}

/// Enumerate every equilibrium compatible with pressure-clamped boundary
/// conditions (plus optional constant injections).
///
/// The pressures are fixed once by the linear solve; non-monotonicity of the
/// law then admits up to three volumes per node, and every combination is a
/// genuine fixed point. Entries are ordered lexicographically by node with
/// lower branch < falling branch < upper branch.
pub fn enumerate_pressure_bc(
    net: &FlowNetwork,
    law: &BistableLaw,
    bc: &MixedBc,
) -> Result<Vec<Equilibrium>, SteadyStateError> {
    let solution = pressures_mixed_bc(&net.laplacian(), bc)?;
    let p = &solution.pressures;
    let n = net.n();

    let mut options: Vec<Vec<(BinaryState, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut node = Vec::new();
        if let Ok(v) = law.inverse_branch(p[i], Branch::Zero) {
            node.push((BinaryState::State0, v));
        }
        if let Ok(v) = law.inverse_spinodal(p[i]) {
            node.push((BinaryState::Spinodal, v));
        }
        if let Ok(v) = law.inverse_branch(p[i], Branch::One) {
            node.push((BinaryState::State1, v));
        }
        if node.is_empty() {
            // No branch realizes this pressure statically; no equilibria.
            return Ok(Vec::new());
        }
        options.push(node);
    }

    let count = options.iter().try_fold(1usize, |acc, o| {
        acc.checked_mul(o.len()).filter(|&c| c <= ENUM_CAP)
    });
    let Some(count) = count else {
        return Err(SteadyStateError::EnumerationTooLarge { count: usize::MAX, cap: ENUM_CAP });
    };

    let mut set = Vec::with_capacity(count);
    let mut digits = vec![0usize; n];
    loop {
        let mut volumes = DVector::<f64>::zeros(n);
        let mut states = Vec::with_capacity(n);
        for i in 0..n {
            let (s, v) = options[i][digits[i]];
            volumes[i] = v;
            states.push(s);
        }
        let stability = minors_criterion(&volumes, law)
            .map_err(|e| SteadyStateError::BadInput(e.to_string()))?;
        set.push(Equilibrium {
            pressures: p.iter().copied().collect(),
            volumes: volumes.iter().copied().collect(),
            states,
            stability,
        });
        // Increment the mixed-radix counter, most significant node first.
        let mut k = n;
        loop {
            if k == 0 {
                return Ok(set);
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] < options[k].len() {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Enumerate every equilibrium of a closed system holding `total_volume`.
///
/// With no drive, steady state forces one uniform pressure, and each branch
/// assignment turns the volume constraint into a piecewise-linear scalar
/// equation in that pressure. Every assignment over {lower, falling, upper}
/// per node is scanned on a grid and each bracketed root refined by
/// bisection to `1e-12` in pressure. Capped at 14 nodes.
pub fn enumerate_closed(
    law: &BistableLaw,
    n: usize,
    total_volume: f64,
) -> Result<Vec<Equilibrium>, SteadyStateError> {
    if n == 0 {
        return Err(SteadyStateError::BadInput("no nodes".into()));
    }
    if !total_volume.is_finite() || total_volume < 0.0 {
        return Err(SteadyStateError::BadInput(format!("total volume {total_volume} invalid")));
    }
    let count = 3usize.saturating_pow(n as u32);
    if count > ENUM_CAP {
        return Err(SteadyStateError::EnumerationTooLarge { count, cap: ENUM_CAP });
    }

    let p_floor = law.pressure(0.0).expect("v = 0 is in the law domain");
    let p_max = law.p_max();
    let p_min = law.p_min();
    // A single chamber on the upper branch cannot hold more than the total,
    // which caps the candidate pressure range from above.
    let p_cap = law.pressure_extended(total_volume.max(law.v_min())) + 1.0;
    // Falling-branch preimages are open-interval only; stay clear of folds.
    let spin_gap = 10.0 * FOLD_TOL;

    let assignments: Vec<Vec<Equilibrium>> = (0..count)
        .into_par_iter()
        .map(|code| {
            let mut states = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                states.push(match c % 3 {
                    0 => BinaryState::State0,
                    1 => BinaryState::Spinodal,
                    _ => BinaryState::State1,
                });
                c /= 3;
            }
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for s in &states {
                let (l, h) = match s {
                    BinaryState::State0 => (p_floor, p_max),
                    BinaryState::Spinodal => (p_min + spin_gap, p_max - spin_gap),
                    BinaryState::State1 => (p_min, p_cap),
                };
                lo = lo.max(l);
                hi = hi.min(h);
            }
            if lo >= hi {
                return Vec::new();
            }

            let volume_at = |p: f64| -> f64 {
                states
                    .iter()
                    .map(|s| match s {
                        BinaryState::State0 => law.inverse_branch(p, Branch::Zero).unwrap(),
                        BinaryState::Spinodal => law.inverse_spinodal(p).unwrap(),
                        BinaryState::State1 => law.inverse_branch(p, Branch::One).unwrap(),
                    })
                    .sum()
            };
            let gap = |p: f64| volume_at(p) - total_volume;

            let mut roots: Vec<f64> = Vec::new();
            let mut prev_p = lo;
            let mut prev_g = gap(lo);
            for k in 1..=CLOSED_GRID {
                let cur_p = lo + (hi - lo) * k as f64 / CLOSED_GRID as f64;
                let cur_g = gap(cur_p);
                if prev_g == 0.0 {
                    roots.push(prev_p);
                } else if prev_g * cur_g < 0.0 {
                    let (mut a, mut b) = (prev_p, cur_p);
                    let mut ga = prev_g;
                    while b - a > CLOSED_TOL {
                        let mid = 0.5 * (a + b);
                        let gm = gap(mid);
                        if ga * gm <= 0.0 {
                            b = mid;
                        } else {
                            a = mid;
                            ga = gm;
                        }
                    }
                    roots.push(0.5 * (a + b));
                }
                prev_p = cur_p;
                prev_g = cur_g;
            }
            if prev_g == 0.0 {
                roots.push(prev_p);
            }
            roots.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

            roots
                .into_iter()
                .map(|p_star| {
                    let mut volumes = DVector::<f64>::zeros(n);
                    for (i, s) in states.iter().enumerate() {
                        volumes[i] = match s {
                            BinaryState::State0 => law.inverse_branch(p_star, Branch::Zero),
                            BinaryState::Spinodal => law.inverse_spinodal(p_star),
                            BinaryState::State1 => law.inverse_branch(p_star, Branch::One),
                        }
                        .expect("root lies inside every branch range");
                    }
                    let stability = minors_criterion(&volumes, law)
                        .expect("volumes are finite and non-empty");
                    Equilibrium {
                        pressures: vec![p_star; n],
                        volumes: volumes.iter().copied().collect(),
                        states: states.clone(),
                        stability,
                    }
                })
                .collect()
        })
        .collect();

    Ok(assignments.into_iter().flatten().collect())
}

/// Largest steady-flow violation of an equilibrium: max tube flux for closed
/// systems, max |W p − q| over unclamped rows for driven ones.
pub fn equilibrium_residual(
    net: &FlowNetwork,
    eq: &Equilibrium,
    bc: Option<&MixedBc>,
) -> f64 {
    let p = DVector::from_column_slice(&eq.pressures);
    match bc {
        None => net
            .tubes()
            .iter()
            .map(|t| (t.conductance * (p[t.i] - p[t.j])).abs())
            .fold(0.0, f64::max),
        Some(bc) => {
            let balance = net.laplacian().matrix() * &p;
            let clamped: Vec<usize> = bc.pressure.iter().map(|&(i, _)| i).collect();
            let mut q = DVector::<f64>::zeros(net.n());
            for &(i, qi) in &bc.flux {
                q[i] = qi;
            }
            (0..net.n())
                .filter(|i| !clamped.contains(i))
                .map(|i| (balance[i] - q[i]).abs())
                .fold(0.0, f64::max)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, DriveSchedule, FluxPulse, Phase, SimOptions};
    use crate::network::{NodeRole, Tube};
    use crate::stability::StabilityLabel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn law() -> BistableLaw {
        BistableLaw::default_trilinear()
    }

    fn pair(c: f64) -> FlowNetwork {
        FlowNetwork::new(2, vec![Tube { i: 0, j: 1, conductance: c }], vec![NodeRole::Hidden; 2])
            .unwrap()
    }

    fn random_net(rng: &mut ChaCha8Rng, n: usize) -> FlowNetwork {
        let mut tubes = Vec::new();
        for j in 1..n {
            let i = rng.gen_range(0..j);
            tubes.push(Tube { i, j, conductance: rng.gen_range(0.5..2.0) });
        }
        for _ in 0..n {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b && !tubes.iter().any(|t| (t.i, t.j) == (a.min(b), a.max(b))) {
                tubes.push(Tube { i: a.min(b), j: a.max(b), conductance: rng.gen_range(0.5..2.0) });
            }
        }
        FlowNetwork::new(n, tubes, vec![NodeRole::Hidden; n]).unwrap()
    }

    /// Four chambers: a driven inlet feeding two parallel two-tube dividers
    /// that share a grounded outlet.
    fn divider(c1: f64, c3: f64, c2: f64, c4: f64) -> FlowNetwork {
        FlowNetwork::new(
            4,
            vec![
                Tube { i: 0, j: 1, conductance: c1 },
                Tube { i: 1, j: 3, conductance: c3 },
                Tube { i: 0, j: 2, conductance: c2 },
                Tube { i: 2, j: 3, conductance: c4 },
            ],
            vec![NodeRole::Inlet, NodeRole::Hidden, NodeRole::Hidden, NodeRole::Ground],
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_gives_uniform_family() {
        let fam = pressures_flux_bc(&pair(1.0).laplacian(), &DVector::<f64>::zeros(2)).unwrap();
        assert_relative_eq!(fam.particular.amax(), 0.0);
        let offset = fam.with_offset(2.5);
        assert_relative_eq!(offset[0], 2.5);
        assert_relative_eq!(offset[1], 2.5);
    }

    #[test]
    fn antisymmetric_injection_on_a_pair() {
        let q = DVector::from_vec(vec![1.0, -1.0]);
        let fam = pressures_flux_bc(&pair(1.0).laplacian(), &q).unwrap();
        assert_relative_eq!(fam.particular[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(fam.particular[1], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn unbalanced_injection_is_rejected() {
        let q = DVector::from_vec(vec![1.0, 0.0]);
        let err = pressures_flux_bc(&pair(1.0).laplacian(), &q).unwrap_err();
        assert!(matches!(err, SteadyStateError::Unbalanced { .. }));
    }

    #[test]
    fn flux_solution_matches_bordered_direct_solve() {
        // Oracle: append the zero-mean constraint as a bordered row/column and
        // solve the augmented system directly.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.gen_range(2..=9);
            let net = random_net(&mut rng, n);
            let mut q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let mean = q.mean();
            q.apply(|x| *x -= mean);

            let fam = pressures_flux_bc(&net.laplacian(), &q).unwrap();

            let w = net.laplacian().matrix().clone();
            let mut aug = DMatrix::<f64>::zeros(n + 1, n + 1);
            aug.view_mut((0, 0), (n, n)).copy_from(&w);
            for i in 0..n {
                aug[(n, i)] = 1.0;
                aug[(i, n)] = 1.0;
            }
            let mut rhs = DVector::<f64>::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&q);
            let direct = aug.lu().solve(&rhs).unwrap();
            for i in 0..n {
                assert_relative_eq!(fam.particular[i], direct[i], epsilon = 1e-9);
            }
            let residual = (net.laplacian().matrix() * &fam.particular - &q).amax();
            assert!(residual < 1e-10, "residual {residual}");
        }
    }

    #[test]
    fn equal_dividers_split_the_drive_in_half() {
        let net = divider(1.0, 1.0, 1.0, 1.0);
        let bc = MixedBc { pressure: vec![(0, 7.0), (3, 0.0)], flux: vec![] };
        let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();
        assert_relative_eq!(sol.pressures[1], 3.5, epsilon = 1e-12);
        assert_relative_eq!(sol.pressures[2], 3.5, epsilon = 1e-12);
        // The inlet supplies what the ground absorbs.
        let q: Vec<f64> = sol.clamp_fluxes.iter().map(|&(_, q)| q).collect();
        assert_relative_eq!(q[0] + q[1], 0.0, epsilon = 1e-12);
        assert!(q[0] > 0.0);
    }

    #[test]
    fn divider_pressure_follows_the_resistance_ratio() {
        // Inlet-side resistance three times the ground-side one: the node
        // holds a quarter of the drive.
        let net = divider(1.0 / 3.0, 1.0, 1.0, 1.0);
        let bc = MixedBc { pressure: vec![(0, 8.0), (3, 0.0)], flux: vec![] };
        let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();
        assert_relative_eq!(sol.pressures[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.pressures[2], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn schur_blocks_agree_with_a_single_free_solve() {
        // Oracle: solve all free rows in one shot, W_ff p_f = q_f − W_fc p_c.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..40 {
            let n = rng.gen_range(3..=9);
            let net = random_net(&mut rng, n);
            let n_clamp = rng.gen_range(1..n);
            let mut idx: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                let j = rng.gen_range(0..=k);
                idx.swap(k, j);
            }
            let clamped = &idx[..n_clamp];
            let free: Vec<usize> = idx[n_clamp..].to_vec();
            let mut flux = Vec::new();
            for &i in &free {
                if rng.gen_bool(0.5) {
                    flux.push((i, rng.gen_range(-0.5..0.5)));
                }
            }
            let bc = MixedBc {
                pressure: clamped.iter().map(|&i| (i, rng.gen_range(-2.0..6.0))).collect(),
                flux,
            };
            let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();

            let lap = net.laplacian();
            let w = lap.matrix();
            let w_ff = submatrix(w, &free, &free);
            let w_fc = submatrix(w, &free, clamped);
            let p_c = DVector::from_fn(n_clamp, |k, _| bc.pressure[k].1);
            let mut q_f = DVector::<f64>::zeros(free.len());
            for &(i, q) in &bc.flux {
                q_f[free.iter().position(|&f| f == i).unwrap()] = q;
            }
            let direct = w_ff.lu().solve(&(q_f - w_fc * p_c)).unwrap();
            for (k, &i) in free.iter().enumerate() {
                assert_relative_eq!(sol.pressures[i], direct[k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn mixed_solve_matches_the_long_time_limit() {
        // A clamped path with a constant injection must relax to the solved
        // pressures.
        let net = FlowNetwork::new(
            4,
            vec![
                Tube { i: 0, j: 1, conductance: 1.0 },
                Tube { i: 1, j: 2, conductance: 1.0 },
                Tube { i: 2, j: 3, conductance: 1.0 },
            ],
            vec![NodeRole::Inlet, NodeRole::Hidden, NodeRole::Hidden, NodeRole::Hidden],
        )
        .unwrap();
        let bc = MixedBc { pressure: vec![(0, 4.0)], flux: vec![(2, 0.3)] };
        let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();

        let t_end = 120.0;
        let phase = Phase::free(4, 0.0, t_end)
            .pressure(0, 4.0)
            .flux(2, vec![FluxPulse { start: 0.0, end: t_end, rate: 0.3 }]);
        let sched = DriveSchedule::new(4, vec![phase]).unwrap();
        let opts = SimOptions { abs_tol: 1e-11, rel_tol: 1e-9, ..Default::default() };
        let v0 = DVector::from_element(4, 1.0);
        let traj = simulate(&net, &law(), &v0, &sched, &opts).unwrap();
        let end = traj.last_state(&law());
        for i in 0..4 {
            assert_relative_eq!(end.pressures[i], sol.pressures[i], max_relative = 1e-4);
        }
    }

    #[test]
    fn mixed_solve_is_relabeling_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..25 {
            let n = rng.gen_range(3..=8);
            let net = random_net(&mut rng, n);
            let bc = MixedBc {
                pressure: vec![(0, rng.gen_range(1.0..5.0))],
                flux: vec![(n - 1, rng.gen_range(-0.4..0.4))],
            };
            let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();

            // Relabel via a random permutation sigma.
            let mut sigma: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                let j = rng.gen_range(0..=k);
                sigma.swap(k, j);
            }
            let lap = net.laplacian();
            let w = lap.matrix();
            let wp = DMatrix::from_fn(n, n, |i, j| {
                w[(sigma.iter().position(|&s| s == i).unwrap(),
                   sigma.iter().position(|&s| s == j).unwrap())]
            });
            let bc_p = MixedBc {
                pressure: bc.pressure.iter().map(|&(i, p)| (sigma[i], p)).collect(),
                flux: bc.flux.iter().map(|&(i, q)| (sigma[i], q)).collect(),
            };
            let sol_p =
                pressures_mixed_bc(&Laplacian::from_matrix_unchecked(wp), &bc_p).unwrap();
            for i in 0..n {
                assert_relative_eq!(sol_p.pressures[sigma[i]], sol.pressures[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn clamp_on_every_node_returns_the_clamps() {
        let net = pair(2.0);
        let bc = MixedBc { pressure: vec![(0, 3.0), (1, 1.0)], flux: vec![] };
        let sol = pressures_mixed_bc(&net.laplacian(), &bc).unwrap();
        assert_relative_eq!(sol.pressures[0], 3.0);
        assert_relative_eq!(sol.pressures[1], 1.0);
        // Each clamp carries the through-flow.
        assert_relative_eq!(sol.clamp_fluxes[0].1, 4.0, epsilon = 1e-12);
        assert_relative_eq!(sol.clamp_fluxes[1].1, -4.0, epsilon = 1e-12);
    }

    #[test]
    fn mixed_bc_input_validation() {
        let net = pair(1.0);
        let lap = net.laplacian();
        assert!(matches!(
            pressures_mixed_bc(&lap, &MixedBc::default()),
            Err(SteadyStateError::NoPressureBc)
        ));
        let bc = MixedBc { pressure: vec![(0, 1.0)], flux: vec![(0, 0.5)] };
        assert!(matches!(
            pressures_mixed_bc(&lap, &bc),
            Err(SteadyStateError::BadInput(_))
        ));
        let bc = MixedBc { pressure: vec![(0, 1.0), (0, 2.0)], flux: vec![] };
        assert!(matches!(
            pressures_mixed_bc(&lap, &bc),
            Err(SteadyStateError::BadInput(_))
        ));
    }

    #[test]
    fn branch_memory_resolution_matches_the_fold_rules() {
        let l = law();
        let p = DVector::from_vec(vec![3.0, 5.5, 1.5, 3.0]);
        let incumbent = [Branch::Zero, Branch::Zero, Branch::One, Branch::One];
        let res = volumes_from_pressures(&p, &l, &incumbent).unwrap();
        // Below the upper fold on branch 0: stays put at v = p.
        assert_relative_eq!(res.volumes[0], 3.0);
        assert_eq!(res.branches[0], Branch::Zero);
        // Above the upper fold: snaps to the upper branch, v = 9 + 2(5.5 − 2).
        assert_relative_eq!(res.volumes[1], 16.0);
        assert_eq!(res.branches[1], Branch::One);
        // Below the lower fold on branch 1: snaps down, v = 1.5.
        assert_relative_eq!(res.volumes[2], 1.5);
        assert_eq!(res.branches[2], Branch::Zero);
        // Inside the window on branch 1: stays up, v = 9 + 2(3 − 2) = 11.
        assert_relative_eq!(res.volumes[3], 11.0);
        assert_eq!(res.branches[3], Branch::One);
        assert!(res.fold_ambiguous.is_empty());
    }

    #[test]
    fn fold_pressure_is_flagged_and_kept_incumbent() {
        let l = law();
        let p = DVector::from_vec(vec![5.0, 2.0]);
        let res =
            volumes_from_pressures(&p, &l, &[Branch::Zero, Branch::One]).unwrap();
        assert_eq!(res.fold_ambiguous, vec![0, 1]);
        assert_eq!(res.branches, vec![Branch::Zero, Branch::One]);
        assert_relative_eq!(res.volumes[0], 5.0);
        assert_relative_eq!(res.volumes[1], 9.0);
    }

    #[test]
    fn balanced_dividers_admit_nine_equilibria() {
        let net = divider(1.0, 1.0, 1.0, 1.0);
        let bc = MixedBc { pressure: vec![(0, 7.0), (3, 0.0)], flux: vec![] };
        let set = enumerate_pressure_bc(&net, &law(), &bc).unwrap();
        assert_eq!(set.len(), 9);
        for eq in &set {
            assert_relative_eq!(eq.pressures[1], 3.5, epsilon = 1e-12);
            assert_relative_eq!(eq.pressures[2], 3.5, epsilon = 1e-12);
            // The inlet sits above the upper fold, the outlet at zero; their
            // segments are forced.
            assert_eq!(eq.states[0], BinaryState::State1);
            assert_eq!(eq.states[3], BinaryState::State0);
            let spinodal = eq.states.iter().filter(|s| **s == BinaryState::Spinodal).count();
            let expect = if spinodal == 0 { StabilityLabel::Stable } else { StabilityLabel::Unstable };
            assert_eq!(eq.stability.label, expect, "states {:?}", eq.states);
            let residual = equilibrium_residual(&net, eq, Some(&bc));
            assert!(residual < 1e-10, "residual {residual}");
        }
        let stable = set.iter().filter(|e| e.stability.label == StabilityLabel::Stable).count();
        assert_eq!(stable, 4);
    }

    #[test]
    fn lopsided_dividers_collapse_to_one_equilibrium() {
        // Drive below both nodes' windows: every chamber is pinned to one
        // branch and the product has a single member.
        let net = divider(1.0 / 3.0, 1.0, 1.0 / 3.0, 1.0);
        let bc = MixedBc { pressure: vec![(0, 6.0), (3, 0.0)], flux: vec![] };
        let set = enumerate_pressure_bc(&net, &law(), &bc).unwrap();
        assert_eq!(set.len(), 1);
        assert_relative_eq!(set[0].pressures[1], 1.5, epsilon = 1e-12);
        assert_eq!(set[0].stability.label, StabilityLabel::Stable);
    }

    #[test]
    fn closed_single_chamber_on_the_lower_branch() {
        let set = enumerate_closed(&law(), 1, 3.0).unwrap();
        assert_eq!(set.len(), 1);
        assert_relative_eq!(set[0].volumes[0], 3.0, epsilon = 1e-9);
        assert_eq!(set[0].states[0], BinaryState::State0);
        assert_eq!(set[0].stability.label, StabilityLabel::Stable);
    }

    #[test]
    fn closed_pair_at_six_has_exactly_the_symmetric_equilibrium() {
        let set = enumerate_closed(&law(), 2, 6.0).unwrap();
        assert_eq!(set.len(), 1);
        let eq = &set[0];
        assert_relative_eq!(eq.volumes[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(eq.volumes[1], 3.0, epsilon = 1e-9);
        assert_eq!(eq.states, vec![BinaryState::State0, BinaryState::State0]);
        assert_relative_eq!(eq.pressures[0], 3.0, epsilon = 1e-9);
    }

    #[test]
    fn closed_pair_matches_a_dense_grid_oracle() {
        // Oracle: scan v1 on a dense grid, v2 = V − v1, and bisect the sign
        // changes of f(v1) − f(v2) directly in volume space.
        let l = law();
        let total = 6.0;
        let mut oracle_roots: Vec<f64> = Vec::new();
        let grid = 4000;
        let mut prev_v = 0.0;
        let mut prev_h = l.pressure_extended(0.0) - l.pressure_extended(total);
        for k in 1..=grid {
            let v1 = total * k as f64 / grid as f64;
            let h = l.pressure_extended(v1) - l.pressure_extended(total - v1);
            if prev_h == 0.0 {
                oracle_roots.push(prev_v);
            } else if prev_h * h < 0.0 {
                let (mut a, mut b) = (prev_v, v1);
                let mut ha = prev_h;
                while b - a > 1e-12 {
                    let m = 0.5 * (a + b);
                    let hm = l.pressure_extended(m) - l.pressure_extended(total - m);
                    if ha * hm <= 0.0 {
                        b = m;
                    } else {
                        a = m;
                        ha = hm;
                    }
                }
                oracle_roots.push(0.5 * (a + b));
            }
            prev_v = v1;
            prev_h = h;
        }
        if prev_h == 0.0 {
            oracle_roots.push(prev_v);
        }
        assert_eq!(oracle_roots.len(), 1);
        assert_relative_eq!(oracle_roots[0], 3.0, epsilon = 1e-9);

        let set = enumerate_closed(&l, 2, total).unwrap();
        assert_eq!(set.len(), oracle_roots.len());
        assert_relative_eq!(set[0].volumes[0], oracle_roots[0], epsilon = 1e-9);
    }

    #[test]
    fn closed_enumeration_respects_the_node_cap() {
        let err = enumerate_closed(&law(), 15, 10.0).unwrap_err();
        assert!(matches!(err, SteadyStateError::EnumerationTooLarge { .. }));
    }

    #[test]
    fn closed_equilibria_conserve_volume_and_balance_flows() {
        let l = law();
        for total in [6.0, 14.0, 20.0, 26.0] {
            let set = enumerate_closed(&l, 3, total).unwrap();
            assert!(!set.is_empty(), "total {total}");
            let net = FlowNetwork::new(
                3,
                vec![
                    Tube { i: 0, j: 1, conductance: 1.0 },
                    Tube { i: 1, j: 2, conductance: 2.0 },
                ],
                vec![NodeRole::Hidden; 3],
            )
            .unwrap();
            for eq in &set {
                let v_sum: f64 = eq.volumes.iter().sum();
                assert_relative_eq!(v_sum, total, epsilon = 1e-8);
                assert!(equilibrium_residual(&net, eq, None) < 1e-10);
                // Pressure uniform across nodes.
                for w in eq.pressures.windows(2) {
                    assert_relative_eq!(w[0], w[1], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn enumerated_stable_states_attract_nearby_trajectories() {
        // Dynamical cross-check on a closed pair: relax a perturbation of
        // each stable equilibrium and land back on it.
        let l = law();
        let net = pair(1.0);
        let total = 14.0;
        let set = enumerate_closed(&l, 2, total).unwrap();
        let stable: Vec<_> =
            set.iter().filter(|e| e.stability.label == StabilityLabel::Stable).collect();
        assert!(!stable.is_empty());
        let sched = DriveSchedule::free(2, 150.0);
        for eq in stable {
            let v0 = DVector::from_vec(vec![eq.volumes[0] + 5e-4, eq.volumes[1] - 5e-4]);
            let traj = simulate(&net, &l, &v0, &sched, &SimOptions::default()).unwrap();
            let end = traj.last_state(&l);
            assert_relative_eq!(end.volumes[0], eq.volumes[0], epsilon = 1e-3);
            assert_relative_eq!(end.volumes[1], eq.volumes[1], epsilon = 1e-3);
        }
    }

    proptest! {
        #[test]
        fn pressure_bc_enumeration_is_law_blind_on_pressures(
            p_drive in 0.5f64..9.5,
            c in 0.3f64..3.0
        ) {
            // Swapping the law never moves the solved pressures, only the
            // admissible volumes.
            let net = divider(c, 1.0, 1.0, c);
            let bc = MixedBc { pressure: vec![(0, p_drive), (3, 0.0)], flux: vec![] };
            let a = enumerate_pressure_bc(&net, &BistableLaw::default_trilinear(), &bc).unwrap();
            let b = enumerate_pressure_bc(&net, &BistableLaw::balloon_like(), &bc).unwrap();
            if let (Some(ea), Some(eb)) = (a.first(), b.first()) {
                for i in 0..4 {
                    prop_assert!((ea.pressures[i] - eb.pressures[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn closed_roots_meet_the_volume_constraint(total in 0.5f64..40.0) {
            let set = enumerate_closed(&law(), 2, total).unwrap();
            for eq in &set {
                let v_sum: f64 = eq.volumes.iter().sum();
                prop_assert!((v_sum - total).abs() < 1e-8 * total.max(1.0));
            }
        }
    }
}
