//! Transient simulation of chamber volumes under boundary drives.
//!
//! Free chambers obey dv/dt = q(t) − W·p, with p_i = f(v_i). Pressure-clamped
//! chambers are removed from the ODE unknowns; their pressures are prescribed
//! and their volumes reconstructed from the law on the branch tracked by a
//! per-node hysteresis bit. Total volume obeys V(t) = V(0) + ∫ 1ᵀq dτ whenever
//! no pressure clamps are present.

mod rk45;
mod schedule;

pub use rk45::Rk45Opts;
pub use schedule::{DriveSchedule, FluxPulse, NodeDrive, Phase};

use nalgebra::DVector;
use thiserror::Error;

use crate::bistable::{BinaryState, BistableLaw, Branch, LawError};
use crate::network::FlowNetwork;

/// Volumes this far below zero abort a run; smaller excursions are treated as
/// round-off against the law's extended first segment.
const NEGATIVE_VOLUME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Error)]
pub enum DynamicsError {
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("bad schedule: {0}")]
    Schedule(String),
    #[error("law domain exit: node {node} volume {v:.6e} negative at t = {t:.6}")]
    LawDomainExit { t: f64, node: usize, v: f64 },
    #[error("integration step underflow at t = {t:.6}; system too stiff at this tolerance")]
    Stiff { t: f64 },
    #[error("clamp pressure {p} infeasible for node {node}: {source}")]
    ClampInfeasible { node: usize, p: f64, source: LawError },
    #[error(transparent)]
    Law(#[from] LawError),
}

/// Tolerances and controls for a simulation run.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Steady threshold on both the largest tube flux and the largest free-node
    /// volume rate. Must sit above the integration noise floor, roughly
    /// rel_tol · max|v| · stiffness · conductance; tighten abs_tol/rel_tol when
    /// detecting against a tight threshold.
    pub tol_flux: f64,
    /// Quiet dwell required before declaring steady, as a fraction of the
    /// schedule horizon.
    pub dwell_frac: f64,
    /// Stop as soon as a quiet dwell completes after the last drive activity.
    pub early_stop: bool,
    pub h_min: f64,
    pub h_max: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            tol_flux: 1e-6,
            dwell_frac: 0.05,
            early_stop: true,
            h_min: 1e-12,
            h_max: f64::INFINITY,
        }
    }
}

/// Full chamber state at one instant.
#[derive(Debug, Clone)]
pub struct NetworkState {
    pub t: f64,
    pub volumes: DVector<f64>,
    pub pressures: DVector<f64>,
    pub states: Vec<BinaryState>,
}

impl NetworkState {
    pub fn binary_bits(&self) -> Vec<bool> {
        self.states.iter().map(|s| s.as_bit()).collect()
    }
}

/// Recorded simulation history: one sample per accepted integrator step, plus
/// phase-entry samples.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub volumes: Vec<DVector<f64>>,
    pub pressures: Vec<DVector<f64>>,
    /// Cumulative injected volume ∫ 1ᵀq dτ at each sample.
    pub injected: Vec<f64>,
    /// First quiet time, when a full dwell confirmed it during the run.
    pub steady_time: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize, law: &BistableLaw) -> NetworkState {
        NetworkState {
            t: self.times[k],
            volumes: self.volumes[k].clone(),
            pressures: self.pressures[k].clone(),
            states: self.volumes[k].iter().map(|&v| law.classify(v)).collect(),
        }
    }

    pub fn last_state(&self, law: &BistableLaw) -> NetworkState {
        self.state(self.len() - 1, law)
    }

    pub fn total_volume(&self, k: usize) -> f64 {
        self.volumes[k].sum()
    }

    /// Signed flux through every tube at sample k: positive i→j for i < j.
    pub fn edge_fluxes(&self, net: &FlowNetwork, k: usize) -> Vec<(usize, usize, f64)> {
        let p = &self.pressures[k];
        net.tubes()
            .iter()
            .map(|t| (t.i, t.j, t.conductance * (p[t.i] - p[t.j])))
            .collect()
    }

    pub fn max_abs_edge_flux(&self, net: &FlowNetwork, k: usize) -> f64 {
        let p = &self.pressures[k];
        net.tubes()
            .iter()
            .map(|t| (t.conductance * (p[t.i] - p[t.j])).abs())
            .fold(0.0, f64::max)
    }

    /// Trapezoid integral of each node pressure from 0 to t_cut, interpolating
    /// the final partial interval.
    pub fn pressure_time_integral(&self, t_cut: f64) -> DVector<f64> {
        let n = self.pressures[0].len();
        let mut acc = DVector::<f64>::zeros(n);
        for k in 1..self.len() {
            let (t0, t1) = (self.times[k - 1], self.times[k]);
            if t0 >= t_cut {
                break;
            }
            if t1 <= t_cut {
                acc += 0.5 * (t1 - t0) * (&self.pressures[k - 1] + &self.pressures[k]);
            } else {
                // Partial interval: integrate the linear interpolant to t_cut.
                let f = (t_cut - t0) / (t1 - t0);
                let p_cut = (1.0 - f) * &self.pressures[k - 1] + f * &self.pressures[k];
                acc += 0.5 * (t_cut - t0) * (&self.pressures[k - 1] + p_cut);
            }
        }
        acc
    }

    /// CSV dump: `t, v_1..v_n, p_1..p_n, V_total`.
    pub fn to_csv(&self) -> String {
        let n = self.volumes.first().map_or(0, |v| v.len());
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",v_{i}"));
        }
        for i in 1..=n {
            out.push_str(&format!(",p_{i}"));
        }
        out.push_str(",V_total\n");
        for k in 0..self.len() {
            out.push_str(&format!("{:.9}", self.times[k]));
            for v in self.volumes[k].iter() {
                out.push_str(&format!(",{v:.9}"));
            }
            for p in self.pressures[k].iter() {
                out.push_str(&format!(",{p:.9}"));
            }
            out.push_str(&format!(",{:.9}\n", self.total_volume(k)));
        }
        out
    }
}

/// Updates hysteresis bits from volumes: a bit sets above v_min, clears below
/// v_max, and is retained across the spinodal window.
fn update_bits(law: &BistableLaw, v: &DVector<f64>, bits: &mut [bool]) {
    for (i, &vi) in v.iter().enumerate() {
        if vi >= law.v_min() {
            bits[i] = true;
        } else if vi <= law.v_max() {
            bits[i] = false;
        }
    }
}

/// Branch bit and reconstructed volume for a pressure-clamped chamber.
fn clamped_volume(
    law: &BistableLaw,
    node: usize,
    p: f64,
    incumbent: bool,
) -> Result<(f64, bool), DynamicsError> {
    let bit = if p > law.p_max() {
        true
    } else if p < law.p_min() {
        false
    } else {
        incumbent
    };
    let branch = if bit { Branch::One } else { Branch::Zero };
    let v = law
        .inverse_branch(p, branch)
        .map_err(|source| DynamicsError::ClampInfeasible { node, p, source })?;
    Ok((v, bit))
}

/// Instantaneous volume rates at (v, t) under the schedule: free entries carry
/// q − W·p, pressure-clamped entries are zero.
pub fn rhs(
    net: &FlowNetwork,
    law: &BistableLaw,
    v: &DVector<f64>,
    schedule: &DriveSchedule,
    t: f64,
) -> Result<DVector<f64>, DynamicsError> {
    let n = net.n();
    if v.len() != n || schedule.n() != n {
        return Err(DynamicsError::BadInput(format!(
            "size mismatch: {} volumes, {} schedule nodes, {} network nodes",
            v.len(),
            schedule.n(),
            n
        )));
    }
    let phase = schedule.phase_index(t);
    let clamps = schedule.pressure_clamps(phase);
    let mut clamped = vec![None; n];
    for &(i, p) in &clamps {
        clamped[i] = Some(p);
    }
    let mut pressures = DVector::<f64>::zeros(n);
    for i in 0..n {
        pressures[i] = match clamped[i] {
            Some(p) => p,
            None => law.pressure(v[i])?,
        };
    }
    let q = schedule.flux_vector(t);
    let mut dv = DVector::<f64>::zeros(n);
    for tube in net.tubes() {
        let flow = tube.conductance * (pressures[tube.i] - pressures[tube.j]);
        dv[tube.i] -= flow;
        dv[tube.j] += flow;
    }
    for i in 0..n {
        if clamped[i].is_some() {
            dv[i] = 0.0;
        } else {
            dv[i] += q[i];
        }
    }
    Ok(dv)
}

/// Integrates the network from initial volumes under a drive schedule.
///
/// Records every accepted step. With `early_stop`, the run ends once fluxes
/// and free-node rates stay below `tol_flux` for a full dwell after the last
/// drive activity; `steady_time` then marks the start of the quiet window.
pub fn simulate(
    net: &FlowNetwork,
    law: &BistableLaw,
    v0: &DVector<f64>,
    schedule: &DriveSchedule,
    opts: &SimOptions,
) -> Result<Trajectory, DynamicsError> {
    let n = net.n();
    if v0.len() != n || schedule.n() != n {
        return Err(DynamicsError::BadInput(format!(
            "size mismatch: {} volumes, {} schedule nodes, {} network nodes",
            v0.len(),
            schedule.n(),
            n
        )));
    }
    for (i, &v) in v0.iter().enumerate() {
        if !v.is_finite() || v < 0.0 {
            return Err(DynamicsError::BadInput(format!(
                "initial volume of node {i} is {v}; volumes must be finite and non-negative"
            )));
        }
    }

    let rk_opts = Rk45Opts {
        abs_tol: opts.abs_tol,
        rel_tol: opts.rel_tol,
        h_min: opts.h_min,
        h_max: opts.h_max,
    };
    let dwell = opts.dwell_frac * schedule.t_end();
    let last_activity = schedule.last_activity();

    let mut v_full = v0.clone();
    let mut bits = vec![false; n];
    update_bits(law, &v_full, &mut bits);

    let mut traj = Trajectory {
        times: Vec::new(),
        volumes: Vec::new(),
        pressures: Vec::new(),
        injected: Vec::new(),
        steady_time: None,
    };

    let mut stopped = false;
    let mut h_carry: Option<f64> = None;

    let breakpoints = schedule.breakpoints();

    for phase_idx in 0..schedule.phases().len() {
        if stopped {
            break;
        }
        let phase = &schedule.phases()[phase_idx];
        let clamps = schedule.pressure_clamps(phase_idx);
        let mut clamp_of = vec![None; n];
        for &(i, p) in &clamps {
            clamp_of[i] = Some(p);
        }
        let free: Vec<usize> = (0..n).filter(|&i| clamp_of[i].is_none()).collect();

        // Clamped chambers sit at the prescribed pressure for the whole phase.
        for &(i, p) in &clamps {
            let (v, bit) = clamped_volume(law, i, p, bits[i])?;
            v_full[i] = v;
            bits[i] = bit;
        }

        // Record the phase-entry state.
        let record = |traj: &mut Trajectory, t: f64, v: &DVector<f64>, p: DVector<f64>| {
            traj.times.push(t);
            traj.volumes.push(v.clone());
            traj.pressures.push(p);
            traj.injected.push(schedule.injected_volume(t));
        };
        let pressures_of = |v: &DVector<f64>| -> DVector<f64> {
            DVector::from_fn(n, |i, _| match clamp_of[i] {
                Some(p) => p,
                None => law.pressure_extended(v[i]),
            })
        };
        let p_entry = pressures_of(&v_full);
        // A phase switch counts as drive activity: the quiet clock restarts,
        // seeded from the entry state so an already-settled system is quiet
        // from the phase start.
        let mut quiet_since: Option<f64> = None;
        {
            let q0 = schedule.flux_vector(phase.start);
            let mut rate = DVector::<f64>::zeros(n);
            let mut max_flux = 0.0f64;
            for tube in net.tubes() {
                let flow = tube.conductance * (p_entry[tube.i] - p_entry[tube.j]);
                max_flux = max_flux.max(flow.abs());
                rate[tube.i] -= flow;
                rate[tube.j] += flow;
            }
            let residual = free
                .iter()
                .map(|&i| (rate[i] + q0[i]).abs())
                .fold(0.0, f64::max);
            if max_flux < opts.tol_flux && residual < opts.tol_flux {
                quiet_since = Some(phase.start);
            }
        }
        record(&mut traj, phase.start, &v_full, p_entry);

        let segs: Vec<f64> = breakpoints
            .iter()
            .copied()
            .filter(|&t| t > phase.start && t <= phase.end)
            .collect();
        let mut seg_start = phase.start;
        for &seg_end in &segs {
            if stopped {
                break;
            }
            // Drives are constant on (seg_start, seg_end); sample mid-segment.
            let q_seg = schedule.flux_vector(0.5 * (seg_start + seg_end));
            let y0 = DVector::from_fn(free.len(), |k, _| v_full[free[k]]);
            let mut budget_err: Option<DynamicsError> = None;

            let f = |_t: f64, y: &DVector<f64>| -> DVector<f64> {
                let mut p = DVector::<f64>::zeros(n);
                for i in 0..n {
                    p[i] = clamp_of[i].unwrap_or(0.0);
                }
                for (k, &i) in free.iter().enumerate() {
                    p[i] = law.pressure_extended(y[k]);
                }
                let mut dv = DVector::<f64>::zeros(n);
                for tube in net.tubes() {
                    let flow = tube.conductance * (p[tube.i] - p[tube.j]);
                    dv[tube.i] -= flow;
                    dv[tube.j] += flow;
                }
                DVector::from_fn(free.len(), |k, _| dv[free[k]] + q_seg[free[k]])
            };

            let sink = |t: f64, y: &DVector<f64>, dy: &DVector<f64>| -> bool {
                for (k, &i) in free.iter().enumerate() {
                    v_full[i] = y[k];
                    if y[k] < -NEGATIVE_VOLUME_TOL {
                        budget_err = Some(DynamicsError::LawDomainExit { t, node: i, v: y[k] });
                        return false;
                    }
                }
                update_bits(law, &v_full, &mut bits);
                let p = pressures_of(&v_full);
                let max_flux = net
                    .tubes()
                    .iter()
                    .map(|tb| (tb.conductance * (p[tb.i] - p[tb.j])).abs())
                    .fold(0.0, f64::max);
                let residual = if dy.nrows() == 0 { 0.0 } else { dy.amax() };
                record(&mut traj, t, &v_full, p);

                if max_flux < opts.tol_flux && residual < opts.tol_flux {
                    if quiet_since.is_none() {
                        quiet_since = Some(t);
                    }
                } else {
                    quiet_since = None;
                }
                if opts.early_stop {
                    if let Some(s) = quiet_since {
                        if s >= last_activity && t - s >= dwell {
                            traj.steady_time = Some(s);
                            stopped = true;
                            return false;
                        }
                    }
                }
                true
            };

            let (y_end, h_last) =
                rk45::integrate(f, y0, seg_start, seg_end, h_carry, &rk_opts, sink)
                    .map_err(|u| DynamicsError::Stiff { t: u.t })?;
            if let Some(e) = budget_err {
                return Err(e);
            }
            for (k, &i) in free.iter().enumerate() {
                v_full[i] = y_end[k];
            }
            h_carry = Some(h_last);
            seg_start = seg_end;
        }
    }

    Ok(traj)
}

/// First time from which the largest tube flux and largest free-node volume
/// rate stay below `tol_flux` for a full dwell window, or `None`.
pub fn detect_steady(
    net: &FlowNetwork,
    law: &BistableLaw,
    schedule: &DriveSchedule,
    traj: &Trajectory,
    tol_flux: f64,
    dwell: f64,
) -> Option<f64> {
    let m = traj.len();
    if m == 0 {
        return None;
    }
    let _ = law;
    let quiet: Vec<bool> = (0..m)
        .map(|k| {
            let t = traj.times[k];
            let p = &traj.pressures[k];
            let phase = schedule.phase_index(t);
            let clamps = schedule.pressure_clamps(phase);
            let mut is_clamped = vec![false; net.n()];
            for &(i, _) in &clamps {
                is_clamped[i] = true;
            }
            let q = schedule.flux_vector(t);
            let mut rate = DVector::<f64>::zeros(net.n());
            let mut max_flux = 0.0f64;
            for tube in net.tubes() {
                let flow = tube.conductance * (p[tube.i] - p[tube.j]);
                max_flux = max_flux.max(flow.abs());
                rate[tube.i] -= flow;
                rate[tube.j] += flow;
            }
            let residual = (0..net.n())
                .filter(|&i| !is_clamped[i])
                .map(|i| (rate[i] + q[i]).abs())
                .fold(0.0, f64::max);
            max_flux < tol_flux && residual < tol_flux
        })
        .collect();

    let t_end = *traj.times.last().unwrap();
    for k in 0..m {
        if !quiet[k] {
            continue;
        }
        let t_k = traj.times[k];
        if t_k + dwell > t_end + 1e-12 {
            return None;
        }
        let window_quiet = (k..m)
            .take_while(|&j| traj.times[j] <= t_k + dwell + 1e-12)
            .all(|j| quiet[j]);
        if window_quiet {
            return Some(t_k);
        }
    }
    None
}
