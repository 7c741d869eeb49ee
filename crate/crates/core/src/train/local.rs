//! Local contrastive learning of conductances with snap handling.
//!
//! Each iteration relaxes the network twice under pressure clamps. The free
//! phase holds only the inlets and lets every output settle; the clamped
//! phase additionally holds each output at a pressure nudged from its free
//! value toward the target, or pushed past a fold when the output sits on
//! the wrong branch. A tube then updates from the squared pressure drops
//! across its own endpoints in the two phases, so no global signal is
//! needed. Settled states carry into the next iteration, which is what lets
//! an output that was forced onto the upper branch stay there after release.
//!
//! After the first iteration the relaxations may run on an algebraic fast
//! path: clamped-node pressures propagate through the linear steady-state
//! solve and volumes follow from branch memory, flipping a label exactly
//! when a settled pressure crosses the incumbent branch's fold.

use crate::bistable::{BinaryState, BistableLaw, Branch, LawError};
use crate::dynamics::{simulate, DriveSchedule, DynamicsError, SimOptions};
use crate::network::{FlowNetwork, NetworkError, Tube};
use crate::steadystate::{pressures_mixed_bc, volumes_from_pressures, MixedBc, SteadyStateError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LocalError {
    #[error("no tasks")]
    NoTasks,
    #[error("task {task}: {reason}")]
    BadTask { task: usize, reason: String },
    #[error("infeasible target: node {node} cannot hold pressure {pressure} on branch {branch:?}")]
    InfeasibleTarget { node: usize, pressure: f64, branch: Branch },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("bad input: {0}")]
    BadInput(String),
    #[error(transparent)]
    Law(#[from] LawError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    SteadyState(#[from] SteadyStateError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Desired settled condition of one output node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputTarget {
    pub node: usize,
    /// Pressure the output should settle at.
    pub pressure: f64,
    /// Branch the output should occupy at that pressure.
    pub branch: Branch,
}

impl OutputTarget {
    /// Volume realizing the target on its branch.
    pub fn volume(&self, law: &BistableLaw) -> Result<f64, LawError> {
        law.inverse_branch(self.pressure, self.branch)
    }

    /// Whether some non-negative volume on the requested branch produces the
    /// target pressure: branch 0 reaches up to the upper fold, branch 1
    /// anything from the lower fold on.
    pub fn feasible(&self, law: &BistableLaw) -> bool {
        law.inverse_branch(self.pressure, self.branch).is_ok()
    }
}

/// One training example: inlet clamps plus the outputs they should set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTask {
    /// Pressure boundary conditions held through both phases.
    pub inlets: Vec<(usize, f64)>,
    pub outputs: Vec<OutputTarget>,
}

impl LocalTask {
    /// Check node ranges, clamp overlaps, and target feasibility.
    pub fn validate(&self, index: usize, n: usize, law: &BistableLaw) -> Result<(), LocalError> {
        let bad = |reason: String| Err(LocalError::BadTask { task: index, reason });
        if self.inlets.is_empty() {
            return bad("needs at least one inlet clamp".into());
        }
        if self.outputs.is_empty() {
            return bad("needs at least one output target".into());
        }
        let mut seen = vec![false; n];
        for &(node, p) in &self.inlets {
            if node >= n {
                return bad(format!("inlet node {node} out of range for {n} nodes"));
            }
            if !p.is_finite() {
                return bad(format!("inlet pressure at node {node} is {p}"));
            }
            if seen[node] {
                return bad(format!("node {node} is clamped twice"));
            }
            seen[node] = true;
        }
        for out in &self.outputs {
            if out.node >= n {
                return bad(format!("output node {} out of range for {n} nodes", out.node));
            }
            if seen[out.node] {
                return bad(format!("node {} is clamped twice", out.node));
            }
            seen[out.node] = true;
            if !out.feasible(law) {
                return bad(format!(
                    "infeasible target: node {} cannot hold pressure {} on branch {:?}",
                    out.node, out.pressure, out.branch
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LocalConfig {
    /// Nudge amplitude in (0, 1]: how far the clamped phase pulls an
    /// already-correct output from its free pressure toward the target.
    pub nudge: f64,
    /// Scale of the conductance update.
    pub learning_rate: f64,
    /// Mean squared output-volume error at which training stops.
    pub error_threshold: f64,
    /// Snap-up clamps sit at this multiple of the upper fold pressure (> 1).
    pub snap_up: f64,
    /// Snap-down clamps sit at this fraction of the lower fold pressure,
    /// in (0, 1); see `clamped_target_pressures` for folds at or below zero.
    pub snap_down: f64,
    /// Conductance floor; positive, so updates can never sever a tube.
    pub c_min: f64,
    pub c_max: f64,
    pub max_iterations: usize,
    /// Solve later iterations algebraically instead of integrating.
    pub fast_path: bool,
    /// Integration controls for the first (and any non-fast) iteration.
    pub sim: SimOptions,
    /// Time horizon of each integrated phase.
    pub sim_horizon: f64,
    /// Starting volume per chamber.
    pub initial_volume: f64,
    /// Solve distinct tasks of an iteration concurrently.
    pub parallel: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        LocalConfig {
            nudge: 0.25,
            learning_rate: 0.01,
            error_threshold: 0.1,
            snap_up: 1.2,
            snap_down: 0.8,
            c_min: 1e-6,
            c_max: 1e6,
            max_iterations: 1000,
            fast_path: true,
            sim: SimOptions { abs_tol: 1e-10, rel_tol: 1e-9, ..SimOptions::default() },
            sim_horizon: 200.0,
            initial_volume: 1.0,
            parallel: false,
        }
    }
}

impl LocalConfig {
    fn validate(&self) -> Result<(), LocalError> {
        let bad = |m: &str| Err(LocalError::BadConfig(m.into()));
        if !(self.nudge > 0.0 && self.nudge <= 1.0) {
            return bad("nudge must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.error_threshold >= 0.0) {
            return bad("error threshold must be non-negative");
        }
        if !(self.snap_up > 1.0) {
            return bad("snap-up multiplier must exceed 1");
        }
        if !(self.snap_down > 0.0 && self.snap_down < 1.0) {
            return bad("snap-down multiplier must lie in (0, 1)");
        }
        if !(self.c_min > 0.0 && self.c_max > self.c_min) {
            return bad("conductance bounds must satisfy 0 < c_min < c_max");
        }
        if self.max_iterations == 0 {
            return bad("iteration cap must be at least 1");
        }
        if !(self.sim_horizon > 0.0) {
            return bad("simulation horizon must be positive");
        }
        if !(self.initial_volume >= 0.0) {
            return bad("initial volume must be non-negative");
        }
        Ok(())
    }
}

/// A label flip at an output or hidden node, observed between the free
/// phases of consecutive iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapEvent {
    /// Iteration (1-based) whose free phase showed the new label.
    pub iteration: usize,
    pub task: usize,
    pub node: usize,
    pub from: Branch,
    pub to: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalStatus {
    Converged,
    IterationCap,
}

#[derive(Debug)]
pub struct LocalResult {
    /// Trained network: the converged one, or the best seen at the cap.
    pub network: FlowNetwork,
    /// Error the returned network achieves.
    pub final_error: f64,
    /// Mean squared output-volume error at each iteration's free phase.
    pub error_history: Vec<f64>,
    pub snap_events: Vec<SnapEvent>,
    /// Conductance updates truncated at the bounds.
    pub clamp_events: usize,
    pub status: LocalStatus,
    /// Free-phase evaluations performed.
    pub iterations: usize,
}

/// One settled state from the algebraic path.
#[derive(Debug, Clone)]
pub struct SteadyOutcome {
    pub pressures: DVector<f64>,
    pub volumes: DVector<f64>,
    pub branches: Vec<Branch>,
    /// Nodes whose pressure landed within tolerance of their branch's fold.
    pub fold_ambiguous: Vec<usize>,
}

/// Per-output clamp pressures for the clamped phase.
///
/// An output already on its target branch is pulled partway from its free
/// pressure toward the target. An output on the wrong branch is clamped
/// past the fold it must cross: above `snap_up * p_max` to latch high, or
/// at `snap_down * p_min` to drop low. A law whose lower fold pressure is
/// not positive gets a fixed margin instead, `p_min - |snap_down - 1| *
/// (p_max - p_min)`, though no non-negative volume can realize a pressure
/// below the zero-volume pressure, so such clamps may be unreachable.
pub fn clamped_target_pressures(
    free_pressures: &DVector<f64>,
    branches: &[Branch],
    task: &LocalTask,
    law: &BistableLaw,
    config: &LocalConfig,
) -> Result<Vec<(usize, f64)>, LocalError> {
    let n = free_pressures.nrows();
    if branches.len() != n {
        return Err(LocalError::BadInput(format!(
            "{} branch labels for {n} pressures",
            branches.len()
        )));
    }
    let mut clamps = Vec::with_capacity(task.outputs.len());
    for out in &task.outputs {
        if out.node >= n {
            return Err(LocalError::BadInput(format!(
                "output node {} out of range for {n} nodes",
                out.node
            )));
        }
        if !out.feasible(law) {
            return Err(LocalError::InfeasibleTarget {
                node: out.node,
                pressure: out.pressure,
                branch: out.branch,
            });
        }
        let p_f = free_pressures[out.node];
        let p_c = if branches[out.node] == out.branch {
            p_f + config.nudge * (out.pressure - p_f)
        } else if out.branch == Branch::One {
            config.snap_up * law.p_max()
        } else {
            snap_down_pressure(law, config)
        };
        clamps.push((out.node, p_c));
    }
    Ok(clamps)
}

fn snap_down_pressure(law: &BistableLaw, config: &LocalConfig) -> f64 {
    let p_min = law.p_min();
    if p_min > 0.0 {
        config.snap_down * p_min
    } else {
        p_min - (config.snap_down - 1.0).abs() * (law.p_max() - p_min)
    }
}

/// Symmetric zero-diagonal conductance update from the two phases:
/// entry (i, j) is `learning_rate / (2 nudge)` times the squared free
/// pressure drop minus the squared clamped pressure drop across (i, j).
pub fn conductance_update(
    p_free: &DVector<f64>,
    p_clamped: &DVector<f64>,
    config: &LocalConfig,
) -> DMatrix<f64> {
    assert_eq!(
        p_free.nrows(),
        p_clamped.nrows(),
        "phase pressure vectors must cover the same nodes"
    );
    let n = p_free.nrows();
    let scale = config.learning_rate / (2.0 * config.nudge);
    let mut delta = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let df = p_free[i] - p_free[j];
            let dc = p_clamped[i] - p_clamped[j];
            let d = scale * (df * df - dc * dc);
            delta[(i, j)] = d;
            delta[(j, i)] = d;
        }
    }
    delta
}

/// Settled state under pressure clamps without integrating: solve the
/// mixed boundary problem for pressures, then resolve volumes and labels
/// against the incumbent branches.
pub fn fast_steady_update(
    net: &FlowNetwork,
    law: &BistableLaw,
    clamps: &[(usize, f64)],
    incumbent: &[Branch],
) -> Result<SteadyOutcome, LocalError> {
    let lap = net.laplacian();
    let bc = MixedBc { pressure: clamps.to_vec(), flux: Vec::new() };
    let sol = pressures_mixed_bc(&lap, &bc)?;
    let res = volumes_from_pressures(&sol.pressures, law, incumbent)?;
    Ok(SteadyOutcome {
        pressures: sol.pressures,
        volumes: res.volumes,
        branches: res.branches,
        fold_ambiguous: res.fold_ambiguous,
    })
}

#[derive(Debug, Clone)]
struct TaskState {
    volumes: DVector<f64>,
    bits: Vec<Branch>,
}

#[derive(Debug)]
struct PhaseOutcome {
    pressures: DVector<f64>,
    volumes: DVector<f64>,
    bits: Vec<Branch>,
}

fn bit_from_volume(law: &BistableLaw, v: f64, incumbent: Branch) -> Branch {
    match law.classify(v) {
        BinaryState::State0 => Branch::Zero,
        BinaryState::State1 => Branch::One,
        BinaryState::Spinodal => incumbent,
    }
}

fn solve_phase(
    net: &FlowNetwork,
    law: &BistableLaw,
    clamps: &[(usize, f64)],
    start: &TaskState,
    config: &LocalConfig,
    integrate: bool,
) -> Result<PhaseOutcome, LocalError> {
    if integrate {
        let schedule = DriveSchedule::constant_pressure(net.n(), clamps, config.sim_horizon)?;
        let traj = simulate(net, law, &start.volumes, &schedule, &config.sim)?;
        let volumes = traj.volumes.last().expect("non-empty trajectory").clone();
        let pressures = traj.pressures.last().expect("non-empty trajectory").clone();
        let bits = volumes
            .iter()
            .zip(&start.bits)
            .map(|(&v, &b)| bit_from_volume(law, v, b))
            .collect();
        Ok(PhaseOutcome { pressures, volumes, bits })
    } else {
        let out = fast_steady_update(net, law, clamps, &start.bits)?;
        Ok(PhaseOutcome { pressures: out.pressures, volumes: out.volumes, bits: out.branches })
    }
}

fn solve_phases(
    net: &FlowNetwork,
    law: &BistableLaw,
    clamp_sets: &[Vec<(usize, f64)>],
    states: &[TaskState],
    config: &LocalConfig,
    integrate: bool,
) -> Result<Vec<PhaseOutcome>, LocalError> {
    if config.parallel {
        clamp_sets
            .par_iter()
            .zip(states.par_iter())
            .map(|(c, s)| solve_phase(net, law, c, s, config, integrate))
            .collect()
    } else {
        clamp_sets
            .iter()
            .zip(states)
            .map(|(c, s)| solve_phase(net, law, c, s, config, integrate))
            .collect()
    }
}

/// Rebuild the network with the update applied to existing tubes only,
/// truncated at the conductance bounds.
fn apply_update(
    net: &FlowNetwork,
    delta: &DMatrix<f64>,
    config: &LocalConfig,
    clamp_events: &mut usize,
) -> Result<FlowNetwork, LocalError> {
    let mut tubes = Vec::with_capacity(net.tubes().len());
    for t in net.tubes() {
        let raw = t.conductance + delta[(t.i, t.j)];
        let clamped = raw.clamp(config.c_min, config.c_max);
        if clamped != raw {
            *clamp_events += 1;
        }
        tubes.push(Tube { i: t.i, j: t.j, conductance: clamped });
    }
    let rebuilt = FlowNetwork::new(net.n(), tubes, net.roles().to_vec())?;
    Ok(match net.positions() {
        Some(pos) => rebuilt.with_positions(pos.to_vec())?,
        None => rebuilt,
    })
}

/// Train tube conductances by alternating free and clamped relaxations.
///
/// Stops once the mean squared output-volume error falls to the threshold,
/// or at the iteration cap with the best network seen. The first iteration
/// always integrates the dynamics; later ones use the algebraic path when
/// `fast_path` is set. Tasks solve independently per iteration (optionally
/// in parallel) and their updates are averaged, accumulated in task order.
pub fn train_local(
    net0: &FlowNetwork,
    law: &BistableLaw,
    tasks: &[LocalTask],
    config: &LocalConfig,
) -> Result<LocalResult, LocalError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(LocalError::NoTasks);
    }
    let n = net0.n();
    for (h, task) in tasks.iter().enumerate() {
        task.validate(h, n, law)?;
    }

    // Target volumes are fixed by the law up front.
    let mut targets: Vec<Vec<(usize, f64)>> = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut per = Vec::with_capacity(task.outputs.len());
        for out in &task.outputs {
            per.push((out.node, out.volume(law)?));
        }
        targets.push(per);
    }

    let init_bit = bit_from_volume(law, config.initial_volume, Branch::Zero);
    let mut states = vec![
        TaskState {
            volumes: DVector::from_element(n, config.initial_volume),
            bits: vec![init_bit; n],
        };
        tasks.len()
    ];
    let mut prev_free_bits: Vec<Option<Vec<Branch>>> = vec![None; tasks.len()];
    let inlet_sets: Vec<Vec<(usize, f64)>> = tasks.iter().map(|t| t.inlets.clone()).collect();

    let mut net = net0.clone();
    let mut best_net = net.clone();
    let mut best_error = f64::INFINITY;
    let mut error_history = Vec::new();
    let mut snap_events = Vec::new();
    let mut clamp_events = 0usize;

    for iteration in 1..=config.max_iterations {
        let integrate = iteration == 1 || !config.fast_path;
        let free = solve_phases(&net, law, &inlet_sets, &states, config, integrate)?;

        let mut total = 0.0;
        for (h, out) in free.iter().enumerate() {
            if let Some(prev) = &prev_free_bits[h] {
                for i in 0..n {
                    if prev[i] != out.bits[i] {
                        snap_events.push(SnapEvent {
                            iteration,
                            task: h,
                            node: i,
                            from: prev[i],
                            to: out.bits[i],
                        });
                    }
                }
            }
            prev_free_bits[h] = Some(out.bits.clone());
            for &(node, v_t) in &targets[h] {
                let d = out.volumes[node] - v_t;
                total += d * d;
            }
        }
        let error = total / tasks.len() as f64;
        error_history.push(error);
        if error < best_error {
            best_error = error;
            best_net = net.clone();
        }
        if error <= config.error_threshold {
            return Ok(LocalResult {
                network: net,
                final_error: error,
                error_history,
                snap_events,
                clamp_events,
                status: LocalStatus::Converged,
                iterations: iteration,
            });
        }

        // Clamped phase: inlets plus nudged outputs, from the free end state.
        let mut clamp_sets = Vec::with_capacity(tasks.len());
        let mut free_states = Vec::with_capacity(tasks.len());
        for (task, out) in tasks.iter().zip(&free) {
            let mut clamps = task.inlets.clone();
            clamps.extend(clamped_target_pressures(&out.pressures, &out.bits, task, law, config)?);
            clamp_sets.push(clamps);
            free_states.push(TaskState { volumes: out.volumes.clone(), bits: out.bits.clone() });
        }
        let clamped = solve_phases(&net, law, &clamp_sets, &free_states, config, integrate)?;

        let mut delta = DMatrix::<f64>::zeros(n, n);
        for (out_f, out_c) in free.iter().zip(&clamped) {
            delta += conductance_update(&out_f.pressures, &out_c.pressures, config);
        }
        delta /= tasks.len() as f64;
        net = apply_update(&net, &delta, config, &mut clamp_events)?;

        // The clamped steady state opens the next iteration.
        for (state, out) in states.iter_mut().zip(clamped) {
            state.volumes = out.volumes;
            state.bits = out.bits;
        }
    }

    Ok(LocalResult {
        network: best_net,
        final_error: best_error,
        error_history,
        snap_events,
        clamp_events,
        status: LocalStatus::IterationCap,
        iterations: config.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bistable::TrilinearLaw;
    use crate::network::NodeRole;
    use approx::assert_relative_eq;

    fn law() -> BistableLaw {
        BistableLaw::default_trilinear()
    }

    fn chain3(c01: f64, c12: f64) -> FlowNetwork {
        FlowNetwork::new(
            3,
            vec![
                Tube { i: 0, j: 1, conductance: c01 },
                Tube { i: 1, j: 2, conductance: c12 },
            ],
            vec![NodeRole::Inlet, NodeRole::Output, NodeRole::Ground],
        )
        .unwrap()
    }

    fn divider_task() -> LocalTask {
        LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 5.0, branch: Branch::One }],
        }
    }

    #[test]
    fn nudge_moves_partway_toward_the_target() {
        let config = LocalConfig::default();
        let p = DVector::from_vec(vec![8.0, 2.0, 0.0]);
        let bits = vec![Branch::One, Branch::Zero, Branch::Zero];
        let task = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 4.0, branch: Branch::Zero }],
        };
        let clamps = clamped_target_pressures(&p, &bits, &task, &law(), &config).unwrap();
        assert_eq!(clamps.len(), 1);
        assert_eq!(clamps[0].0, 1);
        assert_relative_eq!(clamps[0].1, 2.5);

        let full = LocalConfig { nudge: 1.0, ..LocalConfig::default() };
        let clamps = clamped_target_pressures(&p, &bits, &task, &law(), &full).unwrap();
        assert_relative_eq!(clamps[0].1, 4.0);
    }

    #[test]
    fn wrong_branch_targets_clamp_past_the_folds() {
        let config = LocalConfig::default();
        let p = DVector::from_vec(vec![8.0, 4.0, 0.0]);

        // Reads low but should latch high: clamp above the upper fold.
        let bits = vec![Branch::One, Branch::Zero, Branch::Zero];
        let up = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 5.0, branch: Branch::One }],
        };
        let clamps = clamped_target_pressures(&p, &bits, &up, &law(), &config).unwrap();
        assert_relative_eq!(clamps[0].1, 6.0);

        // Latched high but should read low: clamp below the lower fold.
        let bits = vec![Branch::One, Branch::One, Branch::Zero];
        let down = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 3.0, branch: Branch::Zero }],
        };
        let clamps = clamped_target_pressures(&p, &bits, &down, &law(), &config).unwrap();
        assert_relative_eq!(clamps[0].1, 1.6, epsilon = 1e-12);

        // A lower fold at or below zero pressure gets a fixed margin instead.
        let low = BistableLaw::Trilinear(TrilinearLaw {
            v_max: 5.0,
            p_max: 5.0,
            v_min: 9.0,
            p_min: -1.0,
            slope0: 1.0,
            slope1: 0.5,
        });
        low.validate().unwrap();
        let clamps = clamped_target_pressures(&p, &bits, &down, &low, &config).unwrap();
        assert_relative_eq!(clamps[0].1, -2.2, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let config = LocalConfig::default();
        let p = DVector::from_vec(vec![8.0, 4.0, 0.0]);
        let bits = vec![Branch::Zero; 3];

        // Branch 0 tops out at the upper fold pressure.
        let task = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 6.0, branch: Branch::Zero }],
        };
        assert!(matches!(
            clamped_target_pressures(&p, &bits, &task, &law(), &config),
            Err(LocalError::InfeasibleTarget { node: 1, .. })
        ));

        // Branch 1 reaches nothing below the lower fold pressure.
        let task = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 1.0, branch: Branch::One }],
        };
        assert!(matches!(
            clamped_target_pressures(&p, &bits, &task, &law(), &config),
            Err(LocalError::InfeasibleTarget { node: 1, .. })
        ));

        // Task validation surfaces the same pair before training starts.
        let err = train_local(&chain3(1.0, 1.0), &law(), &[task], &config).unwrap_err();
        assert!(err.to_string().contains("infeasible target"));
    }

    #[test]
    fn tasks_with_clashing_nodes_are_rejected() {
        let net = chain3(1.0, 1.0);
        let out = OutputTarget { node: 1, pressure: 4.0, branch: Branch::Zero };
        let cases = [
            LocalTask { inlets: vec![(0, 8.0), (0, 7.0)], outputs: vec![out] },
            LocalTask {
                inlets: vec![(0, 8.0)],
                outputs: vec![OutputTarget { node: 0, pressure: 4.0, branch: Branch::Zero }],
            },
            LocalTask {
                inlets: vec![(0, 8.0)],
                outputs: vec![OutputTarget { node: 7, pressure: 4.0, branch: Branch::Zero }],
            },
            LocalTask { inlets: vec![], outputs: vec![out] },
            LocalTask { inlets: vec![(0, 8.0)], outputs: vec![] },
        ];
        for task in cases {
            assert!(matches!(
                train_local(&net, &law(), &[task], &LocalConfig::default()),
                Err(LocalError::BadTask { task: 0, .. })
            ));
        }
    }

    #[test]
    fn conductance_update_follows_the_pressure_drops() {
        let config = LocalConfig::default();
        let p = DVector::from_vec(vec![8.0, 4.0, 0.0]);
        assert_eq!(conductance_update(&p, &p, &config).amax(), 0.0);

        // Drops of 2 free and 1 clamped: (0.01 / 0.5) (4 - 1) = 0.06.
        let p_f = DVector::from_vec(vec![2.0, 0.0]);
        let p_c = DVector::from_vec(vec![1.0, 0.0]);
        let delta = conductance_update(&p_f, &p_c, &config);
        assert_relative_eq!(delta[(0, 1)], 0.06, epsilon = 1e-12);
        assert_relative_eq!(delta[(1, 0)], 0.06, epsilon = 1e-12);
        assert_eq!(delta[(0, 0)], 0.0);
        assert_eq!(delta[(1, 1)], 0.0);

        // First update of the divider fixture, by hand: the inlet-side tube
        // strengthens, the ground-side tube weakens.
        let p_f = DVector::from_vec(vec![8.0, 4.0, 0.0]);
        let p_c = DVector::from_vec(vec![8.0, 6.0, 0.0]);
        let delta = conductance_update(&p_f, &p_c, &config);
        assert_relative_eq!(delta[(0, 1)], 0.24, epsilon = 1e-12);
        assert_relative_eq!(delta[(1, 2)], -0.4, epsilon = 1e-12);
        assert_relative_eq!(delta[(0, 2)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn each_entry_depends_only_on_its_endpoints() {
        let config = LocalConfig::default();
        let p_f = DVector::from_vec(vec![3.0, 1.0, 4.0, 1.5, 9.0, 2.6]);
        let p_c = DVector::from_vec(vec![3.1, 0.8, 4.4, 1.4, 8.2, 2.7]);
        let full = conductance_update(&p_f, &p_c, &config);
        for (i, j) in [(0usize, 3usize), (2, 4), (1, 5)] {
            let pf = DVector::from_vec(vec![p_f[i], p_f[j]]);
            let pc = DVector::from_vec(vec![p_c[i], p_c[j]]);
            let pair = conductance_update(&pf, &pc, &config);
            assert_relative_eq!(full[(i, j)], pair[(0, 1)]);
        }
    }

    #[test]
    fn clamping_outputs_at_their_free_values_changes_nothing() {
        let net = chain3(1.0, 1.0);
        let bits = vec![Branch::Zero; 3];
        let inlets = [(0usize, 8.0), (2usize, 0.0)];
        let free = fast_steady_update(&net, &law(), &inlets, &bits).unwrap();
        assert_relative_eq!(free.pressures[1], 4.0, epsilon = 1e-12);

        let mut clamps = inlets.to_vec();
        clamps.push((1, free.pressures[1]));
        let clamped = fast_steady_update(&net, &law(), &clamps, &free.branches).unwrap();
        assert!((&clamped.pressures - &free.pressures).amax() < 1e-12);
        assert_eq!(clamped.branches, free.branches);
        assert!((&clamped.volumes - &free.volumes).amax() < 1e-12);

        let delta = conductance_update(&free.pressures, &clamped.pressures, &LocalConfig::default());
        assert!(delta.amax() < 1e-12);
    }

    #[test]
    fn free_phase_pressures_stay_between_the_clamp_extremes() {
        let net = FlowNetwork::new(
            6,
            vec![
                Tube { i: 0, j: 1, conductance: 1.0 },
                Tube { i: 1, j: 2, conductance: 0.7 },
                Tube { i: 2, j: 3, conductance: 1.3 },
                Tube { i: 3, j: 4, conductance: 0.9 },
                Tube { i: 4, j: 5, conductance: 1.1 },
                Tube { i: 1, j: 4, conductance: 0.6 },
                Tube { i: 0, j: 3, conductance: 0.8 },
            ],
            vec![NodeRole::Hidden; 6],
        )
        .unwrap();
        let free = fast_steady_update(&net, &law(), &[(0, 8.0), (5, 0.0)], &[Branch::Zero; 6])
            .unwrap();
        for i in 0..6 {
            assert!(free.pressures[i] >= -1e-12 && free.pressures[i] <= 8.0 + 1e-12);
        }
    }

    #[test]
    fn fast_path_tracks_integration_through_conductance_changes() {
        let law = law();
        let config = LocalConfig::default();
        let clamps = [(0usize, 8.0), (5usize, 0.0)];
        let mut tubes = vec![
            Tube { i: 0, j: 1, conductance: 1.0 },
            Tube { i: 1, j: 2, conductance: 1.0 },
            Tube { i: 2, j: 3, conductance: 1.0 },
            Tube { i: 3, j: 4, conductance: 1.0 },
            Tube { i: 4, j: 5, conductance: 1.0 },
            Tube { i: 1, j: 4, conductance: 1.0 },
            Tube { i: 0, j: 3, conductance: 1.0 },
        ];
        let mut fast_bits = vec![Branch::Zero; 6];
        let mut ode_volumes = DVector::from_element(6, 1.0);
        let mut ode_bits = vec![Branch::Zero; 6];

        for round in 0..5 {
            let m = tubes.len();
            tubes[round % m].conductance *= 1.2;
            tubes[(round + 3) % m].conductance *= 0.8;
            let net = FlowNetwork::new(6, tubes.clone(), vec![NodeRole::Hidden; 6]).unwrap();

            let fast = fast_steady_update(&net, &law, &clamps, &fast_bits).unwrap();

            let schedule = DriveSchedule::constant_pressure(6, &clamps, 300.0).unwrap();
            let traj = simulate(&net, &law, &ode_volumes, &schedule, &config.sim).unwrap();
            ode_volumes = traj.volumes.last().unwrap().clone();
            let ode_pressures = traj.pressures.last().unwrap().clone();
            for i in 0..6 {
                ode_bits[i] = bit_from_volume(&law, ode_volumes[i], ode_bits[i]);
            }

            assert!(
                (&fast.pressures - &ode_pressures).amax() < 1e-6,
                "round {round}: pressure gap {}",
                (&fast.pressures - &ode_pressures).amax()
            );
            assert_eq!(fast.branches, ode_bits, "round {round}");
            assert!((&fast.volumes - &ode_volumes).amax() < 5e-6, "round {round}");
            fast_bits = fast.branches;
        }
    }

    #[test]
    fn released_outputs_remember_their_branch() {
        let net = chain3(1.0, 1.0);
        let law = law();
        let inlets = [(0usize, 8.0), (2usize, 0.0)];

        // A fresh start reads low at the midpoint.
        let first = fast_steady_update(&net, &law, &inlets, &[Branch::Zero; 3]).unwrap();
        assert_eq!(first.branches[1], Branch::Zero);
        assert_relative_eq!(first.volumes[1], 4.0, epsilon = 1e-9);

        // Clamp the midpoint above the upper fold, then release it: the
        // same boundary pressures now settle on the upper branch.
        let mut clamps = inlets.to_vec();
        clamps.push((1, 6.0));
        let held = fast_steady_update(&net, &law, &clamps, &first.branches).unwrap();
        assert_eq!(held.branches[1], Branch::One);
        let released = fast_steady_update(&net, &law, &inlets, &held.branches).unwrap();
        assert_eq!(released.branches[1], Branch::One);
        assert_relative_eq!(released.pressures[1], 4.0, epsilon = 1e-9);
        assert_relative_eq!(released.volumes[1], 13.0, epsilon = 1e-9);

        // The integrator agrees after the same clamp-and-release sequence.
        let schedule = DriveSchedule::constant_pressure(3, &inlets, 200.0).unwrap();
        let traj =
            simulate(&net, &law, &held.volumes, &schedule, &LocalConfig::default().sim).unwrap();
        assert_relative_eq!(traj.volumes.last().unwrap()[1], 13.0, epsilon = 1e-5);
    }

    #[test]
    fn satisfied_tasks_stop_after_one_iteration() {
        let net = chain3(1.0, 1.0);
        let task = LocalTask {
            inlets: vec![(0, 8.0), (2, 0.0)],
            outputs: vec![OutputTarget { node: 1, pressure: 4.0, branch: Branch::Zero }],
        };
        let result = train_local(&net, &law(), &[task], &LocalConfig::default()).unwrap();
        assert_eq!(result.status, LocalStatus::Converged);
        assert_eq!(result.iterations, 1);
        assert_eq!(result.error_history.len(), 1);
        assert!(result.final_error <= 0.1);
        assert!(result.snap_events.is_empty());
        for t in result.network.tubes() {
            assert_relative_eq!(t.conductance, 1.0);
        }
    }

    #[test]
    fn divider_learns_a_latched_high_target() {
        let net = chain3(1.0, 1.0);
        let law = law();
        let config = LocalConfig { max_iterations: 200, ..LocalConfig::default() };
        let result = train_local(&net, &law, &[divider_task()], &config).unwrap();
        assert_eq!(result.status, LocalStatus::Converged, "history {:?}", result.error_history);
        assert!(result.final_error <= 0.1);

        // The first free phase reads low; the snap shows in the second and
        // the error falls discontinuously with it.
        let snap = result
            .snap_events
            .iter()
            .find(|e| e.node == 1)
            .expect("output must snap high");
        assert_eq!(snap.iteration, 2);
        assert_eq!(snap.from, Branch::Zero);
        assert_eq!(snap.to, Branch::One);
        let h = &result.error_history;
        assert!(h[1] < 0.01 * h[0], "expected a discontinuous drop, got {h:?}");

        // The trained divider holds the output near the target pressure.
        let bits = vec![Branch::One, Branch::One, Branch::Zero];
        let free =
            fast_steady_update(&result.network, &law, &[(0, 8.0), (2, 0.0)], &bits).unwrap();
        assert!((free.pressures[1] - 5.0).abs() < 0.2);
    }

    #[test]
    fn identical_tasks_train_like_a_single_task() {
        let net = chain3(1.0, 1.0);
        let config = LocalConfig {
            max_iterations: 6,
            error_threshold: 0.0,
            ..LocalConfig::default()
        };
        let single = train_local(&net, &law(), &[divider_task()], &config).unwrap();
        let double =
            train_local(&net, &law(), &[divider_task(), divider_task()], &config).unwrap();
        assert_eq!(single.error_history, double.error_history);

        let par = train_local(
            &net,
            &law(),
            &[divider_task(), divider_task()],
            &LocalConfig { parallel: true, ..config },
        )
        .unwrap();
        assert_eq!(par.error_history, double.error_history);
    }

    #[test]
    fn fast_and_integrated_training_agree() {
        let net = chain3(1.0, 1.0);
        let base = LocalConfig {
            max_iterations: 4,
            error_threshold: 0.0,
            ..LocalConfig::default()
        };
        let fast = train_local(&net, &law(), &[divider_task()], &base).unwrap();
        let slow = train_local(
            &net,
            &law(),
            &[divider_task()],
            &LocalConfig { fast_path: false, ..base },
        )
        .unwrap();
        assert_eq!(fast.snap_events.len(), slow.snap_events.len());
        for (a, b) in fast.error_history.iter().zip(&slow.error_history) {
            assert!(
                (a - b).abs() <= 1e-5 * a.max(1.0),
                "{:?} vs {:?}",
                fast.error_history,
                slow.error_history
            );
        }
    }

    #[test]
    fn conductance_bounds_are_enforced_and_counted() {
        let net = chain3(1.0, 1.0);
        let config = LocalConfig {
            c_max: 1.1,
            max_iterations: 4,
            error_threshold: 0.0,
            ..LocalConfig::default()
        };
        let result = train_local(&net, &law(), &[divider_task()], &config).unwrap();
        assert!(result.clamp_events >= 1);
        for t in result.network.tubes() {
            assert!(t.conductance >= config.c_min && t.conductance <= config.c_max + 1e-12);
        }
    }

    #[test]
    fn iteration_cap_returns_the_best_network_seen() {
        let net = chain3(1.0, 1.0);
        let law = law();
        let config = LocalConfig { max_iterations: 3, ..LocalConfig::default() };
        let result = train_local(&net, &law, &[divider_task()], &config).unwrap();
        assert_eq!(result.status, LocalStatus::IterationCap);
        assert_eq!(result.iterations, 3);
        assert_eq!(result.error_history.len(), 3);
        let best = result.error_history.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(result.final_error, best);

        // The returned network reproduces that error.
        let task = divider_task();
        let v_t = task.outputs[0].volume(&law).unwrap();
        let bits = vec![Branch::One, Branch::One, Branch::Zero];
        let free = fast_steady_update(&result.network, &law, &task.inlets, &bits).unwrap();
        let err = (free.volumes[1] - v_t).powi(2);
        assert_relative_eq!(err, result.final_error, epsilon = 1e-9);
    }

    #[test]
    fn bad_configs_are_rejected() {
        let net = chain3(1.0, 1.0);
        let task = divider_task();
        let cases = [
            LocalConfig { nudge: 0.0, ..LocalConfig::default() },
            LocalConfig { nudge: 1.5, ..LocalConfig::default() },
            LocalConfig { learning_rate: 0.0, ..LocalConfig::default() },
            LocalConfig { snap_up: 1.0, ..LocalConfig::default() },
            LocalConfig { snap_down: 1.0, ..LocalConfig::default() },
            LocalConfig { c_min: 0.0, ..LocalConfig::default() },
            LocalConfig { c_min: 2.0, c_max: 1.0, ..LocalConfig::default() },
            LocalConfig { max_iterations: 0, ..LocalConfig::default() },
        ];
        for config in cases {
            assert!(matches!(
                train_local(&net, &law(), &[task.clone()], &config),
                Err(LocalError::BadConfig(_))
            ));
        }
        assert!(matches!(
            train_local(&net, &law(), &[], &LocalConfig::default()),
            Err(LocalError::NoTasks)
        ));
    }
}
