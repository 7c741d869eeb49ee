//! Projected gradient descent on the conductance matrix.
//!
//! Each task drives the network with a flux schedule and names the chamber
//! volumes it should settle into. The loss is the mean squared distance of
//! the settled volumes from their targets; its gradient with respect to the
//! conductance matrix is, per task, the outer product of the volume error
//! with the time integral of the node pressures up to settling. A projection
//! returns every iterate to the set of valid conductance matrices (symmetric,
//! non-positive off the diagonal, zero row sums), which can zero a tube
//! outright; training stops if that cuts the network apart.

use crate::bistable::BistableLaw;
use crate::dynamics::{simulate, DriveSchedule, DynamicsError, NodeDrive, SimOptions, Trajectory};
use crate::network::{FlowNetwork, Laplacian, NetworkError};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

/// Consecutive over-guard losses before declaring divergence.
const DIVERGENCE_RUN: usize = 10;

/// Trips after `DIVERGENCE_RUN` consecutive losses above a fixed multiple
/// of the initial loss; any loss back under the limit resets the run.
struct DivergenceGuard {
    limit: f64,
    run: usize,
}

impl DivergenceGuard {
    fn new(initial_loss: f64, factor: f64) -> Self {
        DivergenceGuard { limit: factor * initial_loss, run: 0 }
    }

    fn observe(&mut self, loss: f64) -> bool {
        if loss > self.limit {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= DIVERGENCE_RUN
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no tasks")]
    NoTasks,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("task {task}: target total volume {target:.6} does not match initial plus injected {expected:.6}")]
    VolumeMismatch { task: usize, target: f64, expected: f64 },
    #[error("task {task}: pressure drives are not allowed in flux-driven training")]
    PressureDrive { task: usize },
    #[error("trajectory not converged: no steady time detected")]
    NotConverged,
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One training example: a flux drive and the volumes it should produce.
#[derive(Debug, Clone)]
pub struct GlobalTask {
    pub schedule: DriveSchedule,
    pub target: DVector<f64>,
}

impl GlobalTask {
    /// Check the task against the shared initial volumes: sizes line up, the
    /// drive is flux-only, and the target holds exactly the volume the drive
    /// delivers (a mismatched target is unreachable for every conductance
    /// matrix, since tubes only move volume around).
    pub fn validate(&self, index: usize, v0: &DVector<f64>) -> Result<(), TrainError> {
        let n = v0.nrows();
        if self.schedule.n() != n || self.target.nrows() != n {
            return Err(TrainError::LengthMismatch(format!(
                "task {index}: schedule over {} nodes, target {} for {} initial volumes",
                self.schedule.n(),
                self.target.nrows(),
                n
            )));
        }
        for phase in self.schedule.phases() {
            if phase.drives.iter().any(|d| matches!(d, NodeDrive::Pressure(_))) {
                return Err(TrainError::PressureDrive { task: index });
            }
        }
        let expected = v0.sum() + self.schedule.injected_volume(self.schedule.t_end());
        let target = self.target.sum();
        if (target - expected).abs() > 1e-9 * expected.abs().max(1.0) {
            return Err(TrainError::VolumeMismatch { task: index, target, expected });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GlobalConfig {
    /// Step size η on the conductance matrix.
    pub learning_rate: f64,
    /// Tikhonov weight β; the step descends grad + β·Wᵀ.
    pub regularization: f64,
    /// Stop once the loss falls to this level.
    pub loss_threshold: f64,
    pub max_iterations: usize,
    /// Declare divergence after `DIVERGENCE_RUN` consecutive losses above
    /// this multiple of the initial loss.
    pub divergence_factor: f64,
    /// Integration controls for the per-task simulations. Tighter than the
    /// plain simulation defaults so settling detection stays above the
    /// integration noise floor.
    pub sim: SimOptions,
    /// Extra settled time appended analytically to the pressure integral
    /// (the integrand is constant once settled).
    pub tail_time: f64,
    /// Keep a copy of the conductance matrix every this many iterations.
    pub checkpoint_every: Option<usize>,
    /// Simulate the tasks of one iteration concurrently. Gradient
    /// accumulation stays in fixed task order either way.
    pub parallel: bool,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        GlobalConfig {
            learning_rate: 0.1,
            regularization: 1e-5,
            loss_threshold: 1e-3,
            max_iterations: 1000,
            divergence_factor: 10.0,
            sim: SimOptions { abs_tol: 1e-10, rel_tol: 1e-9, ..SimOptions::default() },
            tail_time: 0.0,
            checkpoint_every: None,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GlobalStatus {
    Converged,
    IterationCap,
    Diverged,
    SimulationFailed { iteration: usize },
    Disconnected { iteration: usize },
}

#[derive(Debug)]
pub struct GlobalResult {
    /// Conductance matrix after the last completed update.
    pub laplacian: Laplacian,
    /// Loss at every evaluation, starting with the untrained matrix.
    pub loss_history: Vec<f64>,
    pub status: GlobalStatus,
    /// Completed update steps.
    pub iterations: usize,
    pub checkpoints: Vec<(usize, Laplacian)>,
    /// Diagnostic detail for failure statuses.
    pub message: Option<String>,
}

/// Mean squared volume error across tasks: (1/k) Σ ‖v_ss − v_t‖².
pub fn loss(states: &[DVector<f64>], targets: &[DVector<f64>]) -> Result<f64, TrainError> {
    if states.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if states.len() != targets.len() {
        return Err(TrainError::LengthMismatch(format!(
            "{} states for {} targets",
            states.len(),
            targets.len()
        )));
    }
    let mut acc = 0.0;
    for (s, t) in states.iter().zip(targets) {
        if s.nrows() != t.nrows() {
            return Err(TrainError::LengthMismatch(format!(
                "state of {} entries against target of {}",
                s.nrows(),
                t.nrows()
            )));
        }
        acc += (s - t).norm_squared();
    }
    Ok(acc / states.len() as f64)
}

/// Gradient of the loss with respect to the conductance matrix:
/// (2/k) Σ (v_t − v_ss) (∫₀^{T_ss} p dt)ᵀ, the integral taken by trapezoid
/// over the accepted samples of each task's trajectory up to its detected
/// settling time (plus an optional constant tail).
pub fn loss_gradient(
    states: &[DVector<f64>],
    targets: &[DVector<f64>],
    trajectories: &[Trajectory],
    tail_time: f64,
) -> Result<DMatrix<f64>, TrainError> {
    if states.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if states.len() != targets.len() || states.len() != trajectories.len() {
        return Err(TrainError::LengthMismatch(format!(
            "{} states, {} targets, {} trajectories",
            states.len(),
            targets.len(),
            trajectories.len()
        )));
    }
    let n = states[0].nrows();
    let mut grad = DMatrix::<f64>::zeros(n, n);
    for ((v_ss, v_t), traj) in states.iter().zip(targets).zip(trajectories) {
        let t_ss = traj.steady_time.ok_or(TrainError::NotConverged)?;
        let mut integral = traj.pressure_time_integral(t_ss);
        if tail_time > 0.0 {
            integral += tail_time * traj.pressures.last().expect("non-empty trajectory");
        }
        grad += (v_t - v_ss) * integral.transpose();
    }
    grad *= 2.0 / states.len() as f64;
    Ok(grad)
}

/// One projected descent step: W ← Π(W − η(grad + β·Wᵀ)), with Π the
/// projection onto valid conductance matrices.
pub fn pgd_step(lap: &Laplacian, grad: &DMatrix<f64>, config: &GlobalConfig) -> Laplacian {
    let w = lap.matrix();
    let raw = w - config.learning_rate * (grad + config.regularization * w.transpose());
    Laplacian::project(&raw)
}

/// Train the conductance matrix by projected gradient descent.
///
/// Each iteration simulates every task from the shared initial volumes,
/// evaluates the loss, and steps against its gradient. Returns after the
/// loss crosses the threshold, the iteration cap, a sustained divergence,
/// a failed simulation, or a projection that disconnects the network.
pub fn train_global(
    net0: &FlowNetwork,
    law: &BistableLaw,
    v0: &DVector<f64>,
    tasks: &[GlobalTask],
    config: &GlobalConfig,
) -> Result<GlobalResult, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    if v0.nrows() != net0.n() {
        return Err(TrainError::LengthMismatch(format!(
            "{} initial volumes for {} nodes",
            v0.nrows(),
            net0.n()
        )));
    }
    if !(config.learning_rate > 0.0) || !(config.divergence_factor > 1.0) {
        return Err(TrainError::BadConfig(
            "learning rate must be positive and divergence factor above one".into(),
        ));
    }
    for (h, task) in tasks.iter().enumerate() {
        task.validate(h, v0)?;
    }
    let targets: Vec<DVector<f64>> = tasks.iter().map(|t| t.target.clone()).collect();

    let mut net = net0.clone();
    let mut lap = net.laplacian();
    let mut history: Vec<f64> = Vec::new();
    let mut checkpoints: Vec<(usize, Laplacian)> = Vec::new();
    let mut guard: Option<DivergenceGuard> = None;

    for iteration in 0..=config.max_iterations {
        let runs: Vec<Result<Trajectory, DynamicsError>> = if config.parallel {
            tasks
                .par_iter()
                .map(|t| simulate(&net, law, v0, &t.schedule, &config.sim))
                .collect()
        } else {
            tasks.iter().map(|t| simulate(&net, law, v0, &t.schedule, &config.sim)).collect()
        };
        let mut trajectories = Vec::with_capacity(tasks.len());
        for run in runs {
            match run {
                Ok(t) => trajectories.push(t),
                Err(e) => {
                    return Ok(GlobalResult {
                        laplacian: lap,
                        loss_history: history,
                        status: GlobalStatus::SimulationFailed { iteration },
                        iterations: iteration,
                        checkpoints,
                        message: Some(e.to_string()),
                    });
                }
            }
        }
        let states: Vec<DVector<f64>> =
            trajectories.iter().map(|t| t.volumes.last().expect("non-empty").clone()).collect();
        let current = loss(&states, &targets)?;
        history.push(current);

        if current <= config.loss_threshold {
            return Ok(GlobalResult {
                laplacian: lap,
                loss_history: history,
                status: GlobalStatus::Converged,
                iterations: iteration,
                checkpoints,
                message: None,
            });
        }
        if iteration == config.max_iterations {
            return Ok(GlobalResult {
                laplacian: lap,
                loss_history: history,
                status: GlobalStatus::IterationCap,
                iterations: iteration,
                checkpoints,
                message: None,
            });
        }
        let guard = guard
            .get_or_insert_with(|| DivergenceGuard::new(history[0], config.divergence_factor));
        if guard.observe(current) {
            return Ok(GlobalResult {
                laplacian: lap,
                loss_history: history,
                status: GlobalStatus::Diverged,
                iterations: iteration,
                checkpoints,
                message: None,
            });
        }
        if let Some(every) = config.checkpoint_every {
            if every > 0 && iteration % every == 0 {
                checkpoints.push((iteration, lap.clone()));
            }
        }

        let grad = match loss_gradient(&states, &targets, &trajectories, config.tail_time) {
            Ok(g) => g,
            Err(TrainError::NotConverged) => {
                return Ok(GlobalResult {
                    laplacian: lap,
                    loss_history: history,
                    status: GlobalStatus::SimulationFailed { iteration },
                    iterations: iteration,
                    checkpoints,
                    message: Some("a task trajectory never settled within its schedule".into()),
                });
            }
            Err(e) => return Err(e),
        };
        let next = pgd_step(&lap, &grad, config);
        match net.with_laplacian(&next) {
            Ok(rebuilt) => {
                net = rebuilt;
                lap = next;
            }
            Err(NetworkError::Disconnected) => {
                return Ok(GlobalResult {
                    laplacian: lap,
                    loss_history: history,
                    status: GlobalStatus::Disconnected { iteration },
                    iterations: iteration,
                    checkpoints,
                    message: Some("projection removed a bridging tube".into()),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("loop returns at the iteration cap");
}
