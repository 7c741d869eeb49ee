//! Boundary-drive schedules: per-node assignments over ordered time phases.
//!
//! Within a phase each node is free, pressure-clamped at a constant value, or
//! flux-driven by piecewise-constant pulses. Phases must tile [0, t_end]
//! contiguously; the integrator never steps across a phase boundary or a pulse
//! edge, so the right-hand side stays smooth inside every integration segment.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::DynamicsError;

/// Constant-rate injection over [start, end); negative rates withdraw fluid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluxPulse {
    pub start: f64,
    pub end: f64,
    pub rate: f64,
}

impl FluxPulse {
    pub fn new(start: f64, end: f64, rate: f64) -> Self {
        FluxPulse { start, end, rate }
    }

    pub fn active(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }

    /// Volume delivered up to time t.
    pub fn delivered(&self, t: f64) -> f64 {
        self.rate * (t.min(self.end) - self.start).max(0.0)
    }
}

/// How one node is driven during one phase.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum NodeDrive {
    #[default]
    Free,
    Pressure(f64),
    Flux(Vec<FluxPulse>),
}

/// One time window with a complete per-node drive assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub start: f64,
    pub end: f64,
    pub drives: Vec<NodeDrive>,
}

impl Phase {
    /// All-free phase over [start, end].
    pub fn free(n: usize, start: f64, end: f64) -> Self {
        Phase { start, end, drives: vec![NodeDrive::Free; n] }
    }

    pub fn pressure(mut self, node: usize, value: f64) -> Self {
        self.drives[node] = NodeDrive::Pressure(value);
        self
    }

    pub fn flux(mut self, node: usize, pulses: Vec<FluxPulse>) -> Self {
        self.drives[node] = NodeDrive::Flux(pulses);
        self
    }
}

/// Validated drive schedule for an n-node network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ScheduleDoc", try_from = "ScheduleDoc")]
pub struct DriveSchedule {
    n: usize,
    phases: Vec<Phase>,
}

impl DriveSchedule {
    pub fn new(n: usize, phases: Vec<Phase>) -> Result<Self, DynamicsError> {
        let bad = |msg: String| Err(DynamicsError::Schedule(msg));
        if n == 0 {
            return bad("schedule needs at least one node".into());
        }
        if phases.is_empty() {
            return bad("schedule needs at least one phase".into());
        }
        if phases[0].start != 0.0 {
            return bad(format!("first phase must start at 0, got {}", phases[0].start));
        }
        for (k, ph) in phases.iter().enumerate() {
            if !(ph.end > ph.start) {
                return bad(format!("phase {k} must have start < end"));
            }
            if ph.drives.len() != n {
                return bad(format!(
                    "phase {k} lists {} drives for {n} nodes",
                    ph.drives.len()
                ));
            }
            if k > 0 && phases[k - 1].end != ph.start {
                return bad(format!("phase {k} must start where phase {} ends", k - 1));
            }
            for (node, d) in ph.drives.iter().enumerate() {
                match d {
                    NodeDrive::Free => {}
                    NodeDrive::Pressure(p) => {
                        if !p.is_finite() {
                            return bad(format!("non-finite clamp pressure on node {node}"));
                        }
                    }
                    NodeDrive::Flux(pulses) => {
                        let mut sorted: Vec<&FluxPulse> = pulses.iter().collect();
                        sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
                        for w in sorted.windows(2) {
                            if w[1].start < w[0].end {
                                return bad(format!("overlapping pulses on node {node}"));
                            }
                        }
                        for p in pulses {
                            if !(p.end > p.start) {
                                return bad(format!("empty pulse on node {node}"));
                            }
                            if p.start < ph.start || p.end > ph.end {
                                return bad(format!(
                                    "pulse [{}, {}] leaves phase {k} window on node {node}",
                                    p.start, p.end
                                ));
                            }
                            if !p.rate.is_finite() {
                                return bad(format!("non-finite pulse rate on node {node}"));
                            }
                        }
                    }
                }
            }
        }
        Ok(DriveSchedule { n, phases })
    }

    /// Single all-free phase: a closed relaxation over [0, t_end].
    pub fn free(n: usize, t_end: f64) -> Self {
        DriveSchedule::new(n, vec![Phase::free(n, 0.0, t_end)]).expect("valid free schedule")
    }

    /// Single phase with constant pressure clamps on the listed nodes.
    pub fn constant_pressure(
        n: usize,
        clamps: &[(usize, f64)],
        t_end: f64,
    ) -> Result<Self, DynamicsError> {
        let mut ph = Phase::free(n, 0.0, t_end);
        for &(node, p) in clamps {
            ph = ph.pressure(node, p);
        }
        DriveSchedule::new(n, vec![ph])
    }

    /// Single phase with flux pulses on the listed nodes.
    pub fn with_flux_pulses(
        n: usize,
        pulses: &[(usize, Vec<FluxPulse>)],
        t_end: f64,
    ) -> Result<Self, DynamicsError> {
        let mut ph = Phase::free(n, 0.0, t_end);
        for (node, ps) in pulses {
            ph = ph.flux(*node, ps.clone());
        }
        DriveSchedule::new(n, vec![ph])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t_end(&self) -> f64 {
        self.phases.last().unwrap().end
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    /// Phase covering time t; boundaries belong to the later phase, and the
    /// final phase includes its end.
    pub fn phase_index(&self, t: f64) -> usize {
        for (k, ph) in self.phases.iter().enumerate() {
            if t < ph.end {
                return k;
            }
        }
        self.phases.len() - 1
    }

    /// Pressure-clamped nodes of a phase with their prescribed values.
    pub fn pressure_clamps(&self, phase: usize) -> Vec<(usize, f64)> {
        self.phases[phase]
            .drives
            .iter()
            .enumerate()
            .filter_map(|(i, d)| match d {
                NodeDrive::Pressure(p) => Some((i, *p)),
                _ => None,
            })
            .collect()
    }

    /// External flux into each node at time t (pulse windows are end-exclusive).
    pub fn flux_vector(&self, t: f64) -> DVector<f64> {
        let ph = &self.phases[self.phase_index(t)];
        let mut q = DVector::zeros(self.n);
        for (i, d) in ph.drives.iter().enumerate() {
            if let NodeDrive::Flux(pulses) = d {
                q[i] = pulses.iter().filter(|p| p.active(t)).map(|p| p.rate).sum();
            }
        }
        q
    }

    /// Exact cumulative injected volume ∫ 1ᵀq dτ up to time t.
    pub fn injected_volume(&self, t: f64) -> f64 {
        let mut total = 0.0;
        for ph in &self.phases {
            for d in &ph.drives {
                if let NodeDrive::Flux(pulses) = d {
                    total += pulses.iter().map(|p| p.delivered(t)).sum::<f64>();
                }
            }
        }
        total
    }

    /// Times where the right-hand side may jump inside [0, t_end]: phase
    /// boundaries plus pulse edges, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts = Vec::new();
        for ph in &self.phases {
            ts.push(ph.start);
            ts.push(ph.end);
            for d in &ph.drives {
                if let NodeDrive::Flux(pulses) = d {
                    for p in pulses {
                        ts.push(p.start);
                        ts.push(p.end);
                    }
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        ts
    }

    /// Latest time at which the drive pattern changes: the last pulse edge or
    /// phase switch. After this the system only relaxes, so a quiet dwell can
    /// end the run early.
    pub fn last_activity(&self) -> f64 {
        let mut last: f64 = 0.0;
        for (k, ph) in self.phases.iter().enumerate() {
            if k > 0 {
                last = last.max(ph.start);
            }
            for d in &ph.drives {
                if let NodeDrive::Flux(pulses) = d {
                    for p in pulses {
                        last = last.max(p.end);
                    }
                }
            }
        }
        last
    }
}

// --- File format -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DriveDoc {
    Pressure { value: f64 },
    Flux { pulses: Vec<FluxPulse> },
}

#[derive(Serialize, Deserialize)]
struct PhaseDoc {
    start: f64,
    end: f64,
    drives: Vec<NodeDriveDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDriveDoc {
    node: usize,
    #[serde(flatten)]
    drive: DriveDoc,
}

/// Sparse on-disk form: only driven nodes are listed per phase.
#[derive(Serialize, Deserialize)]
pub struct ScheduleDoc {
    n: usize,
    phases: Vec<PhaseDoc>,
}

impl From<DriveSchedule> for ScheduleDoc {
    fn from(s: DriveSchedule) -> Self {
        let phases = s
            .phases
            .iter()
            .map(|ph| PhaseDoc {
                start: ph.start,
                end: ph.end,
                drives: ph
                    .drives
                    .iter()
                    .enumerate()
                    .filter_map(|(node, d)| match d {
                        NodeDrive::Free => None,
                        NodeDrive::Pressure(value) => {
                            Some(NodeDriveDoc { node, drive: DriveDoc::Pressure { value: *value } })
                        }
                        NodeDrive::Flux(pulses) => Some(NodeDriveDoc {
                            node,
                            drive: DriveDoc::Flux { pulses: pulses.clone() },
                        }),
                    })
                    .collect(),
            })
            .collect();
        ScheduleDoc { n: s.n, phases }
    }
}

impl TryFrom<ScheduleDoc> for DriveSchedule {
    type Error = DynamicsError;

    fn try_from(doc: ScheduleDoc) -> Result<Self, Self::Error> {
        let mut phases = Vec::with_capacity(doc.phases.len());
        for ph in doc.phases {
            let mut phase = Phase::free(doc.n, ph.start, ph.end);
            for nd in ph.drives {
                if nd.node >= doc.n {
                    return Err(DynamicsError::Schedule(format!(
                        "driven node {} out of range for {} nodes",
                        nd.node, doc.n
                    )));
                }
                phase.drives[nd.node] = match nd.drive {
                    DriveDoc::Pressure { value } => NodeDrive::Pressure(value),
                    DriveDoc::Flux { pulses } => NodeDrive::Flux(pulses),
                };
            }
            phases.push(phase);
        }
        DriveSchedule::new(doc.n, phases)
    }
}
