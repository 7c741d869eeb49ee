//! Flow-network topology: chambers joined by viscous tubes.
//!
//! A network is an undirected graph with a positive conductance per tube.
//! Pressure differences drive volumetric flow Q_ij = C_ij (p_i − p_j), so the
//! whole linear part of the dynamics is the weighted graph Laplacian
//! W_ij = −C_ij (i ≠ j), W_ii = Σ_k C_ik. Networks must be connected; that is
//! checked at construction and re-checked after every training update.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bistable::BistableLaw;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("negative conductance on tube ({i}, {j}): {value}")]
    NegativeConductance { i: usize, j: usize, value: f64 },
    #[error("zero conductance on tube ({i}, {j}); omit absent tubes instead")]
    ZeroConductance { i: usize, j: usize },
    #[error("asymmetric conductance on tube ({i}, {j}): {a} vs {b}")]
    Asymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("duplicate tube ({i}, {j}); parallel tubes are not representable")]
    DuplicateTube { i: usize, j: usize },
    #[error("self loop on node {0}")]
    SelfLoop(usize),
    #[error("tube endpoint {idx} out of range for {n} nodes")]
    NodeOutOfRange { idx: usize, n: usize },
    #[error("network is disconnected")]
    Disconnected,
    #[error("need at least one node")]
    Empty,
    #[error("node list length {got} does not match n = {n}")]
    BadNodeList { got: usize, n: usize },
    #[error("non-positive tube geometry: {0}")]
    BadGeometry(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

/// Bookkeeping role of a node within an experiment. Roles do not affect the
/// physics; boundary conditions are what drive a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    #[default]
    Hidden,
    Inlet,
    Ground,
    Output,
}

/// One tube, stored once with i < j.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tube {
    pub i: usize,
    pub j: usize,
    pub conductance: f64,
}

/// Physical tube dimensions; conductance follows the laminar-flow law
/// C = π a⁴ / (8 μ ℓ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TubeGeometry {
    pub radius: f64,
    pub length: f64,
    pub viscosity: f64,
}

impl TubeGeometry {
    pub fn conductance(&self) -> Result<f64, NetworkError> {
        if !(self.radius > 0.0) || !(self.length > 0.0) || !(self.viscosity > 0.0) {
            return Err(NetworkError::BadGeometry(format!(
                "radius {}, length {}, viscosity {}",
                self.radius, self.length, self.viscosity
            )));
        }
        Ok(std::f64::consts::PI * self.radius.powi(4) / (8.0 * self.viscosity * self.length))
    }
}

/// A validated flow network: connected, no self loops, no parallel tubes,
/// strictly positive conductances.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    n: usize,
    tubes: Vec<Tube>,
    roles: Vec<NodeRole>,
    positions: Option<Vec<[f64; 2]>>,
}

impl FlowNetwork {
    /// Builds and validates a network. Tubes may be given in either
    /// orientation; they are stored with i < j in sorted order.
    pub fn new(n: usize, tubes: Vec<Tube>, roles: Vec<NodeRole>) -> Result<Self, NetworkError> {
        if n == 0 {
            return Err(NetworkError::Empty);
        }
        if roles.len() != n {
            return Err(NetworkError::BadNodeList { got: roles.len(), n });
        }
        let mut canon: Vec<Tube> = Vec::with_capacity(tubes.len());
        for t in &tubes {
            if t.i == t.j {
                return Err(NetworkError::SelfLoop(t.i));
            }
            for idx in [t.i, t.j] {
                if idx >= n {
                    return Err(NetworkError::NodeOutOfRange { idx, n });
                }
            }
            if t.conductance < 0.0 {
                return Err(NetworkError::NegativeConductance {
                    i: t.i,
                    j: t.j,
                    value: t.conductance,
                });
            }
            if t.conductance == 0.0 {
                return Err(NetworkError::ZeroConductance { i: t.i, j: t.j });
            }
            let (i, j) = if t.i < t.j { (t.i, t.j) } else { (t.j, t.i) };
            canon.push(Tube { i, j, conductance: t.conductance });
        }
        canon.sort_by_key(|t| (t.i, t.j));
        for w in canon.windows(2) {
            if w[0].i == w[1].i && w[0].j == w[1].j {
                if w[0].conductance != w[1].conductance {
                    return Err(NetworkError::Asymmetric {
                        i: w[0].i,
                        j: w[0].j,
                        a: w[0].conductance,
                        b: w[1].conductance,
                    });
                }
                return Err(NetworkError::DuplicateTube { i: w[0].i, j: w[0].j });
            }
        }
        let net = FlowNetwork { n, tubes: canon, roles, positions: None };
        if !net.is_connected() {
            return Err(NetworkError::Disconnected);
        }
        Ok(net)
    }

    /// Single-node network (no tubes); useful for closed one-chamber systems.
    pub fn single() -> Self {
        FlowNetwork { n: 1, tubes: Vec::new(), roles: vec![NodeRole::Hidden], positions: None }
    }

    pub fn with_positions(mut self, positions: Vec<[f64; 2]>) -> Result<Self, NetworkError> {
        if positions.len() != self.n {
            return Err(NetworkError::BadNodeList { got: positions.len(), n: self.n });
        }
        self.positions = Some(positions);
        Ok(self)
    }

    pub fn set_role(&mut self, node: usize, role: NodeRole) {
        self.roles[node] = role;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tubes(&self) -> &[Tube] {
        &self.tubes
    }

    pub fn roles(&self) -> &[NodeRole] {
        &self.roles
    }

    pub fn positions(&self) -> Option<&[[f64; 2]]> {
        self.positions.as_deref()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.tubes.iter().filter(|t| t.i == node || t.j == node).count()
    }

    pub fn mean_degree(&self) -> f64 {
        2.0 * self.tubes.len() as f64 / self.n as f64
    }

    /// Dense symmetric conductance matrix (zero diagonal).
    pub fn conductance_matrix(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.n, self.n);
        for t in &self.tubes {
            c[(t.i, t.j)] = t.conductance;
            c[(t.j, t.i)] = t.conductance;
        }
        c
    }

    /// Weighted graph Laplacian of the tube conductances.
    pub fn laplacian(&self) -> Laplacian {
        Laplacian::from_conductances(&self.conductance_matrix())
    }

    /// Breadth-first connectivity over tubes with positive conductance.
    pub fn is_connected(&self) -> bool {
        if self.n == 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for t in &self.tubes {
            adj[t.i].push(t.j);
            adj[t.j].push(t.i);
        }
        let mut seen = vec![false; self.n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count == self.n
    }

    /// Rebuilds the network with new tube conductances taken from a Laplacian,
    /// dropping tubes whose conductance fell to zero. Fails if the result is
    /// disconnected.
    pub fn with_laplacian(&self, lap: &Laplacian) -> Result<Self, NetworkError> {
        let c = lap.conductances();
        let mut tubes = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if c[(i, j)] > 0.0 {
                    tubes.push(Tube { i, j, conductance: c[(i, j)] });
                }
            }
        }
        let mut net = FlowNetwork::new(self.n, tubes, self.roles.clone())?;
        net.positions = self.positions.clone();
        Ok(net)
    }
}

/// Symmetric positive semidefinite Laplacian with zero row sums. For a
/// connected network its kernel is exactly span(1), so rank is n − 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    w: DMatrix<f64>,
}

impl Laplacian {
    /// Builds W from a symmetric conductance matrix: off-diagonal −C_ij,
    /// diagonal Σ_k C_ik.
    pub fn from_conductances(c: &DMatrix<f64>) -> Self {
        let n = c.nrows();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                if i != j {
                    w[(i, j)] = -c[(i, j)];
                    row_sum += c[(i, j)];
                }
            }
            w[(i, i)] = row_sum;
        }
        Laplacian { w }
    }

    /// Wraps a raw matrix that is already a valid Laplacian; debug-asserts the
    /// structural invariants.
    pub fn from_matrix_unchecked(w: DMatrix<f64>) -> Self {
        debug_assert!(w.is_square());
        Laplacian { w }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.w
    }

    /// Recovers the conductance matrix C_ij = −W_ij, clamping tiny negative
    /// round-off to zero.
    pub fn conductances(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    c[(i, j)] = (-self.w[(i, j)]).max(0.0);
                }
            }
        }
        c
    }

    /// Maximum absolute row-sum deviation from zero; a structural residual.
    pub fn row_sum_defect(&self) -> f64 {
        (0..self.n())
            .map(|i| self.w.row(i).sum().abs())
            .fold(0.0, f64::max)
    }

    /// Projects an arbitrary square matrix onto the set of valid Laplacians:
    /// off-diagonal entries clamped non-positive, symmetrized, diagonal reset
    /// so every row sums to zero. Idempotent, and the identity on matrices
    /// that are already valid Laplacians.
    pub fn project(m: &DMatrix<f64>) -> Laplacian {
        let n = m.nrows();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let sym = 0.5 * (m[(i, j)] + m[(j, i)]);
                    w[(i, j)] = sym.min(0.0);
                }
            }
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = -off;
        }
        Laplacian { w }
    }

    /// W·p.
    pub fn apply(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.w * p
    }

    /// Reduced Laplacian with one node's row and column removed.
    pub fn reduced(&self, drop: usize) -> DMatrix<f64> {
        let n = self.n();
        let keep: Vec<usize> = (0..n).filter(|&k| k != drop).collect();
        DMatrix::from_fn(n - 1, n - 1, |r, c| self.w[(keep[r], keep[c])])
    }
}

// --- File format -----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    #[serde(default)]
    role: NodeRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 2]>,
}

/// On-disk form of a network plus its constitutive law. Tubes are an edge
/// list, so absent tubes are absent entries rather than zeros.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub n: usize,
    nodes: Vec<NodeRecord>,
    tubes: Vec<Tube>,
    pub law: BistableLaw,
}

impl NetworkDocument {
    pub fn new(net: &FlowNetwork, law: &BistableLaw) -> Self {
        let nodes = (0..net.n())
            .map(|id| NodeRecord {
                id,
                role: net.roles()[id],
                position: net.positions().map(|p| p[id]),
            })
            .collect();
        NetworkDocument {
            n: net.n(),
            nodes,
            tubes: net.tubes().to_vec(),
            law: law.clone(),
        }
    }

    /// Validates and lowers the document to a network and law.
    pub fn into_parts(self) -> Result<(FlowNetwork, BistableLaw), NetworkError> {
        if self.nodes.len() != self.n {
            return Err(NetworkError::BadNodeList { got: self.nodes.len(), n: self.n });
        }
        let mut roles = vec![NodeRole::Hidden; self.n];
        let mut positions = vec![None; self.n];
        let mut seen = vec![false; self.n];
        for rec in &self.nodes {
            if rec.id >= self.n {
                return Err(NetworkError::NodeOutOfRange { idx: rec.id, n: self.n });
            }
            if seen[rec.id] {
                return Err(NetworkError::Schema(format!("node id {} listed twice", rec.id)));
            }
            seen[rec.id] = true;
            roles[rec.id] = rec.role;
            positions[rec.id] = rec.position;
        }
        let mut net = FlowNetwork::new(self.n, self.tubes, roles)?;
        if positions.iter().all(|p| p.is_some()) {
            net = net.with_positions(positions.into_iter().map(|p| p.unwrap()).collect())?;
        }
        self.law
            .validate()
            .map_err(|e| NetworkError::Schema(e.to_string()))?;
        Ok((net, self.law))
    }
}

/// Serializes a network and law to deterministic pretty JSON.
pub fn to_json(net: &FlowNetwork, law: &BistableLaw) -> String {
    serde_json::to_string_pretty(&NetworkDocument::new(net, law)).expect("network serializes")
}

/// Parses and validates a network document.
pub fn from_json(text: &str) -> Result<(FlowNetwork, BistableLaw), NetworkError> {
    let doc: NetworkDocument =
        serde_json::from_str(text).map_err(|e| NetworkError::Schema(e.to_string()))?;
    doc.into_parts()
}
