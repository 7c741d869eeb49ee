//! Deterministic network generators.
//!
//! Every generator is a pure function of its parameters and an explicit
//! 64-bit seed. Randomness comes from ChaCha8, a counter-based stream
//! cipher, so a seed reproduces the same network on any platform.

use bistnet_core::network::NetworkError;
use bistnet_core::{FlowNetwork, NodeRole, Tube};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error("bad generator parameter: {0}")]
    Bad(String),
    #[error("packing failed: placed {placed} of {wanted} points within the proposal budget")]
    Packing { placed: usize, wanted: usize },
    #[error("no connected network found in {attempts} seeded attempts")]
    Connectivity { attempts: u64 },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Grid of `rows` × `cols` chambers at unit spacing.
///
/// Edges connect 4-neighbors, or every pair when `full_connect` is set; all
/// tubes share one conductance.
pub fn gen_lattice(
    rows: usize,
    cols: usize,
    full_connect: bool,
    conductance: f64,
) -> Result<FlowNetwork, GenError> {
    if rows == 0 || cols == 0 {
        return Err(GenError::Bad(format!("lattice needs rows, cols >= 1, got {rows}x{cols}")));
    }
    if !(conductance > 0.0) || !conductance.is_finite() {
        return Err(GenError::Bad(format!("conductance {conductance} must be finite and positive")));
    }
    let n = rows * cols;
    let at = |r: usize, c: usize| r * cols + c;
    let mut tubes = Vec::new();
    if full_connect {
        for i in 0..n {
            for j in i + 1..n {
                tubes.push(Tube { i, j, conductance });
            }
        }
    } else {
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    tubes.push(Tube { i: at(r, c), j: at(r, c + 1), conductance });
                }
                if r + 1 < rows {
                    tubes.push(Tube { i: at(r, c), j: at(r + 1, c), conductance });
                }
            }
        }
    }
    let positions: Vec<[f64; 2]> = (0..n).map(|i| [(i % cols) as f64, (i / cols) as f64]).collect();
    let net = FlowNetwork::new(n, tubes, vec![NodeRole::Hidden; n])?.with_positions(positions)?;
    Ok(net)
}

/// Parameters for the disordered planar generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisorderedParams {
    pub n: usize,
    /// Minimum pairwise point distance; also sets the box side.
    pub r_min: f64,
    /// Maximum tube length.
    pub r_connect: f64,
    /// Hard cap on node degree.
    pub k_max: usize,
    /// Conductance = 1 / (resistance_scale · distance).
    pub resistance_scale: f64,
}

impl Default for DisorderedParams {
    fn default() -> Self {
        DisorderedParams { n: 30, r_min: 1.0, r_connect: 2.2, k_max: 5, resistance_scale: 1.0 }
    }
}

/// Random planar net: hard-sphere point packing, then tubes to the nearest
/// neighbors with a degree cap and conductances inverse to tube length.
///
/// Points are rejection-sampled in a square of side r_min·√(2.5·n) so the
/// packing stays feasible. Candidate tubes shorter than `r_connect` are
/// accepted in ascending length order while both endpoint degrees stay
/// below `k_max`. If the result is disconnected, the whole construction
/// retries with a derived seed; the retry sequence is part of the contract,
/// so a seed names one network forever.
pub fn gen_disordered(params: &DisorderedParams, seed: u64) -> Result<FlowNetwork, GenError> {
    let DisorderedParams { n, r_min, r_connect, k_max, resistance_scale } = *params;
    if n < 2 {
        return Err(GenError::Bad(format!("need at least 2 nodes, got {n}")));
    }
    if !(r_min > 0.0) || !(r_connect > r_min) {
        return Err(GenError::Bad(format!(
            "radii must satisfy 0 < r_min < r_connect, got {r_min} and {r_connect}"
        )));
    }
    if k_max == 0 {
        return Err(GenError::Bad("degree cap must be at least 1".into()));
    }
    if !(resistance_scale > 0.0) {
        return Err(GenError::Bad(format!("resistance scale {resistance_scale} must be positive")));
    }

    const ATTEMPTS: u64 = 16;
    for attempt in 0..ATTEMPTS {
        // Golden-ratio stride keeps derived seeds far apart.
        let derived = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(derived);
        let Some(points) = pack_points(&mut rng, n, r_min)? else {
            continue;
        };
        if let Some(net) = link_points(&points, r_connect, k_max, resistance_scale)? {
            return Ok(net);
        }
    }
    Err(GenError::Connectivity { attempts: ATTEMPTS })
}

/// Hard-sphere rejection sampling; None when the proposal budget runs out.
fn pack_points(
    rng: &mut ChaCha8Rng,
    n: usize,
    r_min: f64,
) -> Result<Option<Vec<[f64; 2]>>, GenError> {
    let side = r_min * (2.5 * n as f64).sqrt();
    let budget = 400 * n;
    let mut points: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut proposals = 0usize;
    while points.len() < n {
        if proposals >= budget {
            // A genuinely infeasible packing fails every attempt the same
            // way; report it rather than cycling seeds forever.
            if points.len() < n / 2 {
                return Err(GenError::Packing { placed: points.len(), wanted: n });
            }
            return Ok(None);
        }
        proposals += 1;
        let p = [rng.gen::<f64>() * side, rng.gen::<f64>() * side];
        if points.iter().all(|q| dist(p, *q) >= r_min) {
            points.push(p);
        }
    }
    Ok(Some(points))
}

/// Build the capped nearest-neighbor graph; None when it comes out
/// disconnected, so the caller can retry with fresh points.
fn link_points(
    points: &[[f64; 2]],
    r_connect: f64,
    k_max: usize,
    resistance_scale: f64,
) -> Result<Option<FlowNetwork>, GenError> {
    let n = points.len();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(points[i], points[j]);
            if d <= r_connect {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));

    let mut degree = vec![0usize; n];
    let mut tubes = Vec::new();
    for (d, i, j) in candidates {
        if degree[i] < k_max && degree[j] < k_max {
            degree[i] += 1;
            degree[j] += 1;
            tubes.push(Tube { i, j, conductance: 1.0 / (resistance_scale * d) });
        }
    }
    let net = match FlowNetwork::new(n, tubes, vec![NodeRole::Hidden; n]) {
        Ok(net) => net,
        Err(NetworkError::Disconnected) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    Ok(Some(net.with_positions(points.to_vec())?))
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Diamond of four chambers: an inlet feeding two parallel branches that
/// rejoin at a grounded node.
///
/// `resistances` = [r1, r2, r3, r4]: r1, r2 from the inlet to branch nodes
/// 1, 2; r3, r4 from those nodes to ground. Conductances are reciprocals.
pub fn four_node(resistances: [f64; 4]) -> Result<FlowNetwork, GenError> {
    if resistances.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(GenError::Bad(format!("resistances {resistances:?} must all be positive")));
    }
    let [r1, r2, r3, r4] = resistances;
    let tubes = vec![
        Tube { i: 0, j: 1, conductance: 1.0 / r1 },
        Tube { i: 0, j: 2, conductance: 1.0 / r2 },
        Tube { i: 1, j: 3, conductance: 1.0 / r3 },
        Tube { i: 2, j: 3, conductance: 1.0 / r4 },
    ];
    let roles = vec![NodeRole::Inlet, NodeRole::Output, NodeRole::Output, NodeRole::Ground];
    let net = FlowNetwork::new(4, tubes, roles)?
        .with_positions(vec![[0.0, 0.0], [1.0, 1.0], [1.0, -1.0], [2.0, 0.0]])?;
    Ok(net)
}

/// Hand-built memory cell: a buffer chamber behind one weak tube, feeding a
/// fully connected cluster of five.
///
/// Node 0 is the buffer; its only tube (0,1) has conductance `weak`. Nodes
/// 1..=5 form a complete graph at conductance `strong`. A pulse into node 0
/// inflates it far past the fold before much volume leaks out, latching a
/// bit that survives later, gentler drives into the cluster.
pub fn memory_cell(weak: f64, strong: f64) -> Result<FlowNetwork, GenError> {
    if !(weak > 0.0) || !(strong > 0.0) {
        return Err(GenError::Bad(format!(
            "conductances must be positive, got weak {weak} and strong {strong}"
        )));
    }
    let mut tubes = vec![Tube { i: 0, j: 1, conductance: weak }];
    for i in 1..=5usize {
        for j in i + 1..=5 {
            tubes.push(Tube { i, j, conductance: strong });
        }
    }
    let mut roles = vec![NodeRole::Hidden; 6];
    roles[0] = NodeRole::Output;
    let net = FlowNetwork::new(6, tubes, roles)?.with_positions(vec![
        [-1.5, 0.0],
        [0.0, 0.0],
        [1.0, 0.7],
        [1.0, -0.7],
        [2.0, 0.4],
        [2.0, -0.4],
    ])?;
    Ok(net)
}
