//! Simulation, analysis, and training of bistable flow networks.
//!
//! The model: hyperelastic chambers with a non-monotonic pressure–volume
//! curve, connected by viscous tubes. Chamber volumes evolve by
//! dv/dt = −W·p(v) + q, where W is the weighted graph Laplacian of the tube
//! conductances and q holds external flux drives. Each chamber is bistable,
//! so a network of n chambers stores up to n bits in its steady state, and
//! adjusting conductances trains which state each drive pattern selects.
//!
//! Module map:
//! - [`bistable`]: the chamber pressure–volume laws
//! - [`network`]: topology, Laplacian, serialization
//! - [`dynamics`]: transient simulation with boundary drives
//! - [`steadystate`]: linear steady-state solvers and equilibrium enumeration
//! - [`stability`]: equilibrium classification
//! - [`train`]: global (projected gradient) and local (two-phase contrastive)
//!   conductance learning

pub mod bistable;
pub mod dynamics;
pub mod network;
pub mod stability;
pub mod steadystate;
pub mod train;

pub use bistable::{BinaryState, BistableLaw, Branch, LawError};
pub use network::{FlowNetwork, Laplacian, NetworkError, NodeRole, Tube, TubeGeometry};
