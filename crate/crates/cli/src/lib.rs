//! Command-line frontend: network generators, a scenario catalog, and a
//! runner that writes every artifact of an experiment to disk.
//!
//! Seeds are taken as plain `u64` and expanded with a counter-based stream
//! cipher generator, so a scenario file replays to the same network and the
//! same ensemble on any platform.

pub mod gen;
pub mod scenario;

pub use gen::{four_node, gen_disordered, gen_lattice, memory_cell, DisorderedParams, GenError};
pub use scenario::{
    catalog, find_scenario, run_scenario, OutputFormat, RunLog, RunOutcome, Scenario,
    ScenarioError,
};
