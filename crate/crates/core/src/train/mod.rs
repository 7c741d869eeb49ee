//! Supervised training of tube conductances.
//!
//! Two regimes share the same trainable degree of freedom, the conductance of
//! every tube, but differ in what knowledge the update may use. Global
//! training treats the whole conductance matrix as a parameter block and
//! descends an explicit volume loss along its gradient. Local training only
//! ever compares two physical steady states per tube, the drive alone versus
//! the drive plus gently clamped outputs, so each tube updates from pressures
//! at its own endpoints.

pub mod global;
pub mod local;

pub use global::{
    loss, loss_gradient, pgd_step, train_global, GlobalConfig, GlobalResult, GlobalStatus,
    GlobalTask, TrainError,
};
pub use local::{
    clamped_target_pressures, conductance_update, fast_steady_update, train_local, LocalConfig,
    LocalError, LocalResult, LocalStatus, LocalTask, OutputTarget, SnapEvent, SteadyOutcome,
};
