//! Reachability-based guidance and safety filtering for multi-vehicle
//! air-corridor merging.
//!
//! The crate is organized around an offline/online split:
//!
//! * [`grid`] — N-dimensional sampled fields with interpolation, finite
//!   differences, and the `VFGRID1` binary format.
//! * [`dynamics`] — air-taxi kinematics, relative-pair dynamics, corridor
//!   geometry, and physical parameters.
//! * [`reachability`] — offline Hamilton-Jacobi level-set solves: the
//!   reach-avoid value function and minimum time-to-reach field for corridor
//!   entry, and the pairwise safety value function.
//! * [`guidance`] — strategic layer: time-to-reach priority assignment,
//!   target-TTR scheduling, TTR-optimal and TTR-separation control laws, and
//!   the downstream-region guard.
//! * [`safety`] — tactical layer: a small dense QP solver, CBF constraint
//!   assembly from the pairwise value function, and the decentralized /
//!   priority-coordinated / centralized filter architectures.
//! * [`sim`] — closed-loop multi-vehicle episodes and seeded scenario
//!   batches.
//! * [`metrics`] — safety / fairness / efficiency metrics per run and
//!   aggregated per batch.
//! * [`config`] — run configuration shared by the CLI and the library.

pub mod config;
pub mod dynamics;
pub mod grid;
pub mod guidance;
pub mod metrics;
pub mod reachability;
pub mod safety;
pub mod sim;

pub use config::RunConfig;
pub use dynamics::{Control, RelativeState, VehicleParams, VehicleState, Wind};
pub use grid::{AxisSpec, GridField, GridSpec};
pub use reachability::{SolveReport, SolverSettings, TtrField};
pub use sim::{FieldSet, Scenario, TrajectoryLog};
