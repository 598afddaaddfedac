//! Projectors onto one-step reachable sets.

mod correction;
mod projector;
mod simplex;

pub use correction::{train_correction_policy, CorrectionConfig, CorrectionPolicy};
pub use projector::{
    project_state, project_trajectory, ProjectedTrajectory, ProjectorKind, ProjectorTag,
    StepProjection, PROJECTOR_NAMES,
};
pub use simplex::{project_to_hull, project_to_hull_with, SimplexSolution, SolverOptions};
