//! Black-box simulators, action polytopes, trajectories and datasets.

mod controllers;
mod dataset;
mod env;
mod polytope;
mod trajectory;

pub use controllers::{generate_dataset, Controller, CONTROLLER_NAMES};
pub use dataset::{Dataset, NormStats};
pub use env::{Action, Env, EnvSpec, Integrator, Kinematic, SlalomCourse, State, ENV_NAMES};

pub use polytope::{ActionPolytope, MAX_CORNER_DIM};
pub use trajectory::Trajectory;
