pub mod cli;
pub mod diffusion;
pub mod dynamics;
pub mod evaluation;
pub mod error;
pub mod inverse_dynamics;
pub(crate) mod io;
pub(crate) mod linalg;
pub mod nn;
pub mod projection;
pub mod reachability;

pub use error::{Error, Result};
