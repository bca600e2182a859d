pub mod analytic;
pub mod config;
pub mod convergence;
pub mod error;
pub mod grid;
pub mod linalg;
pub mod market;
pub mod problem;
pub mod regions;
pub mod snapshot;
pub mod sim;
pub mod solver;
pub mod stencil;
pub mod terminal;
pub mod utility;

pub use error::{Error, Result};
