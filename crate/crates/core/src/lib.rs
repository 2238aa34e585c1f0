//! Particle-filter belief agents trained with A2C on Mountain Hike.
//!
//! [`belief`] holds the differentiable particle filter, [`nets`] the
//! parameterized networks and checkpoints, [`env`] the environment,
//! [`trainer`] the A2C loop and [`harness`] the experiment grids and figures.

pub mod belief;
pub mod env;
pub mod error;
pub mod harness;
pub mod nets;
pub mod rng;
pub mod trainer;

pub use error::{DpfrlError, Result};
