//! Varying-coefficient dynamic spatial autoregressive panels.

pub mod changepoint;
pub mod cli;
pub mod design;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod io;
pub(crate) mod linalg;
pub mod model;
pub mod simulation;
pub mod weights;

pub use error::{Error, Result};
