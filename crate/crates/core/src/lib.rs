//! Training-free semantic rectification for toy flow-matching generators.
//!
//! A conditional velocity field is steered during sampling by gradients of an
//! alignment loss computed by a separate understanding model (the oracle),
//! with greedy candidate selection at each rectified step.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod gito;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod rectify;
pub mod rng;
pub mod velocity;

pub use error::{Error, Result};
