//! Data-driven trajectory generation for linear plants and policy-gradient
//! training on the generated data.

pub mod bench;
pub mod config;
pub mod error;
pub mod hankel;
pub mod io;
pub mod linalg;
pub mod lti;
pub mod output_gen;
pub mod policy;
pub mod sampling;
pub mod state_gen;
pub mod train;

pub use error::{Error, Result};
