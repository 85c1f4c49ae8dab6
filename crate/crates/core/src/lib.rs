//! Wireless channel synthesis, manifold profiling, masked channel modeling,
//! pilot-aided estimation, test-time adaptation and scaling experiments.

pub mod channel;
pub mod error;
pub mod estimation;
pub mod mae;
pub mod manifold;
pub mod nn;
pub mod rng;
pub mod scaling;
pub mod serde_ext;
pub mod ttt;

pub use error::{Error, Result};
