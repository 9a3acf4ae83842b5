pub mod error;
pub mod exec;
pub mod faults;
pub mod harness;
pub mod mapping;
pub mod nn;
pub mod numerics;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
