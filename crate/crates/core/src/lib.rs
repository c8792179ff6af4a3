pub mod analysis;
pub mod baselines;
pub mod data;
pub mod defenses;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod oslo;
pub mod rng;
pub mod tensor;
pub mod transfer;

pub use error::{Error, Result};
