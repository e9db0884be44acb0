//! Spike-based training of feedback spiking networks via implicit
//! differentiation at the equilibrium state.

pub mod backward;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod forward;
pub mod network;
pub mod neuron;
pub mod oracle;
pub mod rates;
pub mod rng;
pub mod trainer;
pub mod training;
pub mod verify;

pub use error::{Result, SpideError};
