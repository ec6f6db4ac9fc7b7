//! Simulator for two-dimensional grids of cortical columns of adapting
//! leaky integrate-and-fire neurons, distributed over ranks that exchange
//! spikes in address-event form.

pub mod analysis;
pub mod comm;
pub mod connectivity;
pub mod engine;
pub mod error;
pub mod harness;
pub mod meanfield;
pub mod model;
pub mod rng;
pub mod topology;

pub use error::{Error, Result};
