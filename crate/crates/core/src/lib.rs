pub mod epiestim;
pub mod error;
pub mod experiment;
pub mod grad;
pub mod io;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod renewal;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
