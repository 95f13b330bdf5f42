//! Lab value forecasting as autoregressive generation over textualized ICU
//! event streams.

pub mod ehr;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod seeds;
pub mod textualize;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
