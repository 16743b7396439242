pub mod augment;
pub mod beamforming;
mod binio;
pub mod channel;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mapper;
pub mod nn;
pub mod optimizer;
pub mod rng;

pub use error::{Error, Result};
