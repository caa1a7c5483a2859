pub mod allocation;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod nemytskij;
pub mod noise;
pub mod reference;
pub mod scheme;
pub mod spectral;
pub mod timegrid;
pub mod transform;

pub use error::{Error, Result};
