pub mod aggregator;
pub mod basis;
pub mod correlation;
pub mod energies;
pub mod error;
pub mod image;
pub mod params;
pub mod pipeline;
pub mod selfcheck;
pub mod synthetic;
pub mod warp;

pub use error::{Error, Result};
