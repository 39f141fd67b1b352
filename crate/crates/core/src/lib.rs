pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pointops;
pub mod runner;
pub mod vocab;

pub use error::{Error, Result};
pub mod model;
