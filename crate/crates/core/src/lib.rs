pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mos;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
