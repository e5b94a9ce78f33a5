pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod models;
pub mod scam_loss;
pub mod sharpness;
pub mod training;

pub use error::{Error, Result};
