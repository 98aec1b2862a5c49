pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fags;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
