pub mod autodiff;
pub mod benchmarks;
pub mod cli;
pub mod constraints;
pub mod error;
pub mod kkt;
pub mod krylov;
pub mod linops;
pub mod trainers;

pub use error::{Error, Result};
