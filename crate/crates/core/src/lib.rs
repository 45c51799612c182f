pub mod annealing;
pub mod buffer;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod net;
pub mod numerics;
pub mod optim;
pub mod report;
pub mod runner;
pub mod sde;
pub mod smc;
pub mod target;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
