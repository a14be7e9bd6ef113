pub mod diagnose;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod ndcore;
pub mod params;
pub mod persist;
pub mod speedtrack;
pub mod synthdata;
pub mod trainers;

pub use error::{Error, Result};
