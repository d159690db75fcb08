pub mod align;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extract;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
