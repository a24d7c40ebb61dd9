pub mod cli;
pub mod context;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod lm;
pub mod model;
pub mod settings;
pub mod synthetic;
pub mod trainer;

pub use error::{DstError, Result};
