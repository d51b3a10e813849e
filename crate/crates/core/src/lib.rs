pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod duration;
pub mod error;
pub mod guidance;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod textio;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
