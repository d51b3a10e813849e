//! Differentiable-array substrate: dense arrays, a reverse-mode tape,
//! parameter storage with an adaptive-moment optimizer, and composite layers.

mod array;
pub mod nn;
mod params;
mod tape;

pub use array::{Array, Scalar};
pub use params::{Adam, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
