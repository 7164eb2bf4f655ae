//! Recurrent fusion of several image encoders for caption generation.

mod binio;
pub mod cells;
pub mod corpus;
mod error;
pub mod inference;
pub mod numerics;
pub mod rfnet;
pub mod trainer;

pub use error::{Error, Result};
