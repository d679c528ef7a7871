pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod model;
pub mod nn;
pub mod rope;
pub mod tokenizer;
pub mod training;
pub mod toyworld;
pub mod tensor;

pub use error::{Error, Result};
