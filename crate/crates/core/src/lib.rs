pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fields;
pub mod hash_encoding;
pub mod hypernet;
pub mod networks;
pub mod numerics;
pub mod pipeline;
pub mod renderer;
pub mod sampling;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
