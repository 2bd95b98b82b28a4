pub mod analysis;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod layers;
pub mod model;
pub mod numerics;

pub use error::{PdsError, Result};
