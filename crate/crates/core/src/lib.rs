pub mod backbone;
pub mod bench;
pub mod data;
pub mod envlab;
pub mod error;
pub mod gmm;
pub mod modes;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
