pub mod attack;
pub mod baseline;
pub mod concepts;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod image;
pub mod importance;
pub mod model;
pub mod store;
pub mod util;

pub use error::{Error, Result};
