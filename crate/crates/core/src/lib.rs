pub mod actnet;
mod binio;
pub mod error;
pub mod slicer;
pub mod trainer;
pub mod verifier;
pub mod dynamics;
pub mod gridoracle;
mod linalg;

pub use error::{Error, Result};
