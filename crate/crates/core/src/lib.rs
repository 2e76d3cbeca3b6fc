pub mod array;
pub mod bias;
mod binio;
pub mod codebook;
pub mod diff;
pub mod error;
pub mod harness;
pub mod losses;
pub mod par;
pub mod posterior;
pub mod sampling;
pub mod stats;

pub use array::Array;
pub use error::{Error, Result};
