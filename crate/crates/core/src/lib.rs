//! Low-rank tensor completion under missing-not-at-random observation.

pub mod error;
pub mod estimator;
pub mod family;
pub mod inference;
pub mod io;
pub mod likelihood;
pub mod missingness;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
