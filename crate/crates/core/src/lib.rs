//! Finite-difference pricing under stochastic local volatility with
//! consistent backward (option value) and forward (density) ADI schemes.

pub mod benchmark;
pub mod dividends;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod induction;
pub mod jumps;
pub mod linalg;
pub mod model;
pub mod operators;
pub mod quad;
pub mod schemes;

pub use error::{Error, Result};
