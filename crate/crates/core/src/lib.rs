//! Dyadic sparse-domination machinery for discretized rough bilinear singular
//! integrals on the line.

pub mod dyadic;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod localnorms;
pub mod lp;
pub mod sparse;
pub mod weights;

pub use error::{Error, Result};
