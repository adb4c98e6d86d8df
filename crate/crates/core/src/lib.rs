//! Integrated Conceptual Sensitivity for small dense networks.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to the two IEEE widths.

// `!(x > 0)` is the NaN-rejecting form of a positivity check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod barsdata;
pub mod cav;
pub mod error;
pub mod harness;
pub mod netcore;
pub mod scalar;
pub mod scores;
pub mod streams;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double precision network, the default for attribution work.
pub type Network = netcore::Network<f64>;
pub type Cav = cav::Cav<f64>;
pub type ConceptSet = cav::ConceptSet<f64>;
pub type ActivationVector = netcore::ActivationVector<f64>;

/// Single precision variants.
pub type Network32 = netcore::Network<f32>;
pub type Cav32 = cav::Cav<f32>;
