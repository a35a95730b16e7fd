//! Arithmetic random waves on the flat torus: lattice spectra, field synthesis,
//! nodal length and Leray measure estimators, Wiener-chaos projections, limit
//! laws and an experiment harness.

pub mod chaos;
pub mod error;
pub mod field;
pub mod harness;
pub mod lattice;
pub mod limits;
pub mod nodal;

pub use error::{Error, Result};
