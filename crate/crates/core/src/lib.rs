//! Provenance fields: distributions over the camera-space locations that
//! observe each point of a reconstructed scene.
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod applications;
pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod geometry;
pub mod io;
pub mod provenance;
pub mod scene;
pub mod uncertainty;

pub use error::{Error, Result};
