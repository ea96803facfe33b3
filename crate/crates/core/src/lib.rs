//! Pre-filling the findings section of a chest X-ray report from the
//! current image plus the previous visit's image and report.
//!
//! The pipeline runs from visit metadata to paired longitudinal samples
//! ([`corpus`]), through tokenization ([`text`]) and image features
//! ([`vision`]), into the model ([`encoders`], [`fusion`],
//! [`memory_decoder`], assembled in [`model`]), which [`training`] fits and
//! [`evaluation`] scores.

pub mod config;
pub mod corpus;
pub mod error;
pub mod encoders;
pub mod evaluation;
pub mod fixture;
pub mod fusion;
pub mod memory_decoder;
pub mod model;
pub mod text;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
pub mod nn;
