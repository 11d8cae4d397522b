//! Synthesis and statistical analysis of one-dimensional turbulent velocity
//! fields with a multiscale, multicriteria generative adversarial network.

pub mod discriminators;
pub mod error;
pub mod field;
pub mod generator;
pub mod nn;
pub mod oracles;
pub mod report;
pub mod stats;
pub mod svg;
pub mod training;

pub use error::{Error, Result};
pub use field::{FieldEnsemble, FieldMeta, ScaleGrid};
