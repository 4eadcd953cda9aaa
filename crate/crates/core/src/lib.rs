//! Variance-reduced masked language model pretraining on a toy transformer.
//!
//! A learned proposal network picks which positions to mask; the encoder
//! loss is reweighted by the likelihood ratio against uniform masking. The
//! [`variance_lab`] module checks the variance identities behind the scheme
//! by exhaustive enumeration of mask subsets.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod mask_proposal;
pub mod masking;
pub mod model;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod variance_lab;

pub use error::{Error, Result};
