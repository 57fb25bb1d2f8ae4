//! Partial spatio-temporal self-supervised learning for skeleton sequences.

pub mod augment;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod masking;
pub mod training;

pub use error::{Error, Result};
