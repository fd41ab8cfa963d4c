//! Schrödinger-bridge model of single-cell perturbation response: a
//! Brownian bridge over expression values and a mixture bridge over gene
//! activation, paired by entropic optimal transport.

pub mod bridge;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ot;
pub mod training;

pub use error::{Error, Result};
