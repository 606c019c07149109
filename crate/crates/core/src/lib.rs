//! Data-free quality audit of neural-network weight files.
//!
//! Given only serialized weight tensors, the pipeline computes each
//! layer's eigenvalue spectrum, fits the spectral tail to a power law,
//! aggregates norm-based and exponent-based quality metrics per model,
//! and regresses those metrics against externally reported accuracies
//! across an architecture series.

pub mod cli;
pub mod config;
pub mod extract;
pub mod metrics;
pub mod powerlaw;
pub mod regression;
pub mod report;
pub mod spectral;
pub mod tensor_io;
