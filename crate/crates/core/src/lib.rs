//! Automatic MRI sequence classification: ingestion, preprocessing, 3-D CNN
//! classifiers, cross-validated training, evaluation and a synthetic phantom
//! generator.

pub mod config;
pub mod fingerprint;
pub mod ingestion;
pub mod rng;
pub mod preprocessing;
pub mod tensor;
pub mod model;
pub mod phantom;
pub mod evaluation;
pub mod training;
pub mod pipeline;
