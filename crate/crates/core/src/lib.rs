//! SOZ localisation from single-pulse stimulation responses: cohort I/O,
//! synthetic cohorts, preprocessing, divergent/convergent sample assembly,
//! patient-level cross-validated training and evaluation.
//!
//! Numeric containers are generic over the float type; the aliases below
//! fix the common choices.

pub mod dataset;
mod error;
pub mod evaluation;
pub mod experiment;
pub mod paradigm;
pub mod preprocess;
pub mod report;
pub mod synth;

pub use error::{CoreError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type ResponseTensor32 = dataset::ResponseTensor<f32>;
pub type ResponseTensor64 = dataset::ResponseTensor<f64>;
pub type AveragedResponse32 = dataset::AveragedResponse<f32>;
pub type AveragedResponse64 = dataset::AveragedResponse<f64>;
pub type Epochs32 = dataset::Epochs<f32>;
pub type Epochs64 = dataset::Epochs<f64>;
pub type PatientBank32 = paradigm::PatientBank<f32>;
pub type ParadigmSample32 = paradigm::ParadigmSample<f32>;
pub type PatientBank64 = paradigm::PatientBank<f64>;
pub type ParadigmSample64 = paradigm::ParadigmSample<f64>;
