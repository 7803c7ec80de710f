//! Driver for the two-stage pose and shape pipeline: dataset generation,
//! triplane fitting, denoiser training, hypothesis estimation, evaluation.

pub mod config;
pub mod dataset;
pub mod estimate;
pub mod eval;
pub mod fields;
pub mod files;
pub mod inspect;
pub mod plot;
pub mod train;

use std::path::Path;

use norf_core::conditioning::ConditioningError;
use norf_core::diffusion::DiffusionError;
use norf_core::geometry::GeometryError;
use norf_core::metrics::MetricsError;
use norf_core::nn::NnError;
use norf_core::registration::RegistrationError;
use norf_core::triplane::FieldError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("registration failed: {0}")]
    Registration(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 for invalid input, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::Io { .. } => 2,
            PipelineError::Divergence(_) | PipelineError::Registration(_) => 3,
        }
    }
}

impl From<GeometryError> for PipelineError {
    fn from(e: GeometryError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<FieldError> for PipelineError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::Divergence(step) => PipelineError::Divergence(format!("triplane fit, step {step}")),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<DiffusionError> for PipelineError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Divergence(step) => PipelineError::Divergence(format!("diffusion, step {step}")),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<NnError> for PipelineError {
    fn from(e: NnError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<ConditioningError> for PipelineError {
    fn from(e: ConditioningError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<MetricsError> for PipelineError {
    fn from(e: MetricsError) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<RegistrationError> for PipelineError {
    fn from(e: RegistrationError) -> Self {
        PipelineError::Registration(e.to_string())
    }
}

impl From<serde_json::Error> for PipelineError {
    fn from(e: serde_json::Error) -> Self {
        PipelineError::Validation(e.to_string())
    }
}

impl From<csv::Error> for PipelineError {
    fn from(e: csv::Error) -> Self {
        PipelineError::Validation(e.to_string())
    }
}
