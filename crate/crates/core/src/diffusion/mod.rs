//! Denoising diffusion: schedule, samplers, guidance, an analytic mixture
//! denoiser and small trainable denoisers.

mod mixture;
mod nets;
mod sampler;
mod schedule;
mod training;

pub use mixture::GaussianMixture;
pub use nets::{hwc_to_chw, chw_to_hwc, Arch, DenoiserNet, NetSpec, TIME_FEATURES};
pub use sampler::{ddpm_sample, dpm_solver_pp_sample, dpm_solver_pp_state, sample, Solver};
pub use schedule::{gaussian_vec, NoiseSchedule, ScheduleConfig};
pub use training::{
    make_noised_batch, training_loss, CondDropout, DiffusionTrainer, LossReport, NoisedBatch, TrainingSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite state at step {0}")]
    Divergence(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Noise predictor `ε_θ(u_t, t, c)`.
pub trait Denoiser {
    /// Values per state.
    fn state_dim(&self) -> usize;
    /// Values per conditioning payload (0 if unconditional).
    fn cond_dim(&self) -> usize;
    /// Predictions for `batch` states (concatenated) at a shared time `t`.
    /// `cond` holds `batch × cond_dim` values; `None` is the null token.
    fn epsilon(&self, x: &[f64], batch: usize, t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>, DiffusionError>;
}

/// `ε_u + w·(ε_c − ε_u)`; `w = 0` and `w = 1` return copies of the inputs.
pub fn cfg_epsilon(eps_cond: &[f64], eps_uncond: &[f64], w: f64) -> Result<Vec<f64>, DiffusionError> {
    if eps_cond.len() != eps_uncond.len() {
        return Err(DiffusionError::Shape(format!(
            "guidance inputs of length {} and {}",
            eps_cond.len(),
            eps_uncond.len()
        )));
    }
    if w == 0.0 {
        return Ok(eps_uncond.to_vec());
    }
    if w == 1.0 {
        return Ok(eps_cond.to_vec());
    }
    Ok(eps_cond.iter().zip(eps_uncond).map(|(c, u)| u + w * (c - u)).collect())
}

/// How conditioning enters each denoiser call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// Conditional prediction only.
    Conditional,
    /// Classifier-free guidance with weight `w`.
    Cfg(f64),
}

impl Guidance {
    /// Run-level weight: 0 turns guidance off.
    pub fn from_weight(w: f64) -> Result<Self, DiffusionError> {
        if !(w >= 0.0) || !w.is_finite() {
            return Err(DiffusionError::Usage(format!("guidance weight must be ≥ 0, got {w}")));
        }
        Ok(if w == 0.0 { Guidance::Conditional } else { Guidance::Cfg(w) })
    }
}

/// Guided noise prediction.
pub fn guided_epsilon<D: Denoiser + ?Sized>(
    den: &D,
    x: &[f64],
    batch: usize,
    t: f64,
    cond: Option<&[f64]>,
    guidance: Guidance,
) -> Result<Vec<f64>, DiffusionError> {
    match (guidance, cond) {
        (_, None) | (Guidance::Conditional, _) => den.epsilon(x, batch, t, cond),
        (Guidance::Cfg(w), Some(c)) => {
            if w == 1.0 {
                return den.epsilon(x, batch, t, Some(c));
            }
            let ec = den.epsilon(x, batch, t, Some(c))?;
            let eu = den.epsilon(x, batch, t, None)?;
            cfg_epsilon(&ec, &eu, w)
        }
    }
}

/// Manifest describing one sampling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRun {
    pub seed: u64,
    pub solver: Solver,
    pub steps: usize,
    pub cfg_weight: f64,
    /// Path of the conditioning payload, if any.
    pub conditioning: Option<String>,
}

impl SampleRun {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<(), DiffusionError> {
        Guidance::from_weight(self.cfg_weight)?;
        match self.solver {
            Solver::Ddpm if self.steps == 0 || self.steps > sched.len() => Err(DiffusionError::Usage(format!(
                "ddpm needs 1..={} steps, got {}",
                sched.len(),
                self.steps
            ))),
            Solver::DpmSolverPp if self.steps < 2 || self.steps > sched.len() => Err(DiffusionError::Usage(format!(
                "dpm-solver++ needs 2..={} steps, got {}",
                sched.len(),
                self.steps
            ))),
            _ => Ok(()),
        }
    }
}
