//! Linear β schedule with cached cumulative products and a continuous-time
//! view used by the ODE sampler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DiffusionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    log_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Usage(format!(
                "invalid schedule: {steps} steps, β from {beta_start} to {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut log_alpha_bars = Vec::with_capacity(steps);
        let (mut prod, mut log_prod) = (1.0, 0.0);
        for a in &alphas {
            prod *= a;
            log_prod += a.ln();
            alpha_bars.push(prod);
            log_alpha_bars.push(log_prod);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            log_alpha_bars,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        Self::linear(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize, DiffusionError> {
        if t == 0 || t > self.len() {
            Err(DiffusionError::Usage(format!("timestep {t} outside 1..={}", self.len())))
        } else {
            Ok(t - 1)
        }
    }

    /// `β_t` for `1 ≤ t ≤ T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t` for `1 ≤ t ≤ T`; `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `log ᾱ(t)` for real `t ∈ [0, T]`, linear between integer steps.
    pub fn log_alpha_bar_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.len() as f64);
        let i = (t.floor() as usize).min(self.len() - 1);
        let lo = if i == 0 { 0.0 } else { self.log_alpha_bars[i - 1] };
        let hi = self.log_alpha_bars[i];
        lo + (t - i as f64) * (hi - lo)
    }

    pub fn alpha_bar_at(&self, t: f64) -> f64 {
        self.log_alpha_bar_at(t).exp()
    }

    /// `(α_t, σ_t) = (√ᾱ, √(1 − ᾱ))` at real `t`.
    pub fn alpha_sigma_at(&self, t: f64) -> (f64, f64) {
        let ab = self.alpha_bar_at(t);
        (ab.sqrt(), (1.0 - ab).max(0.0).sqrt())
    }

    /// Half log signal-to-noise ratio `λ = log(α/σ)`.
    pub fn lambda_at(&self, t: f64) -> f64 {
        let la = self.log_alpha_bar_at(t);
        // log σ² = log(1 − ᾱ) computed stably.
        0.5 * (la - (-la.exp_m1()).ln())
    }

    /// Inverse of [`NoiseSchedule::lambda_at`] on `[0, T]`.
    pub fn t_from_lambda(&self, lambda: f64) -> f64 {
        // ᾱ = sigmoid(2λ)  ⇒  log ᾱ = −log(1 + e^{−2λ}).
        let target = -(-2.0 * lambda).exp().ln_1p();
        if target >= 0.0 {
            return 0.0;
        }
        let idx = self.log_alpha_bars.partition_point(|&v| v > target);
        if idx >= self.len() {
            return self.len() as f64;
        }
        let lo = if idx == 0 { 0.0 } else { self.log_alpha_bars[idx - 1] };
        let hi = self.log_alpha_bars[idx];
        idx as f64 + (target - lo) / (hi - lo)
    }

    /// Closed-form marginal `√ᾱ_t u0 + √(1 − ᾱ_t) ε`.
    pub fn forward_sample(&self, u0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let i = self.check(t)?;
        if u0.len() != eps.len() {
            return Err(DiffusionError::Shape(format!("state {} vs noise {}", u0.len(), eps.len())));
        }
        let a = self.alpha_bars[i].sqrt();
        let s = (1.0 - self.alpha_bars[i]).sqrt();
        Ok(u0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}

/// Standard normal vector.
pub fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
