//! Closed-form noise predictor for data drawn from a mixture of isotropic
//! Gaussians.
//!
//! If `u0 ~ Σ w_k N(μ_k, s_k² I)` then the noised marginal is
//! `p_t(u) = Σ w_k N(u; α μ_k, v_k I)` with `α = √ᾱ_t`, `σ² = 1 − ᾱ_t` and
//! `v_k = α² s_k² + σ²`. Its score is `∇ log p_t = −Σ r_k (u − α μ_k) / v_k`
//! with posterior responsibilities `r_k ∝ w_k N(u; α μ_k, v_k I)`, so the
//! optimal noise prediction is `ε* = −σ ∇ log p_t = σ Σ r_k (u − α μ_k) / v_k`.

use super::schedule::NoiseSchedule;
use super::{Denoiser, DiffusionError};

/// Variances below this are clamped.
pub const MIN_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    stds: Vec<f64>,
    sched: NoiseSchedule,
}

impl GaussianMixture {
    /// Weights are normalised. All means share one dimension.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>, sched: &NoiseSchedule) -> Result<Self, DiffusionError> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(DiffusionError::Shape("mixture needs matching weights, means and stds".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(DiffusionError::Shape("mixture means differ in dimension".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || stds.iter().any(|s| !(*s >= 0.0)) {
            return Err(DiffusionError::Usage("mixture weights and stds must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(DiffusionError::Usage("mixture weights sum to zero".into()));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            stds,
            sched: sched.clone(),
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Per-component log of `w_k N(u; α μ_k, v_k I)` and the variances.
    fn log_terms(&self, u: &[f64], t: f64, weights: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let (a, s) = self.sched.alpha_sigma_at(t);
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(self.components());
        let mut vars = Vec::with_capacity(self.components());
        for ((w, mu), sd) in weights.iter().zip(&self.means).zip(&self.stds) {
            let v = (a * a * sd * sd + s * s).max(MIN_VARIANCE);
            let r2: f64 = u.iter().zip(mu).map(|(x, m)| (x - a * m).powi(2)).sum();
            let lw = if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            logs.push(lw - 0.5 * r2 / v - 0.5 * d * (2.0 * std::f64::consts::PI * v).ln());
            vars.push(v);
        }
        (logs, vars, a)
    }

    /// `log p_t(u)`.
    pub fn log_density(&self, u: &[f64], t: f64) -> f64 {
        let (logs, _, _) = self.log_terms(u, t, &self.weights);
        log_sum_exp(&logs)
    }

    /// `∇ log p_t(u)`.
    pub fn score(&self, u: &[f64], t: f64) -> Vec<f64> {
        self.score_with(u, t, &self.weights)
    }

    fn score_with(&self, u: &[f64], t: f64, weights: &[f64]) -> Vec<f64> {
        let (logs, vars, a) = self.log_terms(u, t, weights);
        let lse = log_sum_exp(&logs);
        let mut g = vec![0.0; u.len()];
        for ((l, v), mu) in logs.iter().zip(&vars).zip(&self.means) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for ((gi, x), m) in g.iter_mut().zip(u).zip(mu) {
                *gi -= r * (x - a * m) / v;
            }
        }
        g
    }

    fn cond_weights(&self, c: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let total: f64 = c.iter().sum();
        if c.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(DiffusionError::Usage("conditioning weights must be non-negative and not all zero".into()));
        }
        Ok(c.iter().map(|w| w / total).collect())
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Conditioning, when given, replaces the component weights (one value per
/// component, renormalised); the null token uses the mixture's own weights.
impl Denoiser for GaussianMixture {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn cond_dim(&self) -> usize {
        self.components()
    }

    fn epsilon(&self, x: &[f64], batch: usize, t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>, DiffusionError> {
        let d = self.dim();
        if x.len() != batch * d {
            return Err(DiffusionError::Shape(format!("expected {} values, got {}", batch * d, x.len())));
        }
        let k = self.components();
        if let Some(c) = cond {
            if c.len() != batch * k {
                return Err(DiffusionError::Shape(format!("conditioning needs {} values", batch * k)));
            }
        }
        let (_, s) = self.sched.alpha_sigma_at(t);
        let mut out = Vec::with_capacity(x.len());
        for b in 0..batch {
            let w = match cond {
                Some(c) => self.cond_weights(&c[b * k..(b + 1) * k])?,
                None => self.weights.clone(),
            };
            out.extend(self.score_with(&x[b * d..(b + 1) * d], t, &w).into_iter().map(|g| -s * g));
        }
        Ok(out)
    }
}
