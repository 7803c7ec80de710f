//! Adam with linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::NnError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.peak_lr > 0.0) {
            return Err(NnError::Usage(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(NnError::Usage(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::Usage("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `step` (1-based update index; 0 gives 0).
    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps - self.warmup_steps;
        if decay_len == 0 {
            return self.peak_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / decay_len as f64;
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: usize,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update at schedule position `step`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    step: usize,
    cfg: &TrainConfig,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(NnError::Shape(format!(
                "adam: param {:?} grad {:?} moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.t += 1;
    let lr = cfg.learning_rate(step);
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(grads[i].data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = BETA1 * *mv + (1.0 - BETA1) * gv;
            *vv = BETA2 * *vv + (1.0 - BETA2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-3,
            warmup_steps: 500,
            total_steps: 2000,
            batch_size: 4,
            seed: 0,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(c.learning_rate(500), 1e-3);
        assert!(c.learning_rate(2000).abs() < 1e-18);
        assert_eq!(c.learning_rate(250), 0.5e-3);
        assert_eq!(c.learning_rate(0), 0.0);
    }

    #[test]
    fn schedule_is_continuous_and_nonnegative() {
        let c = cfg();
        let mut prev = c.learning_rate(0);
        for s in 1..=c.total_steps {
            let lr = c.learning_rate(s);
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= c.peak_lr / c.warmup_steps as f64 + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(&[&p]);
        for step in 1..10 {
            adam_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, step, &cfg()).unwrap();
        }
        assert!(p.max_abs_diff(&before) < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        assert!(adam_step(&mut [&mut p], &[g], &mut st, 1, &cfg()).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg();
        c.warmup_steps = 3000;
        assert!(c.validate().is_err());
        c = cfg();
        c.peak_lr = 0.0;
        assert!(c.validate().is_err());
    }
}
