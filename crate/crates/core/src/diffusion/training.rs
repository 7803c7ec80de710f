//! Noise-matching objective, conditioning dropout and the training loop for
//! [`DenoiserNet`].

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nets::{hwc_to_chw, DenoiserNet};
use super::schedule::{gaussian_vec, NoiseSchedule};
use super::{Denoiser, DiffusionError};
use crate::nn::checkpoint::TrainingState;
use crate::nn::{adam_step, AdamState, Graph, Parameterized, Tensor, TrainConfig};

/// Training pairs, concatenated item by item.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub states: Vec<f64>,
    pub conds: Option<Vec<f64>>,
}

impl TrainingSet {
    pub fn new(state_dim: usize, cond_dim: usize, states: Vec<f64>, conds: Option<Vec<f64>>) -> Result<Self, DiffusionError> {
        if state_dim == 0 || states.is_empty() || states.len() % state_dim != 0 {
            return Err(DiffusionError::Shape("states do not divide into items".into()));
        }
        let count = states.len() / state_dim;
        if let Some(c) = &conds {
            if c.len() != count * cond_dim {
                return Err(DiffusionError::Shape(format!("expected {} conditioning values", count * cond_dim)));
            }
        }
        Ok(Self {
            state_dim,
            cond_dim,
            states,
            conds,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn cond(&self, i: usize) -> Option<&[f64]> {
        self.conds
            .as_ref()
            .map(|c| &c[i * self.cond_dim..(i + 1) * self.cond_dim])
    }
}

/// Replacement of conditioning by the zero null token during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CondDropout {
    None,
    /// Drop the whole payload with probability `prob`.
    All { prob: f64 },
    /// Zero the listed channels of a channel-last payload with `stride`
    /// channels per pixel, with probability `prob`.
    Channels { prob: f64, channels: Vec<usize>, stride: usize },
}

impl CondDropout {
    fn prob(&self) -> f64 {
        match self {
            CondDropout::None => 0.0,
            CondDropout::All { prob } | CondDropout::Channels { prob, .. } => *prob,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        let p = self.prob();
        if !(0.0..=1.0).contains(&p) {
            return Err(DiffusionError::Usage(format!("dropout probability {p} outside [0, 1]")));
        }
        if let CondDropout::Channels { channels, stride, .. } = self {
            if *stride == 0 || channels.iter().any(|c| c >= stride) {
                return Err(DiffusionError::Usage("dropout channel outside the pixel stride".into()));
            }
        }
        Ok(())
    }

    /// Applies the rule in place; returns whether anything was dropped.
    fn apply<R: Rng + ?Sized>(&self, cond: &mut [f64], rng: &mut R) -> bool {
        let p = self.prob();
        if p == 0.0 || rng.random::<f64>() >= p {
            return false;
        }
        match self {
            CondDropout::None => false,
            CondDropout::All { .. } => {
                cond.iter_mut().for_each(|v| *v = 0.0);
                true
            }
            CondDropout::Channels { channels, stride, .. } => {
                for px in cond.chunks_mut(*stride) {
                    for &c in channels {
                        px[c] = 0.0;
                    }
                }
                true
            }
        }
    }
}

/// One minibatch of noised states with the noise that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedBatch {
    pub x0: Vec<f64>,
    pub xt: Vec<f64>,
    pub eps: Vec<f64>,
    pub times: Vec<usize>,
    pub cond: Option<Vec<f64>>,
    /// Which items received the null token (instrumentation).
    pub dropped: Vec<bool>,
}

impl NoisedBatch {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per item and applies dropout.
pub fn make_noised_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    indices: &[usize],
    sched: &NoiseSchedule,
    dropout: &CondDropout,
    rng: &mut R,
) -> Result<NoisedBatch, DiffusionError> {
    dropout.validate()?;
    let d = set.state_dim;
    let mut out = NoisedBatch {
        x0: Vec::with_capacity(indices.len() * d),
        xt: Vec::with_capacity(indices.len() * d),
        eps: Vec::with_capacity(indices.len() * d),
        times: Vec::with_capacity(indices.len()),
        cond: set.conds.as_ref().map(|_| Vec::with_capacity(indices.len() * set.cond_dim)),
        dropped: Vec::with_capacity(indices.len()),
    };
    for &i in indices {
        if i >= set.len() {
            return Err(DiffusionError::Usage(format!("item {i} outside the training set")));
        }
        let t = rng.random_range(1..=sched.len());
        let eps = gaussian_vec(d, rng);
        let x0 = set.state(i);
        out.xt.extend(sched.forward_sample(x0, t, &eps)?);
        out.x0.extend_from_slice(x0);
        out.eps.extend(eps);
        out.times.push(t);
        let dropped = match (&mut out.cond, set.cond(i)) {
            (Some(acc), Some(c)) => {
                let mut c = c.to_vec();
                let hit = dropout.apply(&mut c, rng);
                acc.extend(c);
                hit
            }
            _ => false,
        };
        out.dropped.push(dropped);
    }
    Ok(out)
}

/// Mean squared error between the injected and predicted noise.
pub fn training_loss<D: Denoiser + ?Sized>(den: &D, batch: &NoisedBatch) -> Result<f64, DiffusionError> {
    let d = den.state_dim();
    let k = den.cond_dim();
    if batch.is_empty() || batch.xt.len() != batch.len() * d {
        return Err(DiffusionError::Shape("batch does not match the denoiser".into()));
    }
    let mut sum = 0.0;
    for (i, &t) in batch.times.iter().enumerate() {
        let cond = batch.cond.as_ref().map(|c| &c[i * k..(i + 1) * k]);
        let pred = den.epsilon(&batch.xt[i * d..(i + 1) * d], 1, t as f64, cond)?;
        sum += pred
            .iter()
            .zip(&batch.eps[i * d..(i + 1) * d])
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>();
    }
    Ok(sum / batch.xt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub dropped: usize,
    pub batch: usize,
}

/// Adam training of a [`DenoiserNet`] on the noise-matching objective.
#[derive(Debug, Clone)]
pub struct DiffusionTrainer {
    pub net: DenoiserNet,
    pub cfg: TrainConfig,
    pub sched: NoiseSchedule,
    pub dropout: CondDropout,
    adam: AdamState,
    step: usize,
    pub history: Vec<LossReport>,
}

impl DiffusionTrainer {
    pub fn new(net: DenoiserNet, cfg: TrainConfig, sched: NoiseSchedule, dropout: CondDropout) -> Result<Self, DiffusionError> {
        cfg.validate()?;
        dropout.validate()?;
        let adam = AdamState::new(&net.parameters());
        Ok(Self {
            net,
            cfg,
            sched,
            dropout,
            adam,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a snapshot taken with [`DiffusionTrainer::state`].
    pub fn resume(
        net: DenoiserNet,
        cfg: TrainConfig,
        sched: NoiseSchedule,
        dropout: CondDropout,
        state: TrainingState,
    ) -> Result<Self, DiffusionError> {
        let net = DenoiserNet::from_parts(net.spec().clone(), state.params)?;
        let mut tr = Self::new(net, cfg, sched, dropout)?;
        if state.adam.m.len() != tr.adam.m.len() {
            return Err(DiffusionError::Shape("optimizer state does not match the network".into()));
        }
        tr.adam = state.adam;
        tr.step = state.step;
        Ok(tr)
    }

    pub fn state(&self) -> TrainingState {
        TrainingState {
            step: self.step,
            params: self.net.parameters().into_iter().cloned().collect(),
            adam: self.adam.clone(),
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xd1ff_0500);
        rng.set_stream(step as u64 + 1);
        rng
    }

    pub fn step(&mut self, set: &TrainingSet) -> Result<LossReport, DiffusionError> {
        let spec = self.net.spec().clone();
        if set.state_dim != spec.state_dim() || (set.conds.is_some() && set.cond_dim != spec.cond_dim()) {
            return Err(DiffusionError::Shape("training set does not match the network".into()));
        }
        let step = self.step + 1;
        let mut rng = self.step_rng(step);
        let all: Vec<usize> = (0..set.len()).collect();
        let indices: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| *all.choose(&mut rng).expect("non-empty set"))
            .collect();
        let batch = make_noised_batch(set, &indices, &self.sched, &self.dropout, &mut rng)?;
        let times: Vec<f64> = batch.times.iter().map(|&t| t as f64).collect();
        let (xt, ct, tt) = self.net.inputs(&batch.xt, batch.cond.as_deref(), &times)?;
        let n = spec.size;
        let eps = Tensor::new(xt.shape(), hwc_to_chw(&batch.eps, batch.len(), n, n, spec.state_channels))?;

        let mut g = Graph::new();
        let params = self.net.register(&mut g, true);
        let (xv, cv, tv) = (g.constant(xt), g.constant(ct), g.constant(tt));
        let pred = self.net.record(&mut g, &params, xv, cv, tv)?;
        let target = g.constant(eps);
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        let loss = g.mean(sq);
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(DiffusionError::Divergence(step));
        }
        let grads = g.backward(loss)?;
        let grad_list: Vec<Tensor> = params
            .iter()
            .zip(self.net.parameters())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        adam_step(&mut self.net.parameters_mut(), &grad_list, &mut self.adam, step, &self.cfg)?;
        self.step = step;
        let report = LossReport {
            step,
            loss: value,
            lr: self.cfg.learning_rate(step),
            dropped: batch.dropped.iter().filter(|d| **d).count(),
            batch: batch.len(),
        };
        self.history.push(report);
        Ok(report)
    }

    /// Runs until `cfg.total_steps`.
    pub fn run(&mut self, set: &TrainingSet) -> Result<(), DiffusionError> {
        while self.step < self.cfg.total_steps {
            self.step(set)?;
        }
        Ok(())
    }
}
