//! Denoiser training for both stages, with exact resumption.

use std::path::PathBuf;

use clap::ValueEnum;
use norf_core::conditioning::{ortho_norf, ORTHO_CHANNELS};
use norf_core::diffusion::{Arch, CondDropout, DenoiserNet, DiffusionTrainer, LossReport, NetSpec, NoiseSchedule, TrainingSet};
use norf_core::nn::checkpoint::{decode_training_state, encode_training_state};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig, StageSpec};
use crate::dataset::{dataset_dir, Dataset, Split};
use crate::fields::{fields_dir, StoredFields};
use crate::files::{create_dir, read_bytes, write_bytes, write_csv, write_json};
use crate::PipelineError;

/// Observation channels `(shade, mask, nx, ny, nz)`.
pub const OBSERVATION_CHANNELS: usize = 5;
/// Normal channels of the observation, dropped together.
pub const OBSERVATION_NORMAL_CHANNELS: [usize; 3] = [2, 3, 4];
/// Coordinate and normal channels of a map state.
pub const MAP_CHANNELS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Coordinate maps conditioned on the observation.
    Norf,
    /// Triplanes conditioned on the orthographic projection of a map.
    Shape,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Norf => "norf",
            Stage::Shape => "shape",
        }
    }

    pub fn spec(self, cfg: &RunConfig) -> &StageSpec {
        match self {
            Stage::Norf => &cfg.diffusion.norf,
            Stage::Shape => &cfg.diffusion.shape,
        }
    }
}

pub fn model_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.output_dir.join("models").join(stage.name())
}

pub fn schedule(cfg: &RunConfig) -> Result<NoiseSchedule, PipelineError> {
    Ok(NoiseSchedule::from_config(&cfg.diffusion.schedule)?)
}

pub fn net_spec(cfg: &RunConfig, stage: Stage) -> NetSpec {
    let s = stage.spec(cfg);
    match stage {
        Stage::Norf => NetSpec {
            arch: Arch::Unet,
            size: cfg.dataset.image_size,
            state_channels: MAP_CHANNELS,
            cond_channels: OBSERVATION_CHANNELS,
            widths: s.widths.clone(),
            time_dim: s.time_dim,
        },
        Stage::Shape => NetSpec {
            arch: Arch::Conv,
            size: 1 << cfg.triplane.lod,
            state_channels: 3 * cfg.triplane.latent_dim,
            cond_channels: ORTHO_CHANNELS,
            widths: s.widths.clone(),
            time_dim: s.time_dim,
        },
    }
}

pub fn dropout(cfg: &RunConfig, stage: Stage) -> CondDropout {
    let prob = stage.spec(cfg).dropout;
    match stage {
        Stage::Norf => CondDropout::Channels {
            prob,
            channels: OBSERVATION_NORMAL_CHANNELS.to_vec(),
            stride: OBSERVATION_CHANNELS,
        },
        Stage::Shape => CondDropout::All { prob },
    }
}

/// Training pairs of a stage, one per training view.
pub fn training_set(cfg: &RunConfig, stage: Stage) -> Result<TrainingSet, PipelineError> {
    let data = Dataset::open(&dataset_dir(cfg))?;
    let spec = net_spec(cfg, stage);
    let fields = match stage {
        Stage::Shape => Some(StoredFields::load(&fields_dir(cfg))?),
        Stage::Norf => None,
    };
    let mut states = Vec::new();
    let mut conds = Vec::new();
    for entry in data.views(Split::Train) {
        let view = data.load_view(&entry)?;
        match &fields {
            None => {
                states.extend(view.map.to_state());
                conds.extend(view.observation.to_channels());
            }
            Some(f) => {
                states.extend(f.normalized_image(entry.object)?);
                conds.extend(ortho_norf(&view.map, cfg.triplane.lod)?.data);
            }
        }
    }
    Ok(TrainingSet::new(spec.state_dim(), spec.cond_dim(), states, Some(conds))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub steps: usize,
    pub final_loss: f64,
    pub parameters: usize,
    pub training_pairs: usize,
}

/// Trains a stage until its configured step count, or for at most
/// `max_steps` more steps. With `resume`, continues from the stored state.
pub fn train_denoiser(
    cfg: &RunConfig,
    stage: Stage,
    resume: bool,
    max_steps: Option<usize>,
) -> Result<TrainSummary, PipelineError> {
    let dir = model_dir(cfg, stage);
    let set = training_set(cfg, stage)?;
    let spec = net_spec(cfg, stage);
    let train_cfg = stage.spec(cfg).train.with_seed(derive_seed(cfg.seed, &format!("train/{}", stage.name())));
    let sched = schedule(cfg)?;
    let mut history: Vec<LossReport> = Vec::new();
    let mut trainer = if resume {
        let state = decode_training_state(&read_bytes(&dir.join("state.nns"))?)?;
        history = read_loss_csv(&dir.join("loss.csv"))?;
        history.truncate(state.step);
        DiffusionTrainer::resume(DenoiserNet::zeros(spec)?, train_cfg, sched, dropout(cfg, stage), state)?
    } else {
        if dir.join("state.nns").exists() {
            return Err(PipelineError::Validation(format!(
                "{} already holds a checkpoint; pass --resume or use a new run directory",
                dir.display()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("init/{}", stage.name())));
        DiffusionTrainer::new(DenoiserNet::new(spec, &mut rng)?, train_cfg, sched, dropout(cfg, stage))?
    };
    let stop = match max_steps {
        Some(k) => (trainer.steps_done() + k).min(trainer.cfg.total_steps),
        None => trainer.cfg.total_steps,
    };
    while trainer.steps_done() < stop {
        let r = trainer.step(&set)?;
        if trainer.steps_done() % 250 == 0 {
            eprintln!("{} step {} loss {:.5}", stage.name(), trainer.steps_done(), r.loss);
        }
    }
    history.extend(trainer.history.iter().copied());
    create_dir(&dir)?;
    trainer.net.write(&dir.join("net"))?;
    write_bytes(&dir.join("state.nns"), &encode_training_state(&trainer.state()))?;
    write_csv(&dir.join("loss.csv"), &history)?;
    let summary = TrainSummary {
        stage,
        steps: trainer.steps_done(),
        final_loss: history.last().map_or(f64::NAN, |r| r.loss),
        parameters: norf_core::nn::Parameterized::num_parameters(&trainer.net),
        training_pairs: set.len(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn read_loss_csv(path: &std::path::Path) -> Result<Vec<LossReport>, PipelineError> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    Ok(r.deserialize().collect::<Result<Vec<LossReport>, _>>()?)
}

pub fn load_model(cfg: &RunConfig, stage: Stage) -> Result<DenoiserNet, PipelineError> {
    let net = DenoiserNet::read(&model_dir(cfg, stage).join("net"))?;
    if net.spec() != &net_spec(cfg, stage) {
        return Err(PipelineError::Validation(format!(
            "{} checkpoint does not match the configured network",
            stage.name()
        )));
    }
    Ok(net)
}
