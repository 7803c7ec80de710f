//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use norf_core::diffusion::{ScheduleConfig, Solver};
use norf_core::metrics::{EvalProtocol, RotationSet};
use norf_core::nn::TrainConfig;
use norf_core::sim3::Vec3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub triplane: TriplaneSpec,
    pub diffusion: DiffusionSpec,
    pub eval: EvalSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Cup,
    Box,
    Cylinder,
    Ell,
    Sphere,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub families: Vec<Family>,
    pub objects: usize,
    pub views_per_object: usize,
    /// Extra cameras of the training objects kept for evaluation.
    pub held_out_views: usize,
    pub image_size: usize,
    pub fov_deg: f64,
    /// Metric size of the largest object extent.
    pub scale_range: [f64; 2],
    /// Camera distance in multiples of the object scale.
    pub distance_range: [f64; 2],
    pub elevation_deg: [f64; 2],
    pub held_out_elevation_deg: [f64; 2],
    pub sdf_points: usize,
    pub uniform_fraction: f64,
    pub surface_sigma: f64,
    /// World-frame direction towards the light.
    pub light: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
}

impl TrainSpec {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriplaneSpec {
    pub lod: u32,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub alpha_tv: f64,
    pub init_std: f64,
    pub train: TrainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Sampling steps.
    pub steps: usize,
    pub cfg_weight: f64,
    pub dropout: f64,
    pub widths: Vec<usize>,
    pub time_dim: usize,
    pub train: TrainSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub schedule: ScheduleConfig,
    pub solver: Solver,
    pub norf: StageSpec,
    pub shape: StageSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub n_points: usize,
    pub f_threshold: f64,
    pub rotation_set: RotationSet,
    pub hypotheses: usize,
    pub mesh_lod: u32,
    pub ransac_iterations: usize,
    /// Inlier threshold as a fraction of the observed scene diameter.
    pub threshold_fraction: f64,
    /// Seed of hypothesis sampling, registration and evaluation; defaults to
    /// the run seed. Varying it alone redraws hypotheses for fixed models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_seed: Option<u64>,
}

impl EvalSpec {
    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            n_points: self.n_points,
            f_threshold: self.f_threshold,
            rotation_set: self.rotation_set,
        }
    }
}

/// Independent seed for one named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), PipelineError> {
    if ok {
        Ok(())
    } else {
        Err(PipelineError::Validation(msg.into()))
    }
}

fn range_ok(r: [f64; 2]) -> bool {
    r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]
}

impl TrainSpec {
    fn validate(&self, what: &str) -> Result<(), PipelineError> {
        self.with_seed(0)
            .validate()
            .map_err(|e| PipelineError::Validation(format!("{what}: {e}")))
    }
}

impl StageSpec {
    fn validate(&self, what: &str) -> Result<(), PipelineError> {
        check(self.steps >= 1, format!("{what}: sampling steps must be positive"))?;
        check(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite(), format!("{what}: cfg_weight must be ≥ 0"))?;
        check((0.0..=1.0).contains(&self.dropout), format!("{what}: dropout outside [0, 1]"))?;
        check(!self.widths.is_empty() && !self.widths.contains(&0), format!("{what}: empty widths"))?;
        check(self.time_dim > 0, format!("{what}: time_dim must be positive"))?;
        self.train.validate(what)
    }
}

impl RunConfig {
    pub fn sampling_seed(&self) -> u64 {
        self.eval.sample_seed.unwrap_or(self.seed)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let d = &self.dataset;
        check(!d.families.is_empty(), "at least one shape family is required")?;
        check(d.objects > 0 && d.views_per_object > 0, "objects and views must be positive")?;
        check(d.image_size >= 8 && d.image_size % 4 == 0, "image size must be a multiple of 4, at least 8")?;
        check(d.fov_deg > 1.0 && d.fov_deg < 170.0, "field of view must lie in (1, 170) degrees")?;
        check(range_ok(d.scale_range) && d.scale_range[0] > 0.0, "invalid scale range")?;
        check(range_ok(d.distance_range) && d.distance_range[0] > 1.0, "cameras must stay outside the object")?;
        for r in [d.elevation_deg, d.held_out_elevation_deg] {
            check(range_ok(r) && r[0] > -89.0 && r[1] < 89.0, "elevations must lie in (-89, 89) degrees")?;
        }
        check(d.sdf_points > 0, "sdf_points must be positive")?;
        check((0.0..=1.0).contains(&d.uniform_fraction), "uniform_fraction outside [0, 1]")?;
        check(d.surface_sigma > 0.0, "surface_sigma must be positive")?;
        check(Vec3::from(d.light).norm() > 0.0, "light direction must be nonzero")?;

        let t = &self.triplane;
        check((1..=8).contains(&t.lod), "triplane lod must lie in 1..=8")?;
        check(t.latent_dim > 0 && !t.hidden.contains(&0), "invalid triplane widths")?;
        check(t.alpha_tv >= 0.0 && t.init_std > 0.0, "alpha_tv must be ≥ 0 and init_std > 0")?;
        t.train.validate("triplane")?;
        let levels = self.diffusion.norf.widths.len().saturating_sub(1).min(16);
        check(d.image_size % (1 << levels) == 0, "image size must be divisible by the encoder-decoder depth")?;

        let s = &self.diffusion;
        check(s.schedule.steps >= 2, "schedule needs at least 2 steps")?;
        s.norf.validate("norf stage")?;
        s.shape.validate("shape stage")?;
        for st in [&s.norf, &s.shape] {
            let ok = match s.solver {
                Solver::Ddpm => st.steps <= s.schedule.steps,
                Solver::DpmSolverPp => st.steps >= 2 && st.steps <= s.schedule.steps,
            };
            check(ok, "sampling steps incompatible with the solver and schedule")?;
        }

        let e = &self.eval;
        self.eval.protocol().validate().map_err(|err| PipelineError::Validation(err.to_string()))?;
        check(e.hypotheses > 0, "at least one hypothesis is required")?;
        check((2..=10).contains(&e.mesh_lod), "mesh_lod must lie in 2..=10")?;
        check(e.ransac_iterations > 0 && e.threshold_fraction > 0.0, "invalid registration settings")?;
        Ok(())
    }
}
