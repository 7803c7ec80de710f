//! Multi-hypothesis estimation: sample coordinate maps, register them to
//! depth, sample triplanes from their orthographic projections and extract
//! meshes.

use std::path::{Path, PathBuf};

use norf_core::conditioning::ortho_norf;
use norf_core::diffusion::{sample, DenoiserNet, NoiseSchedule, SampleRun};
use norf_core::geometry::{write_norf_map, write_observation, Camera, DepthMap, NorfMap, Observation};
use norf_core::registration::{
    correspondences, ransac_register, select_hypothesis, HypothesisScore, RansacConfig, RegistrationReport,
};
use norf_core::surface::extract_triplane;
use norf_core::triplane::encode_triplane;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig};
use crate::dataset::{dataset_dir, Dataset, Split};
use crate::fields::{fields_dir, StoredFields};
use crate::files::{create_dir, ensure_fresh, write_bytes, write_json};
use crate::train::{load_model, schedule, Stage, MAP_CHANNELS};
use crate::PipelineError;

pub const REPORT: &str = "estimate.json";

pub fn estimates_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("estimates")
}

/// Trained networks and fields needed for estimation.
pub struct Models {
    pub norf: DenoiserNet,
    pub shape: DenoiserNet,
    pub fields: StoredFields,
    pub sched: NoiseSchedule,
}

impl Models {
    pub fn load(cfg: &RunConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            norf: load_model(cfg, Stage::Norf)?,
            shape: load_model(cfg, Stage::Shape)?,
            fields: StoredFields::load(&fields_dir(cfg))?,
            sched: schedule(cfg)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub index: usize,
    /// Why this hypothesis produced no shape, if it did not.
    pub error: Option<String>,
    pub registration: Option<RegistrationReport>,
    pub registration_error: Option<String>,
    pub mesh_vertices: usize,
    pub mesh_faces: usize,
}

impl HypothesisRecord {
    pub fn score(&self) -> HypothesisScore {
        match &self.registration {
            Some(r) if self.error.is_none() => HypothesisScore {
                inlier_count: r.inlier_count,
                mean_residual: r.mean_residual,
            },
            _ => HypothesisScore {
                inlier_count: 0,
                mean_residual: f64::INFINITY,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub view: String,
    pub hypotheses: Vec<HypothesisRecord>,
    /// Hypothesis with the most registration inliers; absent without depth.
    pub selected: Option<usize>,
    pub norf_run: SampleRun,
    pub shape_run: SampleRun,
}

fn streams(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect()
}

pub fn hypothesis_stem(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("h{i:02}"))
}

fn suffixed(stem: &Path, kind: &str) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(format!("_{kind}"));
    stem.with_file_name(name)
}

/// Samples `n` hypotheses for one observation and writes them below `out`.
pub fn estimate_view(
    cfg: &RunConfig,
    models: &Models,
    view: &str,
    obs: &Observation,
    depth: Option<(&DepthMap, &Camera)>,
    n: usize,
    out: &Path,
) -> Result<EstimateReport, PipelineError> {
    if n == 0 {
        return Err(PipelineError::Validation("at least one hypothesis is required".into()));
    }
    obs.validate()?;
    let d = cfg.dataset.image_size;
    if obs.size != d {
        return Err(PipelineError::Validation(format!("observation is {}², expected {d}²", obs.size)));
    }
    ensure_fresh(out)?;
    create_dir(out)?;
    write_observation(&out.join("input"), obs, depth.map(|(_, c)| c))?;
    let diff = &cfg.diffusion;
    let norf_run = SampleRun {
        seed: derive_seed(cfg.sampling_seed(), &format!("sample/norf/{view}")),
        solver: diff.solver,
        steps: diff.norf.steps,
        cfg_weight: diff.norf.cfg_weight,
        conditioning: Some("input".into()),
    };
    let shape_run = SampleRun {
        seed: derive_seed(cfg.sampling_seed(), &format!("sample/shape/{view}")),
        solver: diff.solver,
        steps: diff.shape.steps,
        cfg_weight: diff.shape.cfg_weight,
        conditioning: Some("h*_ortho".into()),
    };

    let cond: Vec<f64> = obs.to_channels().repeat(n);
    let states = sample(&models.norf, &models.sched, &norf_run, Some(&cond), &mut streams(norf_run.seed, n))?;
    let dim = d * d * MAP_CHANNELS;
    let lod = cfg.triplane.lod;
    let mut records = Vec::with_capacity(n);
    let mut orthos = Vec::new();
    let mut ortho_owner = Vec::new();
    for i in 0..n {
        let map = NorfMap::from_state(d, &states[i * dim..(i + 1) * dim], &obs.mask)?;
        let stem = hypothesis_stem(out, i);
        write_norf_map(&suffixed(&stem, "norf"), &map, depth.map(|(_, c)| c), None)?;
        let mut rec = HypothesisRecord {
            index: i,
            error: None,
            registration: None,
            registration_error: None,
            mesh_vertices: 0,
            mesh_faces: 0,
        };
        if let Some((dm, cam)) = depth {
            match register(cfg, view, i, &map, dm, cam) {
                Ok(r) => rec.registration = Some(r),
                Err(e) => rec.registration_error = Some(e.to_string()),
            }
        }
        match ortho_norf(&map, lod) {
            Ok(o) => {
                o.write(&suffixed(&stem, "ortho"))?;
                orthos.extend(o.data);
                ortho_owner.push(i);
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        records.push(rec);
    }

    if !ortho_owner.is_empty() {
        // One stream per hypothesis index, so results do not depend on which
        // other hypotheses failed.
        let mut rngs: Vec<ChaCha8Rng> = ortho_owner
            .iter()
            .map(|&i| {
                let mut r = ChaCha8Rng::seed_from_u64(shape_run.seed);
                r.set_stream(i as u64 + 1);
                r
            })
            .collect();
        let latents = sample(&models.shape, &models.sched, &shape_run, Some(&orthos), &mut rngs)?;
        let k = latents.len() / ortho_owner.len();
        for (j, &i) in ortho_owner.iter().enumerate() {
            let z = models.fields.triplane_from_image(&latents[j * k..(j + 1) * k])?;
            let stem = hypothesis_stem(out, i);
            write_bytes(&stem.with_extension("tpl"), &encode_triplane(&z, &models.fields.ref_std)?)?;
            let mesh = extract_triplane(&models.fields.library, &z, cfg.eval.mesh_lod)?;
            let mut ply = Vec::new();
            mesh.write_ply(&mut ply).map_err(|e| PipelineError::io(&stem, e))?;
            write_bytes(&stem.with_extension("ply"), &ply)?;
            records[i].mesh_vertices = mesh.vertices.len();
            records[i].mesh_faces = mesh.faces.len();
            if mesh.faces.is_empty() {
                records[i].error = Some("extracted mesh is empty".into());
            }
        }
    }

    let selected = if depth.is_some() {
        let scores: Vec<HypothesisScore> = records.iter().map(HypothesisRecord::score).collect();
        Some(select_hypothesis(&scores)?)
    } else {
        None
    };
    let report = EstimateReport {
        view: view.to_string(),
        hypotheses: records,
        selected,
        norf_run,
        shape_run,
    };
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}

fn register(
    cfg: &RunConfig,
    view: &str,
    i: usize,
    map: &NorfMap,
    depth: &DepthMap,
    cam: &Camera,
) -> Result<RegistrationReport, PipelineError> {
    let (corr, _) = correspondences(map, &depth.depth, &depth.mask, cam)?;
    let threshold = cfg.eval.threshold_fraction * corr.scene_diameter();
    if !(threshold > 0.0) {
        return Err(PipelineError::Registration("observed depth has no extent".into()));
    }
    let rc = RansacConfig {
        threshold,
        iterations: cfg.eval.ransac_iterations,
        seed: derive_seed(cfg.sampling_seed(), &format!("ransac/{view}/{i}")),
    };
    let result = ransac_register(&corr, &rc)?;
    Ok(RegistrationReport::new(&result, threshold, corr.len()))
}

/// Estimates every held-out view of the dataset with depth.
pub fn estimate_held_out(cfg: &RunConfig, n: Option<usize>) -> Result<Vec<EstimateReport>, PipelineError> {
    let data = Dataset::open(&dataset_dir(cfg))?;
    let models = Models::load(cfg)?;
    let root = estimates_dir(cfg);
    ensure_fresh(&root)?;
    let n = n.unwrap_or(cfg.eval.hypotheses);
    let mut reports = Vec::new();
    for entry in data.views(Split::HeldOut) {
        let view = data.load_view(&entry)?;
        let (depth, cam) = data.load_depth(&entry.name)?;
        reports.push(estimate_view(
            cfg,
            &models,
            &entry.name,
            &view.observation,
            Some((&depth, &cam)),
            n,
            &root.join(&entry.name),
        )?);
    }
    write_json(&root.join("index.json"), &reports.iter().map(|r| r.view.clone()).collect::<Vec<_>>())?;
    Ok(reports)
}
