//! Triplane fitting over the dataset objects and the stored field library.

use std::path::{Path, PathBuf};

use norf_core::nn::checkpoint::{decode_mlp, encode_mlp};
use norf_core::triplane::{
    decode_triplane, encode_triplane, reference_std, FieldLibrary, FitConfig, Triplane, TriplaneFitter, STEPS_PER_EPOCH,
};
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig};
use crate::dataset::{dataset_dir, Dataset};
use crate::files::{ensure_fresh, read_bytes, read_json, write_bytes, write_csv, write_json};
use crate::PipelineError;

pub const SUMMARY: &str = "summary.json";

pub fn fields_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("fields")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub objects: Vec<String>,
    pub lod: u32,
    pub latent_dim: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub final_mean_abs_error: f64,
    /// Per-channel deviation used for normalisation.
    pub ref_std: Vec<f64>,
    pub steps_per_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct FitRow {
    step: usize,
    loss: f64,
    mean_abs_error: f64,
}

pub fn fit_config(cfg: &RunConfig) -> FitConfig {
    let t = &cfg.triplane;
    FitConfig {
        lod: t.lod,
        latent_dim: t.latent_dim,
        hidden: t.hidden.clone(),
        alpha_tv: t.alpha_tv,
        train: t.train.with_seed(derive_seed(cfg.seed, "triplanes")),
        init_std: t.init_std,
    }
}

/// Fits one triplane per dataset object plus the shared decoder.
pub fn fit_triplanes(cfg: &RunConfig) -> Result<FitSummary, PipelineError> {
    let data = Dataset::open(&dataset_dir(cfg))?;
    let out = fields_dir(cfg);
    ensure_fresh(&out)?;
    let samples = (0..data.manifest.objects.len())
        .map(|i| data.samples(i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut fitter = TriplaneFitter::new(samples.len(), fit_config(cfg))?;
    fitter.run(&samples)?;
    let lib = fitter.library()?;
    let ref_std = reference_std(&lib.triplanes)?;
    for (name, z) in data.manifest.objects.iter().zip(&lib.triplanes) {
        write_bytes(&out.join(format!("{name}.tpl")), &encode_triplane(z, &ref_std)?)?;
    }
    write_bytes(&out.join("decoder.mlp"), &encode_mlp(&lib.decoder))?;
    let h = &fitter.history;
    let rows: Vec<FitRow> = h
        .loss
        .iter()
        .zip(&h.mean_abs_error)
        .enumerate()
        .map(|(i, (&loss, &mean_abs_error))| FitRow {
            step: i + 1,
            loss,
            mean_abs_error,
        })
        .collect();
    write_csv(&out.join("fit_loss.csv"), &rows)?;
    let summary = FitSummary {
        objects: data.manifest.objects.clone(),
        lod: cfg.triplane.lod,
        latent_dim: cfg.triplane.latent_dim,
        steps: h.loss.len(),
        final_loss: lib.final_loss,
        final_mean_abs_error: h.mean_abs_error.last().copied().unwrap_or(f64::NAN),
        ref_std,
        steps_per_epoch: STEPS_PER_EPOCH,
        epoch_losses: h.epoch_losses(STEPS_PER_EPOCH),
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(summary)
}

/// Field library with its normalisation statistics.
#[derive(Debug, Clone)]
pub struct StoredFields {
    pub library: FieldLibrary,
    pub ref_std: Vec<f64>,
    pub summary: FitSummary,
}

impl StoredFields {
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let summary: FitSummary = read_json(&dir.join(SUMMARY))?;
        let decoder = decode_mlp(&read_bytes(&dir.join("decoder.mlp"))?)?;
        let mut triplanes = Vec::new();
        for name in &summary.objects {
            let (z, std) = decode_triplane(&read_bytes(&dir.join(format!("{name}.tpl")))?)?;
            if z.lod() != summary.lod || z.latent_dim() != summary.latent_dim || std.len() != summary.ref_std.len() {
                return Err(PipelineError::Validation(format!("{name}.tpl disagrees with the fit summary")));
            }
            triplanes.push(z);
        }
        let mut library = FieldLibrary::new(triplanes, decoder)?;
        library.final_loss = summary.final_loss;
        Ok(Self {
            library,
            ref_std: summary.ref_std.clone(),
            summary,
        })
    }

    /// Diffusion target of object `i`: normalised, image layout, channel-last.
    pub fn normalized_image(&self, i: usize) -> Result<Vec<f64>, PipelineError> {
        Ok(self.library.triplanes[i].normalize(&self.ref_std)?.to_image_layout().into_data())
    }

    /// Inverse of [`StoredFields::normalized_image`].
    pub fn triplane_from_image(&self, data: &[f64]) -> Result<Triplane, PipelineError> {
        let p = self.summary.lod;
        let r = 1usize << p;
        let img = norf_core::nn::Tensor::new(&[r, r, 3 * self.summary.latent_dim], data.to_vec())?;
        Ok(Triplane::from_image_layout(&img)?.denormalize(&self.ref_std)?)
    }
}
