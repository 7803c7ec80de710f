//! One-line summaries of pipeline artifacts.

use std::path::Path;

use norf_core::conditioning::OrthoNorf;
use norf_core::diffusion::DenoiserNet;
use norf_core::geometry::{read_depth, read_norf_map, read_observation, TriMesh, NORF_CHANNELS, OBSERVATION_CHANNELS};
use norf_core::nn::checkpoint::decode_mlp;
use norf_core::triplane::{decode_triplane, SdfSampleSet};
use serde_json::Value;

use crate::files::read_bytes;
use crate::PipelineError;

fn channels(path: &Path) -> Result<Vec<String>, PipelineError> {
    let v: Value = serde_json::from_slice(&read_bytes(path)?)?;
    Ok(v.get("channels")
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|c| c.as_str().map(str::to_string)).collect())
        .unwrap_or_default())
}

/// Describes the artifact at `path`, dispatching on its extension.
pub fn describe(path: &Path) -> Result<String, PipelineError> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let stem = path.with_extension("");
    Ok(match ext {
        "tpl" => {
            let (z, std) = decode_triplane(&read_bytes(path)?)?;
            format!(
                "triplane lod {} ({}²), {} latent channels, {} reference stds, total variation {:.4e}",
                z.lod(),
                z.resolution(),
                z.latent_dim(),
                std.len(),
                z.total_variation()
            )
        }
        "mlp" => {
            let m = decode_mlp(&read_bytes(path)?)?;
            format!("mlp widths {:?}", m.widths())
        }
        "sdf" => {
            let s = SdfSampleSet::decode(&read_bytes(path)?)?;
            let inside = s.distances.iter().filter(|d| **d < 0.0).count();
            format!("{} sdf samples, {} inside", s.len(), inside)
        }
        "ply" => {
            let m = TriMesh::read_ply(read_bytes(path)?.as_slice())?;
            format!(
                "mesh {} vertices, {} faces, area {:.4}, watertight {}",
                m.vertices.len(),
                m.faces.len(),
                m.area(),
                m.is_watertight()
            )
        }
        "nnp" => {
            let net = DenoiserNet::read(&stem)?;
            format!("denoiser {:?}", net.spec())
        }
        "f32" | "json" => {
            let side = stem.with_extension("json");
            let ch = channels(&side)?;
            if ch == NORF_CHANNELS {
                let (m, s) = read_norf_map(&stem)?;
                format!("coordinate map {}², {} masked pixels, camera {}", m.size, m.mask_count(), s.camera.is_some())
            } else if ch == OBSERVATION_CHANNELS {
                let (o, _) = read_observation(&stem)?;
                format!("observation {}², {} masked pixels", o.size, o.mask.iter().filter(|m| **m).count())
            } else if ch == ["depth", "mask"] {
                let (d, _) = read_depth(&stem)?;
                format!("depth map {}², {} valid pixels", d.size, d.mask.iter().filter(|m| **m).count())
            } else if let Ok(o) = OrthoNorf::read(&stem) {
                let occupied = o.data.iter().filter(|v| **v != 0.0).count();
                format!("ortho payload {:?}, {} nonzero values", o.shape(), occupied)
            } else {
                let v: Value = serde_json::from_slice(&read_bytes(&side)?)?;
                let keys: Vec<String> = match &v {
                    Value::Object(m) => m.keys().cloned().collect(),
                    _ => vec![],
                };
                format!("json document, keys {keys:?}")
            }
        }
        _ => return Err(PipelineError::Validation(format!("{}: unknown artifact type", path.display()))),
    })
}
