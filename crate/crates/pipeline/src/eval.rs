//! Scores estimated hypotheses against ground-truth shapes in the object frame.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use norf_core::geometry::TriMesh;
use norf_core::metrics::{aligned_chamfer, best_of_n_curve, chamfer_l1, fscore, mean_std};
use norf_core::registration::{select_hypothesis, HypothesisScore};
use norf_core::sim3::{Sim3Transform, Vec3};
use norf_core::surface::extract_fn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, RunConfig};
use crate::dataset::{dataset_dir, object_name, Dataset, Split};
use crate::estimate::{estimates_dir, hypothesis_stem, EstimateReport, REPORT};
use crate::files::{create_dir, ensure_fresh, read_bytes, read_json, write_bytes, write_csv, write_json};
use crate::plot::best_of_n_svg;
use crate::PipelineError;

/// Octree depth of the ground-truth meshes.
pub const GT_MESH_LOD: u32 = 7;

pub fn eval_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("eval")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRow {
    pub view: String,
    pub hypothesis: usize,
    pub valid: bool,
    pub inliers: usize,
    pub chamfer: f64,
    pub fscore: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub view: String,
    pub object: String,
    pub hypotheses: usize,
    pub valid: usize,
    pub selected: usize,
    pub selected_chamfer: f64,
    pub selected_fscore: f64,
    pub first_chamfer: f64,
    pub oracle_chamfer: f64,
    pub oracle_fscore: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Result<Self, PipelineError> {
        let (mean, std) = mean_std(values)?;
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub hypotheses: usize,
    pub n_points: usize,
    pub f_threshold: f64,
    /// Entry `k`: best Chamfer over the first `k + 1` hypotheses.
    pub oracle_curve: Vec<Stat>,
    /// Entry `k`: Chamfer of the hypothesis selected by inlier count among the first `k + 1`.
    pub inlier_curve: Vec<Stat>,
    pub oracle_fscore: Stat,
    pub selected_chamfer: Stat,
    pub selected_fscore: Stat,
    pub first_chamfer: Stat,
    pub valid_fraction: f64,
}

/// Ground-truth surface samples of each object, in its normalized frame.
fn gt_points(cfg: &RunConfig, data: &Dataset, idx: usize) -> Result<Vec<Vec3>, PipelineError> {
    let object = object_name(idx);
    let shape = data.object(idx)?.shape();
    let mesh = extract_fn(|p| shape.sdf(p), GT_MESH_LOD).map_err(|e| PipelineError::Validation(e.to_string()))?;
    if mesh.faces.is_empty() {
        return Err(PipelineError::Validation(format!("{object}: empty ground-truth mesh")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("eval/gt/{object}")));
    Ok(mesh.sample_surface(cfg.eval.n_points, &mut rng))
}

fn read_mesh(path: &Path) -> Result<TriMesh, PipelineError> {
    Ok(TriMesh::read_ply(read_bytes(path)?.as_slice())?)
}

/// Chamfer and F-score of a hypothesis mapped into the object frame.
fn score(cfg: &RunConfig, pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, f64), PipelineError> {
    let rotations = cfg.eval.rotation_set.rotations();
    let (cd, k) = aligned_chamfer(pred, gt, &rotations)?;
    let rotated: Vec<Vec3> = pred.iter().map(|p| rotations[k] * p).collect();
    Ok((cd, fscore(&rotated, gt, cfg.eval.f_threshold)?))
}

/// Evaluates every held-out estimate and writes tables, a report and a plot.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport, PipelineError> {
    let data = Dataset::open(&dataset_dir(cfg))?;
    let est_root = estimates_dir(cfg);
    let index: Vec<String> = read_json(&est_root.join("index.json"))?;
    let held: Vec<_> = data.views(Split::HeldOut);
    let expected: Vec<String> = held.iter().map(|v| v.name.clone()).collect();
    if index != expected {
        return Err(PipelineError::Validation(
            "estimates do not match the held-out views of the dataset".into(),
        ));
    }
    let out = eval_dir(cfg);
    ensure_fresh(&out)?;

    let mut gt_cache: BTreeMap<usize, Vec<Vec3>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut scenes = Vec::new();
    let mut chamfers: Vec<Vec<f64>> = Vec::new();
    let mut scores: Vec<Vec<HypothesisScore>> = Vec::new();
    let mut n_hyp = None;
    for entry in &held {
        let view = data.load_view(entry)?;
        let dir = est_root.join(&entry.name);
        let report: EstimateReport = read_json(&dir.join(REPORT))?;
        let n = report.hypotheses.len();
        if *n_hyp.get_or_insert(n) != n || n == 0 || report.view != entry.name {
            return Err(PipelineError::Validation(format!("{}: inconsistent estimate report", entry.name)));
        }
        if !gt_cache.contains_key(&entry.object) {
            gt_cache.insert(entry.object, gt_points(cfg, &data, entry.object)?);
        }
        let gt = &gt_cache[&entry.object];
        // Object frame to camera frame; registration maps coordinates into the camera frame.
        let cam_pose = Sim3Transform::new(
            view.camera.rotation * view.pose.rotation,
            view.camera.rotation * view.pose.translation + view.camera.translation,
            view.pose.scale,
        );
        let to_object = cam_pose.inverse();
        let penalty = chamfer_l1(&[Vec3::zeros()], gt)?;
        let mut cds = Vec::with_capacity(n);
        let mut fs = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for h in &report.hypotheses {
            let reg = match (&h.registration, &h.error) {
                (Some(r), None) if h.mesh_faces > 0 => Some(r),
                _ => None,
            };
            let (cd, f) = match reg {
                Some(r) => {
                    let mesh = read_mesh(&hypothesis_stem(&dir, h.index).with_extension("ply"))?;
                    let t = to_object.compose(&Sim3Transform::from_record(&r.transform));
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        cfg.sampling_seed(),
                        &format!("eval/{}/{}", entry.name, h.index),
                    ));
                    let pred: Vec<Vec3> =
                        mesh.sample_surface(cfg.eval.n_points, &mut rng).iter().map(|p| t.apply(p)).collect();
                    score(cfg, &pred, gt)?
                }
                None => (penalty, 0.0),
            };
            counts.push(h.score());
            rows.push(HypothesisRow {
                view: entry.name.clone(),
                hypothesis: h.index,
                valid: reg.is_some(),
                inliers: h.score().inlier_count,
                chamfer: cd,
                fscore: f,
            });
            cds.push(cd);
            fs.push(f);
        }
        let selected = report
            .selected
            .ok_or_else(|| PipelineError::Validation(format!("{}: no selected hypothesis", entry.name)))?;
        let oracle = best_of_n_curve(&cds)[n - 1];
        scenes.push(SceneRow {
            view: entry.name.clone(),
            object: object_name(entry.object),
            hypotheses: n,
            valid: rows[rows.len() - n..].iter().filter(|r| r.valid).count(),
            selected,
            selected_chamfer: cds[selected],
            selected_fscore: fs[selected],
            first_chamfer: cds[0],
            oracle_chamfer: oracle,
            oracle_fscore: fs.iter().cloned().fold(0.0, f64::max),
        });
        chamfers.push(cds);
        scores.push(counts);
    }
    let n = n_hyp.ok_or_else(|| PipelineError::Validation("no held-out views".into()))?;

    let mut oracle_curve = Vec::with_capacity(n);
    let mut inlier_curve = Vec::with_capacity(n);
    for k in 0..n {
        let best: Vec<f64> = chamfers.iter().map(|c| best_of_n_curve(&c[..=k])[k]).collect();
        oracle_curve.push(Stat::of(&best)?);
        let sel: Vec<f64> = chamfers
            .iter()
            .zip(&scores)
            .map(|(c, sc)| select_hypothesis(&sc[..=k]).map(|i| c[i]))
            .collect::<Result<_, _>>()?;
        inlier_curve.push(Stat::of(&sel)?);
    }
    let col = |f: fn(&SceneRow) -> f64| scenes.iter().map(f).collect::<Vec<f64>>();
    let report = EvalReport {
        scenes: scenes.len(),
        hypotheses: n,
        n_points: cfg.eval.n_points,
        f_threshold: cfg.eval.f_threshold,
        oracle_curve,
        inlier_curve,
        oracle_fscore: Stat::of(&col(|s| s.oracle_fscore))?,
        selected_chamfer: Stat::of(&col(|s| s.selected_chamfer))?,
        selected_fscore: Stat::of(&col(|s| s.selected_fscore))?,
        first_chamfer: Stat::of(&col(|s| s.first_chamfer))?,
        valid_fraction: rows.iter().filter(|r| r.valid).count() as f64 / rows.len() as f64,
    };
    create_dir(&out)?;
    write_csv(&out.join("hypotheses.csv"), &rows)?;
    write_csv(&out.join("scenes.csv"), &scenes)?;
    write_json(&out.join("report.json"), &report)?;
    write_bytes(&out.join("best_of_n.svg"), best_of_n_svg(&report).as_bytes())?;
    Ok(report)
}
