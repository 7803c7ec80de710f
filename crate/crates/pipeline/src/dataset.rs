//! Procedural toy dataset: shapes, supervision points and rendered views.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use norf_core::geometry::{
    read_depth, read_norf_map, read_observation, render_view, sample_sdf_points, write_depth, write_norf_map,
    write_observation, Camera, CupSpec, DepthMap, NorfMap, Observation, SampleMix, Shape, Solid,
};
use norf_core::sim3::{axis_angle, Sim3Transform, Vec3};
use norf_core::triplane::SdfSampleSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, DatasetSpec, Family, RunConfig};
use crate::files::{create_dir, ensure_fresh, hash_tree, read_bytes, read_json, write_bytes, write_json};
use crate::PipelineError;

pub const MANIFEST: &str = "manifest.json";
/// Renders covering fewer pixels are redrawn.
const MIN_VISIBLE_PIXELS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub name: String,
    pub family: Family,
    pub handle: bool,
    /// Unit-cube normalised solid.
    pub solid: Solid,
}

impl ObjectRecord {
    pub fn shape(&self) -> Shape {
        Shape::Solid(self.solid.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub name: String,
    pub object: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub objects: Vec<String>,
    pub views: Vec<ViewEntry>,
    /// SHA-256 of every other file in the dataset directory.
    pub files: BTreeMap<String, String>,
}

pub fn dataset_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("dataset")
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// One object of `family`, normalised to the unit cube. Cups open along `+y`
/// with the handle at a random azimuth; boxes stay axis-aligned.
pub fn make_object(family: Family, rng: &mut ChaCha8Rng) -> Result<(Shape, bool), PipelineError> {
    let (shape, handle) = match family {
        Family::Sphere => (Shape::sphere(0.4), false),
        Family::Box => {
            let half = [0.0; 3].map(|_| rng.random_range(0.15..0.45));
            (Shape::cuboid(half), false)
        }
        Family::Cylinder => (
            Shape::cylinder(rng.random_range(0.15..0.4), rng.random_range(0.15..0.45)),
            false,
        ),
        Family::Cup => {
            let handle = rng.random_bool(0.5);
            let spec = CupSpec {
                radius: rng.random_range(0.25..0.4),
                half_height: rng.random_range(0.25..0.45),
                wall: rng.random_range(0.05..0.08),
                handle_azimuth: handle.then(|| rng.random_range(0.0..2.0 * PI)),
            };
            (Shape::cup(spec), handle)
        }
        Family::Ell => {
            let half = [0.0; 3].map(|_| rng.random_range(0.2..0.45));
            let cut = [rng.random_range(0.35..0.65), rng.random_range(0.35..0.65)];
            (Shape::ell(half, cut), false)
        }
    };
    Ok((shape.normalize_to_unit_cube()?, handle))
}

/// Random upright placement and a camera looking at the object.
pub fn make_view(
    spec: &DatasetSpec,
    elevation_deg: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<(Sim3Transform, Camera), PipelineError> {
    let scale = uniform(rng, spec.scale_range);
    let yaw = rng.random_range(0.0..2.0 * PI);
    let offset = Vec3::new(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    ) * scale;
    let pose = Sim3Transform::new(axis_angle(Vec3::y(), yaw), offset, scale);
    let dist = uniform(rng, spec.distance_range) * scale;
    let el = uniform(rng, elevation_deg).to_radians();
    let az = rng.random_range(0.0..2.0 * PI);
    let dir = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
    let cam = Camera::look_at(offset + dist * dir, offset, Vec3::y(), spec.fov_deg.to_radians(), spec.image_size)?;
    Ok((pose, cam))
}

fn sample_mix(spec: &DatasetSpec) -> SampleMix {
    SampleMix {
        uniform_fraction: spec.uniform_fraction,
        surface_sigma: spec.surface_sigma,
    }
}

/// Renders a view, redrawing placements that leave the object barely visible.
fn render_sample(
    shape: &Shape,
    spec: &DatasetSpec,
    elevation: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> Result<(Sim3Transform, Camera, Observation, NorfMap), PipelineError> {
    for _ in 0..64 {
        let (pose, cam) = make_view(spec, elevation, rng)?;
        let (obs, map) = render_view(shape, &pose, &cam, &Vec3::from(spec.light))?;
        if map.mask_count() >= MIN_VISIBLE_PIXELS {
            map.validate()?;
            return Ok((pose, cam, obs, map));
        }
    }
    Err(PipelineError::Validation("could not find a view showing the object".into()))
}

pub fn object_name(i: usize) -> String {
    format!("o{i:03}")
}

/// Generates the dataset below `<output_dir>/dataset`.
pub fn gen_dataset(cfg: &RunConfig) -> Result<Manifest, PipelineError> {
    let root = dataset_dir(cfg);
    ensure_fresh(&root)?;
    create_dir(&root)?;
    let spec = &cfg.dataset;
    let mut obj_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "objects"));
    let mut objects = Vec::new();
    let mut views = Vec::new();
    for i in 0..spec.objects {
        let name = object_name(i);
        let family = spec.families[i % spec.families.len()];
        let (shape, handle) = make_object(family, &mut obj_rng)?;
        let Shape::Solid(solid) = &shape else {
            unreachable!("procedural shapes are solids")
        };
        let record = ObjectRecord {
            name: name.clone(),
            family,
            handle,
            solid: solid.clone(),
        };
        write_json(&root.join("objects").join(format!("{name}.json")), &record)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("sdf/{name}")));
        let samples = sample_sdf_points(&shape, spec.sdf_points, sample_mix(spec), &mut rng)?;
        write_bytes(&root.join("objects").join(format!("{name}.sdf")), &samples.encode())?;

        for (split, count, elevation, tag) in [
            (Split::Train, spec.views_per_object, spec.elevation_deg, "v"),
            (Split::HeldOut, spec.held_out_views, spec.held_out_elevation_deg, "h"),
        ] {
            for j in 0..count {
                let view = format!("{name}_{tag}{j:02}");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("view/{view}")));
                let (pose, cam, obs, map) = render_sample(&shape, spec, elevation, &mut rng)?;
                let dir = root.join("views");
                create_dir(&dir)?;
                write_observation(&dir.join(format!("{view}_obs")), &obs, Some(&cam))?;
                write_norf_map(&dir.join(format!("{view}_norf")), &map, Some(&cam), Some(&pose))?;
                if split == Split::HeldOut {
                    write_depth(&dir.join(format!("{view}_depth")), &DepthMap::from_norf(&map), &cam)?;
                }
                views.push(ViewEntry {
                    name: view,
                    object: i,
                    split,
                });
            }
        }
        objects.push(name);
    }
    let manifest = Manifest {
        seed: cfg.seed,
        image_size: spec.image_size,
        objects,
        views,
        files: hash_tree(&root, &[MANIFEST])?,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loaded ground truth for one view.
#[derive(Debug, Clone)]
pub struct ViewData {
    pub entry: ViewEntry,
    pub observation: Observation,
    pub map: NorfMap,
    pub camera: Camera,
    pub pose: Sim3Transform,
}

/// Read access to a generated dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let manifest: Manifest = read_json(&root.join(MANIFEST))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Recomputes every file hash and compares with the manifest.
    pub fn verify(&self) -> Result<(), PipelineError> {
        let now = hash_tree(&self.root, &[MANIFEST])?;
        if now != self.manifest.files {
            let changed: Vec<&String> = now
                .keys()
                .chain(self.manifest.files.keys())
                .filter(|k| now.get(*k) != self.manifest.files.get(*k))
                .collect();
            return Err(PipelineError::Validation(format!("dataset files differ from the manifest: {changed:?}")));
        }
        Ok(())
    }

    pub fn object(&self, i: usize) -> Result<ObjectRecord, PipelineError> {
        let name = self
            .manifest
            .objects
            .get(i)
            .ok_or_else(|| PipelineError::Validation(format!("no object {i}")))?;
        read_json(&self.root.join("objects").join(format!("{name}.json")))
    }

    pub fn samples(&self, i: usize) -> Result<SdfSampleSet, PipelineError> {
        let name = &self.manifest.objects[i];
        let bytes = read_bytes(&self.root.join("objects").join(format!("{name}.sdf")))?;
        Ok(SdfSampleSet::decode(&bytes)?)
    }

    pub fn views(&self, split: Split) -> Vec<ViewEntry> {
        self.manifest.views.iter().filter(|v| v.split == split).cloned().collect()
    }

    pub fn view_stem(&self, name: &str, kind: &str) -> PathBuf {
        self.root.join("views").join(format!("{name}_{kind}"))
    }

    pub fn load_view(&self, entry: &ViewEntry) -> Result<ViewData, PipelineError> {
        let (observation, _) = read_observation(&self.view_stem(&entry.name, "obs"))?;
        let (map, side) = read_norf_map(&self.view_stem(&entry.name, "norf"))?;
        let camera = Camera::from_record(
            &side
                .camera
                .ok_or_else(|| PipelineError::Validation(format!("{}: map without camera", entry.name)))?,
        )?;
        let pose = Sim3Transform::from_record(
            &side
                .pose
                .ok_or_else(|| PipelineError::Validation(format!("{}: map without pose", entry.name)))?,
        );
        if observation.size != self.manifest.image_size || map.size != self.manifest.image_size {
            return Err(PipelineError::Validation(format!("{}: unexpected image size", entry.name)));
        }
        Ok(ViewData {
            entry: entry.clone(),
            observation,
            map,
            camera,
            pose,
        })
    }

    pub fn load_depth(&self, name: &str) -> Result<(DepthMap, Camera), PipelineError> {
        Ok(read_depth(&self.view_stem(name, "depth"))?)
    }
}
