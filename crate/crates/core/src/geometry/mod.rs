//! Procedural shapes, signed distances, cameras and ray-cast rendering.

mod camera;
pub mod mesh;
mod render;
mod solid;

pub use camera::{Camera, CameraRecord};
pub use mesh::{box_mesh, icosphere, TriMesh};
pub use render::{
    read_depth, read_norf_map, read_observation, render_norf, render_observation, render_view, write_depth,
    write_norf_map, write_observation, DepthMap, MapSidecar, NorfMap, Observation, BACKGROUND_SENTINEL, DEPTH_CHANNELS,
    NORF_CHANNELS, OBSERVATION_CHANNELS,
};
pub use solid::{slab_range, Aabb, Solid};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim3::Vec3;
use crate::triplane::SdfSampleSet;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate shape: {0}")]
    Degenerate(String),
    #[error("invalid geometry: {0}")]
    Invalid(String),
    #[error("camera centre lies inside the shape")]
    CameraInside,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Spacing of the central differences used for normals.
const GRAD_STEP: f64 = 1e-6;

/// Analytic solid or triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Solid(Solid),
    Mesh(TriMesh),
}

/// Parameters of a cup standing on `y = −h`, open towards `+y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CupSpec {
    pub radius: f64,
    pub half_height: f64,
    pub wall: f64,
    /// Handle direction in radians from `+x` towards `+z`; `None` for no handle.
    pub handle_azimuth: Option<f64>,
}

impl Shape {
    pub fn sphere(radius: f64) -> Self {
        Shape::Solid(Solid::Sphere {
            center: [0.0; 3],
            radius,
        })
    }

    pub fn cuboid(half: [f64; 3]) -> Self {
        Shape::Solid(Solid::Cuboid { center: [0.0; 3], half })
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        Shape::Solid(Solid::Cylinder {
            center: [0.0; 3],
            radius,
            half_height,
        })
    }

    pub fn cup(spec: CupSpec) -> Self {
        let CupSpec {
            radius: r,
            half_height: h,
            wall: w,
            handle_azimuth,
        } = spec;
        let outer = Solid::Cylinder {
            center: [0.0; 3],
            radius: r,
            half_height: h,
        };
        let cavity = Solid::Cylinder {
            center: [0.0, w, 0.0],
            radius: r - w,
            half_height: h,
        };
        let shell = Solid::subtract(outer.clone(), cavity);
        Shape::Solid(match handle_azimuth {
            None => shell,
            Some(phi) => {
                let major = 0.55 * h;
                let torus = Solid::Torus {
                    center: [r * phi.cos(), 0.0, r * phi.sin()],
                    azimuth: phi,
                    major,
                    minor: 0.35 * w.max(0.15 * major),
                };
                Solid::union(shell, Solid::subtract(torus, outer))
            }
        })
    }

    /// Box with the `+x, +y` edge region removed, leaving an L-shaped profile
    /// extruded along `z`. `cut` gives the fraction of each half-extent kept.
    pub fn ell(half: [f64; 3], cut: [f64; 2]) -> Self {
        let body = Solid::Cuboid { center: [0.0; 3], half };
        let m = 0.1 * half.iter().cloned().fold(0.0, f64::max);
        let x0 = -half[0] + 2.0 * half[0] * cut[0];
        let y0 = -half[1] + 2.0 * half[1] * cut[1];
        let notch = Solid::Cuboid {
            center: [0.5 * (x0 + half[0] + m), 0.5 * (y0 + half[1] + m), 0.0],
            half: [0.5 * (half[0] + m - x0), 0.5 * (half[1] + m - y0), half[2] + m],
        };
        Shape::Solid(Solid::subtract(body, notch))
    }

    pub fn bounds(&self) -> Result<Aabb, GeometryError> {
        match self {
            Shape::Solid(s) => Ok(s.bounds()),
            Shape::Mesh(m) => m.bounds().ok_or_else(|| GeometryError::Degenerate("mesh has no vertices".into())),
        }
    }

    /// Recentres on the bounding-box centre and scales the largest extent to 1.
    pub fn normalize_to_unit_cube(&self) -> Result<Shape, GeometryError> {
        let b = self.bounds()?;
        let ext = b.extent().max();
        if !(ext > 1e-12) || !ext.is_finite() {
            return Err(GeometryError::Degenerate(format!("largest extent {ext}")));
        }
        let s = 1.0 / ext;
        let offset = -s * b.center();
        Ok(match self {
            Shape::Solid(solid) => Shape::Solid(solid.transformed(s, &offset)),
            Shape::Mesh(m) => Shape::Mesh(m.transformed(|p| s * p + offset)),
        })
    }

    pub fn sdf(&self, p: &Vec3) -> f64 {
        match self {
            Shape::Solid(s) => s.sdf(p),
            Shape::Mesh(m) => m.signed_distance(p),
        }
    }

    /// Whether the sign of [`Shape::sdf`] can be trusted (false for open meshes).
    pub fn sign_reliable(&self) -> bool {
        match self {
            Shape::Solid(_) => true,
            Shape::Mesh(m) => m.is_watertight(),
        }
    }

    /// Unit central-difference gradient of the distance field.
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let mut g = Vec3::zeros();
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = GRAD_STEP;
            g[k] = (self.sdf(&(p + e)) - self.sdf(&(p - e))) / (2.0 * GRAD_STEP);
        }
        let n = g.norm();
        if n > 0.0 {
            g / n
        } else {
            g
        }
    }

    /// First surface hit of `o + t·d` (`t ≥ 0`) with the outward unit normal.
    pub fn ray_hit(&self, o: &Vec3, d: &Vec3) -> Option<(f64, Vec3)> {
        let (t_enter, t_exit) = match self.bounds() {
            Ok(b) => slab_range(o, d, &(b.min - Vec3::repeat(1e-6)), &(b.max + Vec3::repeat(1e-6)))?,
            Err(_) => return None,
        };
        if t_exit < 0.0 {
            return None;
        }
        match self {
            Shape::Mesh(m) => m.ray_hit(o, d, 0.0).map(|(t, f)| (t, m.face_normal(f))),
            Shape::Solid(s) => {
                let t = match s.analytic_hit(o, d, 0.0) {
                    Some(hit) => hit?,
                    None => sphere_trace(s, o, d, t_enter.max(0.0), t_exit)?,
                };
                Some((t, self.gradient(&(o + t * d))))
            }
        }
    }

    /// Points on the surface, obtained by projecting uniform cube samples
    /// along the distance gradient (solids) or by area sampling (meshes).
    pub fn surface_points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        if let Shape::Mesh(m) = self {
            return m.sample_surface(n, rng);
        }
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n && attempts < 100 * n + 1000 {
            attempts += 1;
            let mut p = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            for _ in 0..16 {
                let d = self.sdf(&p);
                if d.abs() < 1e-10 {
                    break;
                }
                p -= d * self.gradient(&p);
            }
            if self.sdf(&p).abs() < 1e-7 {
                out.push(p);
            }
        }
        out
    }
}

fn sphere_trace(s: &Solid, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<f64> {
    let speed = d.norm();
    let mut t = t0;
    for _ in 0..2000 {
        let dist = s.sdf(&(o + t * d));
        if dist < 1e-10 {
            return Some(t);
        }
        t += dist / speed;
        if t > t1 {
            return None;
        }
    }
    None
}

/// Mix of supervision points: uniform in the cube and near the surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMix {
    /// Fraction of points drawn uniformly in the cube.
    pub uniform_fraction: f64,
    /// Standard deviation of the offset added to surface points.
    pub surface_sigma: f64,
}

impl Default for SampleMix {
    fn default() -> Self {
        Self {
            uniform_fraction: 0.2,
            surface_sigma: 0.02,
        }
    }
}

/// Signed-distance supervision for a unit-cube shape.
pub fn sample_sdf_points<R: Rng + ?Sized>(
    shape: &Shape,
    count: usize,
    mix: SampleMix,
    rng: &mut R,
) -> Result<SdfSampleSet, GeometryError> {
    if count == 0 {
        return Err(GeometryError::Invalid("sample count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&mix.uniform_fraction) || !(mix.surface_sigma > 0.0) {
        return Err(GeometryError::Invalid("invalid sample mix".into()));
    }
    let n_uniform = (count as f64 * mix.uniform_fraction).round() as usize;
    let mut points: Vec<Vec3> = (0..n_uniform)
        .map(|_| Vec3::new(rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)))
        .collect();
    let jitter = Normal::new(0.0, mix.surface_sigma).expect("positive sigma");
    let mut surface = Vec::new();
    while points.len() < count {
        if surface.is_empty() {
            surface = shape.surface_points(count - points.len(), rng);
            if surface.is_empty() {
                return Err(GeometryError::Degenerate("no surface points found".into()));
            }
        }
        let s = surface.pop().expect("non-empty");
        let p = s + Vec3::new(jitter.sample(rng), jitter.sample(rng), jitter.sample(rng));
        if p.iter().all(|c| c.abs() <= 0.5) {
            points.push(p);
        }
    }
    let distances = points.iter().map(|p| shape.sdf(p)).collect();
    let points = points.into_iter().map(|p| [p.x, p.y, p.z]).collect();
    SdfSampleSet::new(points, distances).map_err(|e| GeometryError::Invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cube_normalization() {
        let s = Shape::Solid(Solid::Cuboid {
            center: [1.0; 3],
            half: [1.0; 3],
        });
        let n = s.normalize_to_unit_cube().unwrap();
        let b = n.bounds().unwrap();
        assert!((b.min - Vec3::repeat(-0.5)).norm() < 1e-15);
        assert!((b.max - Vec3::repeat(0.5)).norm() < 1e-15);
        let b = Shape::cuboid([1.0, 0.5, 0.5]).normalize_to_unit_cube().unwrap().bounds().unwrap();
        assert!((b.extent() - Vec3::new(1.0, 0.5, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn degenerate_shape_rejected() {
        assert!(Shape::sphere(0.0).normalize_to_unit_cube().is_err());
    }

    #[test]
    fn mesh_normalization_matches_vertex_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let verts: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-3.0..1.0), rng.random_range(0.0..5.0), rng.random_range(2.0..2.5)))
            .collect();
        let faces = (0..10u32).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        let m = Shape::Mesh(TriMesh::new(verts, faces).unwrap());
        let Shape::Mesh(n) = m.normalize_to_unit_cube().unwrap() else { unreachable!() };
        let (mut lo, mut hi) = (Vec3::repeat(f64::MAX), Vec3::repeat(f64::MIN));
        for v in &n.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        assert!(((hi - lo).max() - 1.0).abs() < 1e-12);
        assert!((hi + lo).norm() < 1e-12);
    }

    #[test]
    fn icosphere_distance_close_to_sphere() {
        let ico = icosphere(0.4, 3);
        let chord = 0.4
            - (0..ico.faces.len())
                .map(|f| {
                    let [a, b, c] = ico.triangle(f);
                    mesh::closest_point_on_triangle(&Vec3::zeros(), &a, &b, &c).norm()
                })
                .fold(f64::INFINITY, f64::min);
        let mesh = Shape::Mesh(ico);
        assert!(mesh.sign_reliable());
        let sphere = Shape::sphere(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            assert!((mesh.sdf(&p) - sphere.sdf(&p)).abs() < 2.0 * chord);
        }
    }

    #[test]
    fn cup_and_ell_fit_the_cube() {
        let cup = Shape::cup(CupSpec {
            radius: 0.3,
            half_height: 0.35,
            wall: 0.05,
            handle_azimuth: Some(0.4),
        })
        .normalize_to_unit_cube()
        .unwrap();
        let b = cup.bounds().unwrap();
        assert!((b.extent().max() - 1.0).abs() < 1e-12);
        // Cavity is open at the top and the floor is solid.
        assert!(cup.sdf(&Vec3::new(0.0, 0.45, 0.0)) > 0.0);
        let ell = Shape::ell([0.5, 0.4, 0.2], [0.5, 0.5]).normalize_to_unit_cube().unwrap();
        assert!(ell.sdf(&Vec3::new(0.4, 0.4, 0.0)) > 0.0);
        assert!(ell.sdf(&Vec3::new(-0.4, -0.3, 0.0)) < 0.0);
    }

    #[test]
    fn sampling_mix_and_determinism() {
        let s = Shape::sphere(0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let uni = sample_sdf_points(&s, 500, SampleMix { uniform_fraction: 1.0, surface_sigma: 0.02 }, &mut rng).unwrap();
        assert!(uni.points.iter().flatten().all(|c| c.abs() <= 0.5));
        let near = sample_sdf_points(&s, 2001, SampleMix { uniform_fraction: 0.0, surface_sigma: 0.02 }, &mut rng).unwrap();
        let mut d: Vec<f64> = near.distances.iter().map(|d| d.abs()).collect();
        d.sort_by(f64::total_cmp);
        assert!(d[1000] < 0.03);
        let a = sample_sdf_points(&s, 100, SampleMix::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = sample_sdf_points(&s, 100, SampleMix::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ray_hits_csg_shape() {
        let ell = Shape::ell([0.5, 0.5, 0.25], [0.5, 0.5]);
        // Straight down onto the lower step at x = 0.25.
        let (t, n) = ell.ray_hit(&Vec3::new(0.25, 2.0, 0.0), &Vec3::new(0.0, -1.0, 0.0)).unwrap();
        assert!((t - 2.0).abs() < 1e-8);
        assert!((n - Vec3::y()).norm() < 1e-4);
    }
}
