//! Ray-cast rendering of coordinate maps and shaded observations.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::camera::{Camera, CameraRecord};
use super::{GeometryError, Shape};
use crate::binio::{f32_le_bytes, f32_le_values};
use crate::sim3::{Sim3Record, Sim3Transform, Vec3};

/// Value stored in every coordinate and normal channel of background pixels.
pub const BACKGROUND_SENTINEL: f64 = -1.0;
pub const NORF_CHANNELS: [&str; 8] = ["x", "y", "z", "nx", "ny", "nz", "mask", "depth"];
pub const OBSERVATION_CHANNELS: [&str; 5] = ["shade", "mask", "nx", "ny", "nz"];
pub const DEPTH_CHANNELS: [&str; 2] = ["depth", "mask"];

const AMBIENT: f64 = 0.1;
const DIFFUSE: f64 = 0.9;

/// Per-pixel object-frame coordinates and normals of the visible surface.
#[derive(Debug, Clone, PartialEq)]
pub struct NorfMap {
    pub size: usize,
    /// `size² × 3`, row-major pixels.
    pub coords: Vec<f64>,
    /// `size² × 3` unit normals in the object frame.
    pub normals: Vec<f64>,
    pub mask: Vec<bool>,
    /// Camera-frame depth; 0 on background.
    pub depth: Vec<f64>,
}

/// Shaded image, silhouette and camera-frame normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub size: usize,
    pub shade: Vec<f64>,
    pub mask: Vec<bool>,
    /// `size² × 3`; zero on background.
    pub normals: Vec<f64>,
}

impl NorfMap {
    pub fn empty(size: usize) -> Self {
        let n = size * size;
        Self {
            size,
            coords: vec![BACKGROUND_SENTINEL; 3 * n],
            normals: vec![BACKGROUND_SENTINEL; 3 * n],
            mask: vec![false; n],
            depth: vec![0.0; n],
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_count() == 0
    }

    pub fn coord(&self, px: usize) -> Vec3 {
        Vec3::new(self.coords[3 * px], self.coords[3 * px + 1], self.coords[3 * px + 2])
    }

    pub fn normal(&self, px: usize) -> Vec3 {
        Vec3::new(self.normals[3 * px], self.normals[3 * px + 1], self.normals[3 * px + 2])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.num_pixels();
        if self.coords.len() != 3 * n || self.normals.len() != 3 * n || self.mask.len() != n || self.depth.len() != n {
            return Err(GeometryError::Invalid("coordinate map buffers disagree with size".into()));
        }
        for px in 0..n {
            if self.mask[px] {
                if self.coord(px).iter().any(|c| !(c.abs() <= 0.5 + 1e-9)) {
                    return Err(GeometryError::Invalid(format!("pixel {px} coordinate outside the cube")));
                }
                if (self.normal(px).norm() - 1.0).abs() > 1e-4 {
                    return Err(GeometryError::Invalid(format!("pixel {px} normal is not unit length")));
                }
            } else if self.coords[3 * px..3 * px + 3]
                .iter()
                .chain(&self.normals[3 * px..3 * px + 3])
                .any(|&v| v != BACKGROUND_SENTINEL)
            {
                return Err(GeometryError::Invalid(format!("background pixel {px} lacks the sentinel")));
            }
        }
        Ok(())
    }

    /// Diffusion state `(2·m_x, m_N)` in `[-1, 1]`, channel-last, zero on background.
    pub fn to_state(&self) -> Vec<f64> {
        let mut out = vec![0.0; 6 * self.num_pixels()];
        for px in 0..self.num_pixels() {
            if self.mask[px] {
                for k in 0..3 {
                    out[6 * px + k] = 2.0 * self.coords[3 * px + k];
                    out[6 * px + 3 + k] = self.normals[3 * px + k];
                }
            }
        }
        out
    }

    /// Inverse of [`NorfMap::to_state`] under a given mask. Coordinates are
    /// clipped to the cube and normals renormalised (`+z` if they vanish).
    pub fn from_state(size: usize, state: &[f64], mask: &[bool]) -> Result<Self, GeometryError> {
        let n = size * size;
        if state.len() != 6 * n || mask.len() != n {
            return Err(GeometryError::Invalid("state size does not match the map".into()));
        }
        let mut m = Self::empty(size);
        for px in 0..n {
            if !mask[px] {
                continue;
            }
            m.mask[px] = true;
            let s = &state[6 * px..6 * px + 6];
            let nrm = Vec3::new(s[3], s[4], s[5]);
            let nrm = if nrm.norm() > 1e-12 { nrm.normalize() } else { Vec3::z() };
            for k in 0..3 {
                m.coords[3 * px + k] = (0.5 * s[k]).clamp(-0.5, 0.5);
                m.normals[3 * px + k] = nrm[k];
            }
        }
        Ok(m)
    }
}

impl Observation {
    pub fn num_pixels(&self) -> usize {
        self.size * self.size
    }

    /// Channel-last conditioning `(shade, mask, nx, ny, nz)`.
    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(5 * self.num_pixels());
        for px in 0..self.num_pixels() {
            out.push(self.shade[px]);
            out.push(if self.mask[px] { 1.0 } else { 0.0 });
            out.extend_from_slice(&self.normals[3 * px..3 * px + 3]);
        }
        out
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let n = self.num_pixels();
        if self.shade.len() != n || self.mask.len() != n || self.normals.len() != 3 * n {
            return Err(GeometryError::Invalid("observation buffers disagree with size".into()));
        }
        if self.shade.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(GeometryError::Invalid("shade outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Renders both the coordinate map and the shaded observation of `shape`
/// placed in the world by `pose` (object frame to world). `light` is a
/// world-frame direction towards the light.
pub fn render_view(
    shape: &Shape,
    pose: &Sim3Transform,
    cam: &Camera,
    light: &Vec3,
) -> Result<(Observation, NorfMap), GeometryError> {
    cam.validate()?;
    let inv = pose.inverse();
    let eye = inv.apply(&cam.center());
    if shape.sdf(&eye) <= 0.0 {
        return Err(GeometryError::CameraInside);
    }
    let l = light.normalize();
    let size = cam.size;
    let mut map = NorfMap::empty(size);
    let mut obs = Observation {
        size,
        shade: vec![0.0; size * size],
        mask: vec![false; size * size],
        normals: vec![0.0; 3 * size * size],
    };
    for row in 0..size {
        for col in 0..size {
            let px = row * size + col;
            let (_, dw) = cam.pixel_ray(row, col);
            let dn = inv.apply_vector(&dw);
            let Some((t, n_obj)) = shape.ray_hit(&eye, &dn) else {
                continue;
            };
            let hit = eye + t * dn;
            map.mask[px] = true;
            map.depth[px] = t;
            for k in 0..3 {
                map.coords[3 * px + k] = hit[k].clamp(-0.5, 0.5);
                map.normals[3 * px + k] = n_obj[k];
            }
            let n_world = pose.rotation * n_obj;
            let n_cam = cam.rotation * n_world;
            obs.mask[px] = true;
            obs.shade[px] = (DIFFUSE * n_world.dot(&l).max(0.0) + AMBIENT).clamp(0.0, 1.0);
            for k in 0..3 {
                obs.normals[3 * px + k] = n_cam[k];
            }
        }
    }
    Ok((obs, map))
}

pub fn render_norf(shape: &Shape, pose: &Sim3Transform, cam: &Camera) -> Result<NorfMap, GeometryError> {
    Ok(render_view(shape, pose, cam, &Vec3::z())?.1)
}

pub fn render_observation(
    shape: &Shape,
    pose: &Sim3Transform,
    cam: &Camera,
    light: &Vec3,
) -> Result<Observation, GeometryError> {
    Ok(render_view(shape, pose, cam, light)?.0)
}

/// JSON sidecar accompanying a raw channel-last `f32` buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    pub d: usize,
    pub channels: Vec<String>,
    pub sentinel: f64,
    pub camera: Option<CameraRecord>,
    #[serde(default)]
    pub pose: Option<Sim3Record>,
}

fn write_pair(stem: &Path, sidecar: &MapSidecar, values: &[f64]) -> Result<(), GeometryError> {
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(sidecar)? + "\n")?;
    fs::write(stem.with_extension("f32"), f32_le_bytes(values))?;
    Ok(())
}

fn read_pair(stem: &Path, expect: &[&str]) -> Result<(MapSidecar, Vec<f64>), GeometryError> {
    let sidecar: MapSidecar = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    if sidecar.channels != expect {
        return Err(GeometryError::Invalid(format!("unexpected channels {:?}", sidecar.channels)));
    }
    let bytes = fs::read(stem.with_extension("f32"))?;
    let values = f32_le_values(&bytes).map_err(|e| GeometryError::Invalid(e.to_string()))?;
    if values.len() != sidecar.d * sidecar.d * expect.len() {
        return Err(GeometryError::Invalid("raw buffer length disagrees with sidecar".into()));
    }
    Ok((sidecar, values))
}

/// Writes `<stem>.json` and `<stem>.f32`.
pub fn write_norf_map(
    stem: &Path,
    map: &NorfMap,
    camera: Option<&Camera>,
    pose: Option<&Sim3Transform>,
) -> Result<(), GeometryError> {
    let mut values = Vec::with_capacity(8 * map.num_pixels());
    for px in 0..map.num_pixels() {
        values.extend_from_slice(&map.coords[3 * px..3 * px + 3]);
        values.extend_from_slice(&map.normals[3 * px..3 * px + 3]);
        values.push(if map.mask[px] { 1.0 } else { 0.0 });
        values.push(map.depth[px]);
    }
    let sidecar = MapSidecar {
        d: map.size,
        channels: NORF_CHANNELS.iter().map(|s| s.to_string()).collect(),
        sentinel: BACKGROUND_SENTINEL,
        camera: camera.map(Camera::to_record),
        pose: pose.map(Sim3Transform::to_record),
    };
    write_pair(stem, &sidecar, &values)
}

/// Reads and validates a coordinate map written by [`write_norf_map`].
pub fn read_norf_map(stem: &Path) -> Result<(NorfMap, MapSidecar), GeometryError> {
    let (sidecar, values) = read_pair(stem, &NORF_CHANNELS)?;
    let mut map = NorfMap::empty(sidecar.d);
    for (px, v) in values.chunks(8).enumerate() {
        map.coords[3 * px..3 * px + 3].copy_from_slice(&v[0..3]);
        map.normals[3 * px..3 * px + 3].copy_from_slice(&v[3..6]);
        map.mask[px] = v[6] > 0.5;
        map.depth[px] = v[7];
    }
    // Stored at single precision; restore unit normals before validation.
    for px in 0..map.num_pixels() {
        if map.mask[px] {
            let n = map.normal(px).normalize();
            map.normals[3 * px..3 * px + 3].copy_from_slice(n.as_slice());
        }
    }
    map.validate()?;
    Ok((map, sidecar))
}

pub fn write_observation(stem: &Path, obs: &Observation, camera: Option<&Camera>) -> Result<(), GeometryError> {
    let sidecar = MapSidecar {
        d: obs.size,
        channels: OBSERVATION_CHANNELS.iter().map(|s| s.to_string()).collect(),
        sentinel: 0.0,
        camera: camera.map(Camera::to_record),
        pose: None,
    };
    write_pair(stem, &sidecar, &obs.to_channels())
}

pub fn read_observation(stem: &Path) -> Result<(Observation, MapSidecar), GeometryError> {
    let (sidecar, values) = read_pair(stem, &OBSERVATION_CHANNELS)?;
    let n = sidecar.d * sidecar.d;
    let mut obs = Observation {
        size: sidecar.d,
        shade: Vec::with_capacity(n),
        mask: Vec::with_capacity(n),
        normals: Vec::with_capacity(3 * n),
    };
    for v in values.chunks(5) {
        obs.shade.push(v[0]);
        obs.mask.push(v[1] > 0.5);
        obs.normals.extend_from_slice(&v[2..5]);
    }
    obs.validate()?;
    Ok((obs, sidecar))
}

/// Metric depth with its validity mask, as handed to registration.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub size: usize,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthMap {
    pub fn from_norf(map: &NorfMap) -> Self {
        Self {
            size: map.size,
            depth: map.depth.clone(),
            mask: map.mask.clone(),
        }
    }
}

pub fn write_depth(stem: &Path, depth: &DepthMap, camera: &Camera) -> Result<(), GeometryError> {
    let sidecar = MapSidecar {
        d: depth.size,
        channels: DEPTH_CHANNELS.iter().map(|s| s.to_string()).collect(),
        sentinel: 0.0,
        camera: Some(camera.to_record()),
        pose: None,
    };
    let values: Vec<f64> = depth
        .depth
        .iter()
        .zip(&depth.mask)
        .flat_map(|(&z, &m)| [if m { z } else { 0.0 }, if m { 1.0 } else { 0.0 }])
        .collect();
    write_pair(stem, &sidecar, &values)
}

pub fn read_depth(stem: &Path) -> Result<(DepthMap, Camera), GeometryError> {
    let (sidecar, values) = read_pair(stem, &DEPTH_CHANNELS)?;
    let record = sidecar
        .camera
        .ok_or_else(|| GeometryError::Invalid("depth map without camera".into()))?;
    let camera = Camera::from_record(&record)?;
    let depth = DepthMap {
        size: sidecar.d,
        depth: values.chunks(2).map(|v| v[0]).collect(),
        mask: values.chunks(2).map(|v| v[1] > 0.5).collect(),
    };
    Ok((depth, camera))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim3::Mat3;

    fn front_cam(dist: f64, size: usize, fov: f64) -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, dist), Vec3::zeros(), Vec3::y(), fov, size).unwrap()
    }

    #[test]
    fn cube_face_coordinates() {
        let cube = Shape::cuboid([0.5; 3]);
        let cam = Camera::look_at(Vec3::new(3.0, 0.0, 0.0), Vec3::zeros(), Vec3::y(), 0.3, 16).unwrap();
        let map = render_norf(&cube, &Sim3Transform::identity(), &cam).unwrap();
        map.validate().unwrap();
        assert!(map.mask_count() > 0);
        for px in 0..map.num_pixels() {
            if map.mask[px] {
                assert_eq!(map.coords[3 * px], 0.5);
                assert!((map.normal(px) - Vec3::x()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn sphere_centre_pixel_and_depth() {
        let s = Shape::sphere(0.4);
        let cam = front_cam(2.0, 33, 0.5);
        let map = render_norf(&s, &Sim3Transform::identity(), &cam).unwrap();
        let px = 16 * 33 + 16;
        assert!(map.mask[px]);
        assert!((map.coord(px) - Vec3::new(0.0, 0.0, 0.4)).norm() < 1e-12);
        assert!((map.depth[px] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn sphere_silhouette_area() {
        let r: f64 = 0.4;
        let dist: f64 = 2.0;
        let size = 64;
        let cam = front_cam(dist, size, 0.6);
        let map = render_norf(&Shape::sphere(r), &Sim3Transform::identity(), &cam).unwrap();
        // Tangent cone half-angle gives the projected disc radius in pixels.
        let half = (r / dist).asin();
        let rad_px = cam.fx * half.tan();
        let disc = std::f64::consts::PI * rad_px * rad_px;
        let background = (size * size) as f64 - disc;
        let got = (size * size - map.mask_count()) as f64;
        assert!((got - background).abs() / background < 0.02);
    }

    #[test]
    fn correspondences_reproduce_depth_points() {
        let s = Shape::cylinder(0.3, 0.4);
        let pose = Sim3Transform::new(crate::sim3::axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.5), Vec3::new(0.1, -0.2, 0.3), 0.8);
        let cam = front_cam(2.5, 24, 0.8);
        let map = render_norf(&s, &pose, &cam).unwrap();
        assert!(map.mask_count() > 20);
        for px in 0..map.num_pixels() {
            if map.mask[px] {
                let (row, col) = (px / 24, px % 24);
                let p_cam = cam.back_project(col as f64 + 0.5, row as f64 + 0.5, map.depth[px]);
                let from_norf = cam.to_camera(&pose.apply(&map.coord(px)));
                assert!((p_cam - from_norf).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn shading_rules() {
        let cube = Shape::cuboid([0.5; 3]);
        let cam = front_cam(3.0, 8, 0.3);
        let lit = render_observation(&cube, &Sim3Transform::identity(), &cam, &Vec3::z()).unwrap();
        let grazing = render_observation(&cube, &Sim3Transform::identity(), &cam, &Vec3::x()).unwrap();
        for px in 0..64 {
            if lit.mask[px] {
                assert_eq!(lit.shade[px], 1.0);
                assert!((grazing.shade[px] - 0.1).abs() < 1e-12);
            }
        }
        lit.validate().unwrap();
    }

    #[test]
    fn roll_rotates_the_image() {
        let s = Shape::cup(super::super::CupSpec {
            radius: 0.3,
            half_height: 0.3,
            wall: 0.05,
            handle_azimuth: Some(0.0),
        });
        let cam = Camera::look_at(Vec3::new(0.4, 1.2, 1.5), Vec3::zeros(), Vec3::y(), 0.8, 16).unwrap();
        let light = Vec3::new(0.3, 1.0, 0.5);
        let a = render_observation(&s, &Sim3Transform::identity(), &cam, &light).unwrap();
        let b = render_observation(&s, &Sim3Transform::identity(), &cam.rolled(std::f64::consts::FRAC_PI_2), &light).unwrap();
        // A quarter-turn roll maps pixel (i, j) of `a` to (j, n-1-i) of `b`.
        let mut checked = 0;
        for i in 0..16 {
            for j in 0..16 {
                let (pa, pb) = (i * 16 + j, j * 16 + 15 - i);
                assert_eq!(a.mask[pa], b.mask[pb]);
                if a.mask[pa] {
                    assert!((a.shade[pa] - b.shade[pb]).abs() < 1e-6);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn files_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let cam = front_cam(2.0, 12, 0.6);
        let (obs, map) = render_view(&Shape::sphere(0.4), &Sim3Transform::identity(), &cam, &Vec3::z()).unwrap();
        write_norf_map(&dir.path().join("m"), &map, Some(&cam), Some(&Sim3Transform::identity())).unwrap();
        write_observation(&dir.path().join("o"), &obs, Some(&cam)).unwrap();
        let (back, side) = read_norf_map(&dir.path().join("m")).unwrap();
        assert_eq!(back.mask, map.mask);
        assert_eq!(side.sentinel, -1.0);
        let (ob, _) = read_observation(&dir.path().join("o")).unwrap();
        assert_eq!(ob.mask, obs.mask);
        write_depth(&dir.path().join("d"), &DepthMap::from_norf(&map), &cam).unwrap();
        let (depth, cam_back) = read_depth(&dir.path().join("d")).unwrap();
        assert_eq!(depth.mask, map.mask);
        assert_eq!(cam_back, cam);
        for (a, b) in depth.depth.iter().zip(&map.depth) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }

    #[test]
    fn camera_inside_is_rejected() {
        let cam = Camera::look_at(Vec3::zeros(), Vec3::z(), Vec3::y(), 0.6, 8).unwrap();
        let r = render_norf(&Shape::sphere(0.4), &Sim3Transform::new(Mat3::identity(), Vec3::zeros(), 1.0), &cam);
        assert!(matches!(r, Err(GeometryError::CameraInside)));
    }

    #[test]
    fn state_roundtrip() {
        let cam = front_cam(2.0, 10, 0.6);
        let map = render_norf(&Shape::sphere(0.4), &Sim3Transform::identity(), &cam).unwrap();
        let back = NorfMap::from_state(10, &map.to_state(), &map.mask).unwrap();
        for px in 0..100 {
            if map.mask[px] {
                assert!((back.coord(px) - map.coord(px)).norm() < 1e-15);
            }
        }
        back.validate().unwrap();
    }
}
