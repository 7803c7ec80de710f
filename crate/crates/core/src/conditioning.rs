//! Triplane-aligned conditioning from a coordinate map: outlier filtering,
//! voxelisation with mean normals, orthographic projection onto the XY, XZ
//! and YZ planes, and pixel unshuffling to the triplane resolution.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{f32_le_bytes, f32_le_values};
use crate::geometry::NorfMap;
use crate::sim3::Vec3;

/// Coordinates may overshoot the cube by this much before being discarded.
pub const COORD_SLACK: f64 = 0.55;
pub const OUTLIER_NEIGHBOURS: usize = 5;
pub const OUTLIER_FACTOR: f64 = 3.0;
pub const MIN_POINTS: usize = 8;
/// Channels per plane before unshuffling: occupancy and mean normal.
pub const PLANE_CHANNELS: usize = 4;
pub const UNSHUFFLE_FACTOR: usize = 2;
pub const ORTHO_CHANNELS: usize = 3 * PLANE_CHANNELS * UNSHUFFLE_FACTOR * UNSHUFFLE_FACTOR;

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("only {0} usable points after filtering")]
    InsufficientEvidence(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Oriented point in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Keeps in-cube foreground points and drops isolated ones: a point is an
/// outlier when the mean distance to its five nearest neighbours exceeds
/// three times the median of that statistic.
pub fn filter_points(m: &NorfMap) -> Result<Vec<OrientedPoint>, ConditioningError> {
    let mut pts = Vec::new();
    for px in 0..m.num_pixels() {
        if !m.mask[px] {
            continue;
        }
        let c = m.coord(px);
        let n = m.normal(px);
        if !c.iter().all(|v| v.abs() <= COORD_SLACK) || !(n.norm() > 1e-12) {
            continue;
        }
        pts.push(OrientedPoint {
            position: c.map(|v| v.clamp(-0.5, 0.5)),
            normal: n.normalize(),
        });
    }
    if pts.len() < MIN_POINTS {
        return Err(ConditioningError::InsufficientEvidence(pts.len()));
    }
    let stat = knn_mean_distance(&pts.iter().map(|p| p.position).collect::<Vec<_>>(), OUTLIER_NEIGHBOURS);
    let mut sorted = stat.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let kept: Vec<OrientedPoint> = pts
        .into_iter()
        .zip(&stat)
        .filter(|(_, &s)| s <= OUTLIER_FACTOR * median)
        .map(|(p, _)| p)
        .collect();
    if kept.len() < MIN_POINTS {
        return Err(ConditioningError::InsufficientEvidence(kept.len()));
    }
    Ok(kept)
}

/// Mean Euclidean distance from each point to its `k` nearest other points.
pub fn knn_mean_distance(points: &[Vec3], k: usize) -> Vec<f64> {
    let k = k.min(points.len().saturating_sub(1)).max(1);
    let mut best = vec![f64::INFINITY; k];
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            best.fill(f64::INFINITY);
            for (j, q) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (p - q).norm_squared();
                if d < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d);
                    best.insert(pos, d);
                    best.truncate(k);
                }
            }
            best.iter().filter(|d| d.is_finite()).map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect()
}

/// Cubic occupancy grid of side `2^(p+1)` with per-cell mean normals.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub side: usize,
    pub occupancy: Vec<bool>,
    /// `side³ × 3`; zero where empty.
    pub mean_normal: Vec<f64>,
}

impl VoxelGrid {
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.side + iy) * self.side + iz
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }
}

/// Cell index of a cube coordinate on an axis split into `side` cells.
pub fn cell_of(v: f64, side: usize) -> usize {
    (((v + 0.5) * side as f64).floor().max(0.0) as usize).min(side - 1)
}

pub fn voxelize(points: &[OrientedPoint], lod: u32) -> VoxelGrid {
    let side = 1usize << (lod + 1);
    let cells = side * side * side;
    let mut count = vec![0u32; cells];
    let mut sum = vec![0.0; 3 * cells];
    for p in points {
        let [x, y, z] = [0, 1, 2].map(|k| cell_of(p.position[k], side));
        let i = (x * side + y) * side + z;
        count[i] += 1;
        for k in 0..3 {
            sum[3 * i + k] += p.normal[k];
        }
    }
    let mut mean_normal = sum;
    for (i, &c) in count.iter().enumerate() {
        if c > 0 {
            for k in 0..3 {
                mean_normal[3 * i + k] /= c as f64;
            }
        }
    }
    VoxelGrid {
        side,
        occupancy: count.iter().map(|&c| c > 0).collect(),
        mean_normal,
    }
}

/// Orthographic projections, each `side × side × 4` channel-last, ordered
/// XY (along z), XZ (along y), YZ (along x). Channel 0 is 1 where any cell
/// of the column is occupied; channels 1..3 average the occupied cells'
/// mean normals.
pub fn ortho_project(grid: &VoxelGrid) -> [Vec<f64>; 3] {
    let s = grid.side;
    let mut planes = [vec![0.0; s * s * 4], vec![0.0; s * s * 4], vec![0.0; s * s * 4]];
    let mut counts = [vec![0u32; s * s], vec![0u32; s * s], vec![0u32; s * s]];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let i = grid.index(x, y, z);
                if !grid.occupancy[i] {
                    continue;
                }
                for (plane, (r, c)) in [(x, y), (x, z), (y, z)].into_iter().enumerate() {
                    let px = r * s + c;
                    counts[plane][px] += 1;
                    planes[plane][4 * px] = 1.0;
                    for k in 0..3 {
                        planes[plane][4 * px + 1 + k] += grid.mean_normal[3 * i + k];
                    }
                }
            }
        }
    }
    for (plane, cnt) in planes.iter_mut().zip(&counts) {
        for (px, &c) in cnt.iter().enumerate() {
            if c > 0 {
                for k in 1..4 {
                    plane[4 * px + k] /= c as f64;
                }
            }
        }
    }
    planes
}

/// Space-to-depth: `(h, w, c)` to `(h/f, w/f, c·f²)`; input channel `ch`
/// at block offset `(dy, dx)` lands in channel `ch·f² + dy·f + dx`.
pub fn pixel_unshuffle(data: &[f64], h: usize, w: usize, c: usize, f: usize) -> Result<Vec<f64>, ConditioningError> {
    if f == 0 || h % f != 0 || w % f != 0 || data.len() != h * w * c {
        return Err(ConditioningError::Shape(format!("cannot unshuffle {h}x{w}x{c} by {f}")));
    }
    let (oh, ow, oc) = (h / f, w / f, c * f * f);
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                let o = ((r / f) * ow + col / f) * oc + ch * f * f + (r % f) * f + col % f;
                out[o] = data[(r * w + col) * c + ch];
            }
        }
    }
    debug_assert_eq!(out.len(), oh * ow * oc);
    Ok(out)
}

/// Inverse of [`pixel_unshuffle`]; `(h, w, c)` are the unshuffled dimensions.
pub fn pixel_shuffle(data: &[f64], h: usize, w: usize, c: usize, f: usize) -> Result<Vec<f64>, ConditioningError> {
    if f == 0 || c % (f * f) != 0 || data.len() != h * w * c {
        return Err(ConditioningError::Shape(format!("cannot shuffle {h}x{w}x{c} by {f}")));
    }
    let (oc, ow) = (c / (f * f), w * f);
    let mut out = vec![0.0; data.len()];
    for r in 0..h * f {
        for col in 0..ow {
            for ch in 0..oc {
                let i = ((r / f) * w + col / f) * c + ch * f * f + (r % f) * f + col % f;
                out[(r * ow + col) * oc + ch] = data[i];
            }
        }
    }
    Ok(out)
}

/// `2^p × 2^p × 48` channel-last conditioning; plane `k` occupies channels
/// `16k .. 16k + 16`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoNorf {
    pub lod: u32,
    pub data: Vec<f64>,
}

impl OrthoNorf {
    pub fn zeros(lod: u32) -> Self {
        let r = 1usize << lod;
        Self {
            lod,
            data: vec![0.0; r * r * ORTHO_CHANNELS],
        }
    }

    pub fn resolution(&self) -> usize {
        1 << self.lod
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.resolution(), self.resolution(), ORTHO_CHANNELS]
    }

    pub fn from_planes(planes: &[Vec<f64>; 3], lod: u32) -> Result<Self, ConditioningError> {
        let side = 1usize << (lod + 1);
        let r = side / UNSHUFFLE_FACTOR;
        let per = PLANE_CHANNELS * UNSHUFFLE_FACTOR * UNSHUFFLE_FACTOR;
        let mut data = vec![0.0; r * r * ORTHO_CHANNELS];
        for (k, plane) in planes.iter().enumerate() {
            let u = pixel_unshuffle(plane, side, side, PLANE_CHANNELS, UNSHUFFLE_FACTOR)?;
            for px in 0..r * r {
                data[px * ORTHO_CHANNELS + k * per..px * ORTHO_CHANNELS + (k + 1) * per]
                    .copy_from_slice(&u[px * per..(px + 1) * per]);
            }
        }
        Ok(Self { lod, data })
    }

    /// Recovers the three projected planes.
    pub fn to_planes(&self) -> Result<[Vec<f64>; 3], ConditioningError> {
        let r = self.resolution();
        let per = PLANE_CHANNELS * UNSHUFFLE_FACTOR * UNSHUFFLE_FACTOR;
        let mut out: [Vec<f64>; 3] = Default::default();
        for (k, slot) in out.iter_mut().enumerate() {
            let mut u = vec![0.0; r * r * per];
            for px in 0..r * r {
                u[px * per..(px + 1) * per]
                    .copy_from_slice(&self.data[px * ORTHO_CHANNELS + k * per..px * ORTHO_CHANNELS + (k + 1) * per]);
            }
            *slot = pixel_shuffle(&u, r, r, per, UNSHUFFLE_FACTOR)?;
        }
        Ok(out)
    }

    pub fn write(&self, stem: &Path) -> Result<(), ConditioningError> {
        let header = OrthoHeader {
            shape: self.shape().to_vec(),
            lod: self.lod,
        };
        fs::write(stem.with_extension("json"), serde_json::to_string(&header)? + "\n")?;
        fs::write(stem.with_extension("f32"), f32_le_bytes(&self.data))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self, ConditioningError> {
        let header: OrthoHeader = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let r = 1usize << header.lod;
        if header.shape != [r, r, ORTHO_CHANNELS] {
            return Err(ConditioningError::Shape(format!("header shape {:?}", header.shape)));
        }
        let data = f32_le_values(&fs::read(stem.with_extension("f32"))?)
            .map_err(|e| ConditioningError::Shape(e.to_string()))?;
        if data.len() != r * r * ORTHO_CHANNELS {
            return Err(ConditioningError::Shape("payload length disagrees with header".into()));
        }
        Ok(Self { lod: header.lod, data })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OrthoHeader {
    shape: Vec<usize>,
    lod: u32,
}

/// Full conditioning path from a coordinate map.
pub fn ortho_norf(m: &NorfMap, lod: u32) -> Result<OrthoNorf, ConditioningError> {
    let pts = filter_points(m)?;
    let grid = voxelize(&pts, lod);
    OrthoNorf::from_planes(&ortho_project(&grid), lod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_norf, Camera, Shape};
    use crate::sim3::Sim3Transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(p: [f64; 3], n: [f64; 3]) -> OrientedPoint {
        OrientedPoint {
            position: Vec3::from(p),
            normal: Vec3::from(n),
        }
    }

    #[test]
    fn single_point_voxel() {
        let g = voxelize(&[pt([0.0; 3], [0.0, 1.0, 0.0])], 3);
        assert_eq!(g.side, 16);
        assert_eq!(g.occupied_count(), 1);
        let i = g.index(8, 8, 8);
        assert!(g.occupancy[i]);
        assert_eq!(&g.mean_normal[3 * i..3 * i + 3], &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn antipodal_normals_cancel() {
        let g = voxelize(&[pt([0.1; 3], [1.0, 0.0, 0.0]), pt([0.1; 3], [-1.0, 0.0, 0.0])], 2);
        let i = g.occupancy.iter().position(|&o| o).unwrap();
        assert_eq!(&g.mean_normal[3 * i..3 * i + 3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn full_column_projection() {
        let pts: Vec<_> = (0..8)
            .map(|k| pt([0.1, 0.2, -0.5 + (k as f64 + 0.5) / 8.0], [0.0, 0.0, 1.0]))
            .collect();
        let g = voxelize(&pts, 2);
        let planes = ortho_project(&g);
        let (x, y) = (cell_of(0.1, 8), cell_of(0.2, 8));
        let px = x * 8 + y;
        assert_eq!(&planes[0][4 * px..4 * px + 4], &[1.0, 0.0, 0.0, 1.0]);
        // Single voxel: one pixel per plane.
        let one = ortho_project(&voxelize(&pts[..1], 2));
        for p in &one {
            assert_eq!(p.chunks(4).filter(|c| c[0] != 0.0).count(), 1);
        }
    }

    #[test]
    fn unshuffle_shapes_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..8 * 6 * 3).map(|_| rng.random()).collect();
        let u = pixel_unshuffle(&data, 8, 6, 3, 2).unwrap();
        assert_eq!(pixel_shuffle(&u, 4, 3, 12, 2).unwrap(), data);
        assert!(pixel_unshuffle(&data, 8, 6, 3, 4).is_err());
        let planes: [Vec<f64>; 3] = std::array::from_fn(|_| (0..64 * 64 * 4).map(|_| rng.random()).collect());
        let o = OrthoNorf::from_planes(&planes, 5).unwrap();
        assert_eq!(o.shape(), [32, 32, 48]);
        assert_eq!(o.data.len(), 32 * 32 * 48);
        assert_eq!(o.to_planes().unwrap(), planes);
    }

    #[test]
    fn unshuffle_index_oracle() {
        let (side, lod) = (8usize, 2u32);
        for (plane, r, c, ch) in [(0usize, 3usize, 5usize, 2usize), (2, 7, 0, 0), (1, 4, 4, 3)] {
            let mut planes: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; side * side * 4]);
            planes[plane][(r * side + c) * 4 + ch] = 1.0;
            let o = OrthoNorf::from_planes(&planes, lod).unwrap();
            let expect = ((r / 2) * 4 + c / 2) * 48 + 16 * plane + ch * 4 + (r % 2) * 2 + c % 2;
            let nz: Vec<usize> = o.data.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
            assert_eq!(nz, vec![expect]);
        }
    }

    fn sphere_map(size: usize) -> NorfMap {
        let cam = Camera::look_at(Vec3::new(0.3, 0.8, 2.0), Vec3::zeros(), Vec3::y(), 0.6, size).unwrap();
        render_norf(&Shape::sphere(0.4), &Sim3Transform::identity(), &cam).unwrap()
    }

    #[test]
    fn clean_map_keeps_everything() {
        let m = sphere_map(32);
        assert_eq!(filter_points(&m).unwrap().len(), m.mask_count());
        let cube = Shape::cuboid([0.5, 0.3, 0.2]);
        let cam = Camera::look_at(Vec3::new(1.5, 1.2, 2.0), Vec3::zeros(), Vec3::y(), 0.7, 32).unwrap();
        let m = render_norf(&cube, &Sim3Transform::identity(), &cam).unwrap();
        assert_eq!(filter_points(&m).unwrap().len(), m.mask_count());
    }

    #[test]
    fn injected_outlier_is_dropped() {
        // A dense patch of 500 points plus one far away.
        let mut m = NorfMap::empty(23);
        let mut px = 0;
        for i in 0..20 {
            for j in 0..25 {
                m.mask[px] = true;
                let c = [-0.3 + i as f64 * 0.01, -0.3 + j as f64 * 0.01, 0.1];
                m.coords[3 * px..3 * px + 3].copy_from_slice(&c);
                m.normals[3 * px..3 * px + 3].copy_from_slice(&[0.0, 0.0, 1.0]);
                px += 1;
            }
        }
        m.mask[px] = true;
        m.coords[3 * px..3 * px + 3].copy_from_slice(&[0.45, 0.45, -0.45]);
        m.normals[3 * px..3 * px + 3].copy_from_slice(&[0.0, 0.0, 1.0]);
        let kept = filter_points(&m).unwrap();
        assert_eq!(kept.len(), 500);
        assert!(kept.iter().all(|p| p.position.z == 0.1));
    }

    #[test]
    fn background_map_is_insufficient() {
        assert!(matches!(
            filter_points(&NorfMap::empty(16)),
            Err(ConditioningError::InsufficientEvidence(0))
        ));
    }

    #[test]
    fn ortho_norf_shape_and_file() {
        let o = ortho_norf(&sphere_map(24), 3).unwrap();
        assert_eq!(o.shape(), [8, 8, 48]);
        assert!(o.data.iter().any(|&v| v != 0.0));
        let dir = tempfile::tempdir().unwrap();
        o.write(&dir.path().join("c")).unwrap();
        let back = OrthoNorf::read(&dir.path().join("c")).unwrap();
        for (a, b) in back.data.iter().zip(&o.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
