//! Isosurface extraction: octree refinement of surface-crossing cells down to
//! a fixed level of detail, then marching cubes on the leaves.

mod table;

use std::collections::HashMap;

use crate::geometry::TriMesh;
use crate::sim3::Vec3;
use crate::triplane::{FieldError, FieldLibrary, Triplane};
use table::TRIANGLE_TABLE;

/// Corner offsets in case-index bit order.
const CORNERS: [[u32; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Step of the central differences used for vertex normals.
const NORMAL_STEP: f64 = 1e-4;

type Lattice = [u32; 3];

#[derive(Debug, thiserror::Error)]
pub enum SurfaceError<E> {
    #[error("level of detail must lie in 2..=10, got {0}")]
    Lod(u32),
    #[error("field evaluation failed: {0}")]
    Field(E),
}

/// Batched signed-distance evaluation over points in the unit cube.
pub trait SdfField {
    type Error;
    fn eval(&mut self, points: &[[f64; 3]]) -> Result<Vec<f64>, Self::Error>;
}

impl<E, F: FnMut(&[[f64; 3]]) -> Result<Vec<f64>, E>> SdfField for F {
    type Error = E;
    fn eval(&mut self, points: &[[f64; 3]]) -> Result<Vec<f64>, E> {
        self(points)
    }
}

/// Lattice of the finest level with per-corner value cache.
struct Grid {
    lod: u32,
    values: HashMap<Lattice, f64>,
}

impl Grid {
    fn position(&self, p: Lattice) -> [f64; 3] {
        let n = (1u64 << self.lod) as f64;
        [p[0] as f64 / n - 0.5, p[1] as f64 / n - 0.5, p[2] as f64 / n - 0.5]
    }

    /// Evaluates every listed lattice point that is not cached yet.
    fn fill<F: SdfField>(&mut self, points: &[Lattice], field: &mut F) -> Result<(), F::Error> {
        let mut missing = Vec::new();
        for p in points {
            if !self.values.contains_key(p) {
                self.values.insert(*p, f64::NAN);
                missing.push(*p);
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        let xyz: Vec<[f64; 3]> = missing.iter().map(|&p| self.position(p)).collect();
        let vals = field.eval(&xyz)?;
        for (p, v) in missing.into_iter().zip(vals) {
            self.values.insert(p, v);
        }
        Ok(())
    }
}

fn cell_corners(cell: Lattice, span: u32) -> [Lattice; 8] {
    CORNERS.map(|o| [(cell[0] + o[0]) * span, (cell[1] + o[1]) * span, (cell[2] + o[2]) * span])
}

/// Leaf cells at depth `lod` that may touch the zero level set, in a fixed order.
fn refine<F: SdfField>(grid: &mut Grid, field: &mut F) -> Result<Vec<Lattice>, F::Error> {
    let lod = grid.lod;
    let mut cells: Vec<Lattice> = vec![[0, 0, 0]];
    for depth in 0..lod {
        let span = 1u32 << (lod - depth);
        let corners: Vec<Lattice> = cells.iter().flat_map(|&c| cell_corners(c, span)).collect();
        grid.fill(&corners, field)?;
        let size = 1.0 / (1u64 << depth) as f64;
        let centers: Vec<[f64; 3]> = cells
            .iter()
            .map(|c| [(c[0] as f64 + 0.5) * size - 0.5, (c[1] as f64 + 0.5) * size - 0.5, (c[2] as f64 + 0.5) * size - 0.5])
            .collect();
        let center_vals = field.eval(&centers)?;
        let half_diag = 0.5 * 3f64.sqrt() * size;
        let mut next = Vec::new();
        for (c, cv) in cells.iter().zip(center_vals) {
            let vals = cell_corners(*c, span).map(|p| grid.values[&p]);
            let crossing = vals.iter().any(|v| *v < 0.0) && vals.iter().any(|v| *v >= 0.0);
            if crossing || cv.abs() < half_diag {
                for o in CORNERS {
                    next.push([2 * c[0] + o[0], 2 * c[1] + o[1], 2 * c[2] + o[2]]);
                }
            }
        }
        next.sort_unstable();
        cells = next;
    }
    let corners: Vec<Lattice> = cells.iter().flat_map(|&c| cell_corners(c, 1)).collect();
    grid.fill(&corners, field)?;
    Ok(cells)
}

/// Extracts the zero level set of `field` over `[-0.5, 0.5]³` at octree depth
/// `lod`, with per-vertex normals. A field without a sign change gives an
/// empty mesh.
pub fn extract_surface<F: SdfField>(field: &mut F, lod: u32) -> Result<TriMesh, SurfaceError<F::Error>> {
    if !(2..=10).contains(&lod) {
        return Err(SurfaceError::Lod(lod));
    }
    let mut grid = Grid {
        lod,
        values: HashMap::new(),
    };
    let cells = refine(&mut grid, field).map_err(SurfaceError::Field)?;
    let mut vertices: Vec<Vec3> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut edge_index: HashMap<(Lattice, Lattice), u32> = HashMap::new();
    for cell in cells {
        let corners = cell_corners(cell, 1);
        let vals = corners.map(|p| grid.values[&p]);
        let mut case = 0usize;
        for (i, v) in vals.iter().enumerate() {
            if *v < 0.0 {
                case |= 1 << i;
            }
        }
        if case == 0 || case == 255 {
            continue;
        }
        let mut slot = [u32::MAX; 12];
        for (e, [a, b]) in EDGES.iter().enumerate() {
            if (vals[*a] < 0.0) == (vals[*b] < 0.0) {
                continue;
            }
            let key = if corners[*a] < corners[*b] { (corners[*a], corners[*b]) } else { (corners[*b], corners[*a]) };
            slot[e] = *edge_index.entry(key).or_insert_with(|| {
                let (pa, pb) = (grid.position(corners[*a]), grid.position(corners[*b]));
                let t = vals[*a] / (vals[*a] - vals[*b]);
                vertices.push(Vec3::new(
                    pa[0] + t * (pb[0] - pa[0]),
                    pa[1] + t * (pb[1] - pa[1]),
                    pa[2] + t * (pb[2] - pa[2]),
                ));
                (vertices.len() - 1) as u32
            });
        }
        for tri in TRIANGLE_TABLE[case].chunks(3) {
            if tri[0] < 0 {
                break;
            }
            let f = [slot[tri[0] as usize], slot[tri[2] as usize], slot[tri[1] as usize]];
            if f[0] != f[1] && f[1] != f[2] && f[0] != f[2] {
                faces.push(f);
            }
        }
    }
    if faces.is_empty() {
        return Ok(TriMesh::empty());
    }
    let mut probes = Vec::with_capacity(6 * vertices.len());
    for v in &vertices {
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let mut p = [v.x, v.y, v.z];
                p[axis] = (p[axis] + sign * NORMAL_STEP).clamp(-0.5, 0.5);
                probes.push(p);
            }
        }
    }
    let vals = field.eval(&probes).map_err(SurfaceError::Field)?;
    let normals = vals
        .chunks(6)
        .map(|d| {
            let g = Vec3::new(d[0] - d[1], d[2] - d[3], d[4] - d[5]);
            if g.norm() > 0.0 {
                g.normalize()
            } else {
                Vec3::z()
            }
        })
        .collect();
    let mut mesh = TriMesh::new(vertices, faces).expect("face indices come from the vertex list");
    mesh.normals = Some(normals);
    Ok(mesh)
}

/// Mesh of a decoded triplane field.
pub fn extract_triplane(lib: &FieldLibrary, z: &Triplane, lod: u32) -> Result<TriMesh, FieldError> {
    let mut field = |pts: &[[f64; 3]]| lib.decode_many(z, pts);
    extract_surface(&mut field, lod).map_err(|e| match e {
        SurfaceError::Field(f) => f,
        SurfaceError::Lod(_) => FieldError::Usage(e.to_string()),
    })
}

/// Mesh of an analytic signed-distance function.
pub fn extract_fn(sdf: impl Fn(&Vec3) -> f64, lod: u32) -> Result<TriMesh, SurfaceError<std::convert::Infallible>> {
    let mut field = |pts: &[[f64; 3]]| -> Result<Vec<f64>, std::convert::Infallible> {
        Ok(pts.iter().map(|p| sdf(&Vec3::new(p[0], p[1], p[2]))).collect())
    };
    extract_surface(&mut field, lod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sphere(r: f64) -> impl Fn(&Vec3) -> f64 {
        move |p: &Vec3| p.norm() - r
    }

    #[test]
    fn sphere_area_volume_and_winding() {
        let r = 0.4;
        let m = extract_fn(sphere(r), 6).unwrap();
        let area = 4.0 * PI * r * r;
        let vol = 4.0 / 3.0 * PI * r.powi(3);
        assert!((m.area() - area).abs() / area < 0.02, "area {}", m.area());
        assert!((m.signed_volume() - vol).abs() / vol < 0.02, "volume {}", m.signed_volume());
        assert!(m.is_watertight());
    }

    #[test]
    fn vertices_near_surface() {
        let lod = 5;
        let m = extract_fn(sphere(0.3), lod).unwrap();
        let bound = 3f64.sqrt() / (1 << lod) as f64;
        assert!(m.vertices.iter().all(|v| (v.norm() - 0.3).abs() < bound));
        let normals = m.normals.as_ref().unwrap();
        for (v, n) in m.vertices.iter().zip(normals) {
            assert!((v.normalize() - n).norm() < 1e-6);
        }
    }

    #[test]
    fn constant_fields_give_empty_meshes() {
        assert!(extract_fn(|_| 1.0, 4).unwrap().faces.is_empty());
        assert!(extract_fn(|_| -1.0, 4).unwrap().faces.is_empty());
        assert!(extract_fn(|_| 1.0, 1).is_err());
    }

    #[test]
    fn vertex_count_grows_about_fourfold() {
        let counts: Vec<usize> = (4..=6).map(|l| extract_fn(sphere(0.35), l).unwrap().vertices.len()).collect();
        for w in counts.windows(2) {
            let ratio = w[1] as f64 / w[0] as f64;
            assert!((3.0..5.0).contains(&ratio), "{counts:?}");
        }
    }

    #[test]
    fn surface_on_cube_boundary_stays_in_domain() {
        let mut field = |pts: &[[f64; 3]]| -> Result<Vec<f64>, String> {
            pts.iter()
                .map(|p| {
                    if p.iter().any(|c| c.abs() > 0.5) {
                        Err(format!("probe outside the cube: {p:?}"))
                    } else {
                        Ok(p[0] + 0.25)
                    }
                })
                .collect()
        };
        let m = extract_surface(&mut field, 3).unwrap();
        assert!(!m.faces.is_empty());
    }

    #[test]
    fn deterministic() {
        let a = extract_fn(sphere(0.27), 5).unwrap();
        let b = extract_fn(sphere(0.27), 5).unwrap();
        assert_eq!(a, b);
    }
}
