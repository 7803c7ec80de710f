//! Triangle meshes: distance queries, winding-number inside tests, ray
//! casting, sampling and binary PLY input/output.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rand::Rng;

use super::solid::{slab_range, Aabb};
use super::GeometryError;
use crate::sim3::Vec3;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// Optional per-vertex normals.
    pub normals: Option<Vec<Vec3>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self, GeometryError> {
        let n = vertices.len() as u32;
        if faces.iter().flatten().any(|&i| i >= n) {
            return Err(GeometryError::Invalid("face index out of range".into()));
        }
        if vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::Invalid("non-finite vertex".into()));
        }
        Ok(Self {
            vertices,
            faces,
            normals: None,
        })
    }

    pub fn empty() -> Self {
        Self {
            vertices: vec![],
            faces: vec![],
            normals: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    pub fn bounds(&self) -> Option<Aabb> {
        Aabb::from_points(&self.vertices)
    }

    /// Every directed edge appears once and its reverse appears once.
    pub fn is_watertight(&self) -> bool {
        if self.faces.is_empty() {
            return false;
        }
        let mut edges: HashMap<(u32, u32), u32> = HashMap::new();
        for f in &self.faces {
            for k in 0..3 {
                *edges.entry((f[k], f[(k + 1) % 3])).or_default() += 1;
            }
        }
        edges
            .iter()
            .all(|(&(a, b), &count)| count == 1 && edges.get(&(b, a)) == Some(&1))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Signed enclosed volume; positive for outward-facing counter-clockwise winding.
    pub fn signed_volume(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    pub fn transformed(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().map(&f).collect(),
            faces: self.faces.clone(),
            normals: None,
        }
    }

    pub fn unsigned_distance(&self, p: &Vec3) -> f64 {
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                (closest_point_on_triangle(p, &a, &b, &c) - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Generalised winding number; ≈1 inside a closed outward-oriented mesh, ≈0 outside.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let (a, b, c) = (a - p, b - p, c - p);
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    /// Signed distance: negative where the winding number exceeds one half.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let d = self.unsigned_distance(p);
        if self.winding_number(p) > 0.5 {
            -d
        } else {
            d
        }
    }

    /// Nearest hit of `o + t·d` with `t ≥ t_min`, with the hit face index.
    pub fn ray_hit(&self, o: &Vec3, d: &Vec3, t_min: f64) -> Option<(f64, usize)> {
        let b = self.bounds()?;
        slab_range(o, d, &(b.min - Vec3::repeat(1e-9)), &(b.max + Vec3::repeat(1e-9)))?;
        let mut best: Option<(f64, usize)> = None;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            if let Some(t) = ray_triangle(o, d, &a, &b, &c) {
                if t >= t_min && best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, f));
                }
            }
        }
        best
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a)).normalize()
    }

    /// Area-weighted uniform surface samples.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        if self.faces.is_empty() {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(self.faces.len());
        let mut acc = 0.0;
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            acc += 0.5 * (b - a).cross(&(c - a)).norm();
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let x = rng.random::<f64>() * acc;
                let f = cdf.partition_point(|&c| c < x).min(self.faces.len() - 1);
                let [a, b, c] = self.triangle(f);
                let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                a + u * (b - a) + v * (c - a)
            })
            .collect()
    }

    /// Binary little-endian PLY with optional per-vertex normals.
    pub fn write_ply<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let with_normals = self.normals.as_ref().is_some_and(|n| n.len() == self.vertices.len());
        let mut header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
            self.vertices.len()
        );
        if with_normals {
            header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
        }
        header.push_str(&format!(
            "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
            self.faces.len()
        ));
        let mut buf = header.into_bytes();
        for (i, p) in self.vertices.iter().enumerate() {
            for c in p.iter() {
                buf.extend((*c as f32).to_le_bytes());
            }
            if with_normals {
                for c in self.normals.as_ref().expect("checked")[i].iter() {
                    buf.extend((*c as f32).to_le_bytes());
                }
            }
        }
        for f in &self.faces {
            buf.push(3);
            for &i in f {
                buf.extend((i as i32).to_le_bytes());
            }
        }
        w.write_all(&buf)
    }

    pub fn read_ply<R: Read>(r: R) -> Result<Self, GeometryError> {
        let mut r = std::io::BufReader::new(r);
        let mut nv = None;
        let mut nf = None;
        let mut props = 0usize;
        let mut in_vertex = false;
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(GeometryError::Invalid("truncated PLY header".into()));
            }
            let t: Vec<&str> = line.split_whitespace().collect();
            match t.as_slice() {
                ["end_header"] => break,
                ["format", f, _] if *f != "binary_little_endian" => {
                    return Err(GeometryError::Invalid(format!("unsupported PLY format {f}")))
                }
                ["element", "vertex", n] => {
                    nv = n.parse::<usize>().ok();
                    in_vertex = true;
                }
                ["element", "face", n] => {
                    nf = n.parse::<usize>().ok();
                    in_vertex = false;
                }
                ["property", "float", _] if in_vertex => props += 1,
                ["property", ty, _] if in_vertex => {
                    return Err(GeometryError::Invalid(format!("unsupported vertex property type {ty}")))
                }
                _ => {}
            }
        }
        let (nv, nf) = match (nv, nf) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(GeometryError::Invalid("PLY header lacks element counts".into())),
        };
        if props != 3 && props != 6 {
            return Err(GeometryError::Invalid(format!("expected 3 or 6 vertex properties, got {props}")));
        }
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        let need = nv * props * 4 + nf * 13;
        if body.len() != need {
            return Err(GeometryError::Invalid(format!("PLY body has {} bytes, expected {need}", body.len())));
        }
        let f32_at = |o: usize| f32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as f64;
        let mut vertices = Vec::with_capacity(nv);
        let mut normals = Vec::new();
        for i in 0..nv {
            let o = i * props * 4;
            vertices.push(Vec3::new(f32_at(o), f32_at(o + 4), f32_at(o + 8)));
            if props == 6 {
                normals.push(Vec3::new(f32_at(o + 12), f32_at(o + 16), f32_at(o + 20)));
            }
        }
        let mut faces = Vec::with_capacity(nf);
        for i in 0..nf {
            let o = nv * props * 4 + i * 13;
            if body[o] != 3 {
                return Err(GeometryError::Invalid("only triangle faces are supported".into()));
            }
            let idx = |k: usize| i32::from_le_bytes(body[o + 1 + 4 * k..o + 5 + 4 * k].try_into().expect("4 bytes"));
            let f = [idx(0), idx(1), idx(2)];
            if f.iter().any(|&x| x < 0) {
                return Err(GeometryError::Invalid("negative face index".into()));
            }
            faces.push(f.map(|x| x as u32));
        }
        let mut mesh = Self::new(vertices, faces)?;
        if props == 6 {
            mesh.normals = Some(normals);
        }
        Ok(mesh)
    }
}

/// Möller–Trumbore intersection; returns the ray parameter.
pub fn ray_triangle(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let s = o - a;
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

/// Closest point of triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Subdivided icosahedron projected onto a sphere, outward winding.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vec3::from(*p).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                verts.push((0.5 * (verts[a as usize] + verts[b as usize])).normalize());
                (verts.len() - 1) as u32
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts.into_iter().map(|v| v * radius).collect();
    TriMesh::new(vertices, faces).expect("valid icosphere")
}

/// Closed axis-aligned box mesh with outward winding.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let c = |i: usize| Vec3::new(if i & 1 == 0 { lo.x } else { hi.x }, if i & 2 == 0 { lo.y } else { hi.y }, if i & 4 == 0 { lo.z } else { hi.z });
    let vertices = (0..8).map(c).collect();
    let faces = vec![
        [0, 2, 3],
        [0, 3, 1],
        [4, 5, 7],
        [4, 7, 6],
        [0, 1, 5],
        [0, 5, 4],
        [2, 6, 7],
        [2, 7, 3],
        [0, 4, 6],
        [0, 6, 2],
        [1, 3, 7],
        [1, 7, 5],
    ];
    TriMesh::new(vertices, faces).expect("valid box")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_mesh_is_closed_and_outward() {
        let m = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        assert!(m.is_watertight());
        assert!((m.signed_volume() - 1.0).abs() < 1e-12);
        assert!((m.area() - 6.0).abs() < 1e-12);
        assert!((m.winding_number(&Vec3::zeros()) - 1.0).abs() < 1e-9);
        assert!(m.winding_number(&Vec3::new(2.0, 0.0, 0.0)).abs() < 1e-9);
        assert!((m.signed_distance(&Vec3::new(0.75, 0.0, 0.0)) - 0.25).abs() < 1e-12);
        assert!((m.signed_distance(&Vec3::new(0.1, 0.0, 0.0)) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn open_mesh_is_not_watertight() {
        let mut m = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        m.faces.pop();
        assert!(!m.is_watertight());
    }

    #[test]
    fn closest_point_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert_eq!(closest_point_on_triangle(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c), a);
        assert!((closest_point_on_triangle(&Vec3::new(0.2, 0.2, 5.0), &a, &b, &c) - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-15);
        let e = closest_point_on_triangle(&Vec3::new(0.5, -3.0, 1.0), &a, &b, &c);
        assert!((e - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn closest_point_matches_dense_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tri = [Vec3::new(0.1, 0.0, 0.2), Vec3::new(0.9, 0.3, -0.1), Vec3::new(0.2, 0.8, 0.4)];
        for _ in 0..20 {
            let p = Vec3::new(rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0), rng.random_range(-1.0..1.0));
            let q = closest_point_on_triangle(&p, &tri[0], &tri[1], &tri[2]);
            let mut best = f64::INFINITY;
            let n = 300;
            for i in 0..=n {
                for j in 0..=(n - i) {
                    let (u, v) = (i as f64 / n as f64, j as f64 / n as f64);
                    let s = tri[0] + u * (tri[1] - tri[0]) + v * (tri[2] - tri[0]);
                    best = best.min((s - p).norm());
                }
            }
            assert!((q - p).norm() <= best + 1e-12);
            assert!(best - (q - p).norm() < 5e-3);
        }
    }

    #[test]
    fn ray_hits_box_face() {
        let m = box_mesh(Vec3::repeat(-0.5), Vec3::repeat(0.5));
        let (t, f) = m.ray_hit(&Vec3::new(0.1, 0.2, 3.0), &Vec3::new(0.0, 0.0, -1.0), 0.0).unwrap();
        assert!((t - 2.5).abs() < 1e-12);
        assert!((m.face_normal(f) - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn ply_roundtrip() {
        let mut m = icosphere(0.4, 1);
        m.normals = Some(m.vertices.iter().map(|v| v.normalize()).collect());
        let mut buf = Vec::new();
        m.write_ply(&mut buf).unwrap();
        let back = TriMesh::read_ply(&buf[..]).unwrap();
        assert_eq!(back.faces, m.faces);
        assert_eq!(back.vertices.len(), m.vertices.len());
        assert!(back.normals.is_some());
        for (a, b) in back.vertices.iter().zip(&m.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn surface_samples_lie_on_faces() {
        let m = icosphere(0.4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in m.sample_surface(200, &mut rng) {
            assert!(m.unsigned_distance(&p) < 1e-12);
        }
    }
}
