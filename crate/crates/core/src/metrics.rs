//! Point-cloud metrics: Chamfer-L1, F-score, best-of-N and rotation-aligned
//! Chamfer.
//!
//! "Chamfer-L1" here is the mean un-squared Euclidean nearest-neighbour
//! distance, averaged over both directions.

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim3::{Mat3, Vec3};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("usage error: {0}")]
    Usage(String),
}

fn usage<T>(m: &str) -> Result<T, MetricsError> {
    Err(MetricsError::Usage(m.into()))
}

#[inline]
fn dist(a: &Vec3, b: &Vec3) -> f64 {
    let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Exact nearest-neighbour queries over a fixed point set.
pub struct NnIndex<'a> {
    points: &'a [Vec3],
    tree: ImmutableKdTree<f64, 3>,
}

impl<'a> NnIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Result<Self, MetricsError> {
        if points.is_empty() {
            return usage("empty point set");
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return usage("non-finite point");
        }
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&coords)
            .map_err(|e| MetricsError::Usage(format!("index construction: {e:?}")))?;
        Ok(Self { points, tree })
    }

    /// Distance from `q` to its nearest indexed point.
    pub fn nearest(&self, q: &Vec3) -> f64 {
        let hit = self
            .tree
            .query(&[q.x, q.y, q.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        dist(q, &self.points[hit.item as usize])
    }
}

/// Nearest-neighbour distance from every point of `a` to `b`.
pub fn nn_distances(a: &[Vec3], b: &[Vec3]) -> Result<Vec<f64>, MetricsError> {
    if a.is_empty() {
        return usage("empty point set");
    }
    let idx = NnIndex::new(b)?;
    Ok(a.iter().map(|p| idx.nearest(p)).collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn chamfer_l1(a: &[Vec3], b: &[Vec3]) -> Result<f64, MetricsError> {
    let ab = nn_distances(a, b)?;
    let ba = nn_distances(b, a)?;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

/// Harmonic mean of precision (`a` within `tau` of `b`) and recall.
pub fn fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64, MetricsError> {
    if !(tau > 0.0) {
        return usage("threshold must be positive");
    }
    let frac = |d: &[f64]| d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64;
    let precision = frac(&nn_distances(a, b)?);
    let recall = frac(&nn_distances(b, a)?);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Smallest value and its first index.
pub fn best_of_n(values: &[f64]) -> Result<(f64, usize), MetricsError> {
    if values.is_empty() {
        return usage("no hypotheses");
    }
    let mut best = (values[0], 0);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// Prefix minima: entry `k` is the best of the first `k + 1` values.
pub fn best_of_n_curve(values: &[f64]) -> Vec<f64> {
    let mut cur = f64::INFINITY;
    values
        .iter()
        .map(|&v| {
            cur = cur.min(v);
            cur
        })
        .collect()
}

/// The 24 proper rotations mapping the coordinate axes onto themselves,
/// identity first.
pub fn cube_rotations() -> Vec<Mat3> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for p in perms {
        for signs in 0..8u32 {
            let mut m = Mat3::zeros();
            for (row, &col) in p.iter().enumerate() {
                m[(row, col)] = if signs & (1 << row) != 0 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationSet {
    Identity,
    Cube24,
}

impl RotationSet {
    pub fn rotations(&self) -> Vec<Mat3> {
        match self {
            RotationSet::Identity => vec![Mat3::identity()],
            RotationSet::Cube24 => cube_rotations(),
        }
    }
}

/// `min_r chamfer_l1(r·a, b)` and the index of the minimising rotation.
pub fn aligned_chamfer(a: &[Vec3], b: &[Vec3], rotations: &[Mat3]) -> Result<(f64, usize), MetricsError> {
    if rotations.is_empty() {
        return usage("empty rotation set");
    }
    let mut values = Vec::with_capacity(rotations.len());
    for r in rotations {
        let ra: Vec<Vec3> = a.iter().map(|p| r * p).collect();
        values.push(chamfer_l1(&ra, b)?);
    }
    best_of_n(&values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_points: usize,
    pub f_threshold: f64,
    pub rotation_set: RotationSet,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            n_points: 10_000,
            f_threshold: 0.02,
            rotation_set: RotationSet::Cube24,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.n_points == 0 {
            return usage("n_points must be positive");
        }
        if !(self.f_threshold > 0.0) {
            return usage("f_threshold must be positive");
        }
        Ok(())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), MetricsError> {
    if values.is_empty() {
        return usage("nothing to aggregate");
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Ok((m, var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect()
    }

    fn brute_nn(q: &Vec3, b: &[Vec3]) -> f64 {
        let mut best = f64::INFINITY;
        for p in b {
            let d = ((q.x - p.x).powi(2) + (q.y - p.y).powi(2) + (q.z - p.z).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
        best
    }

    #[test]
    fn closed_forms() {
        let a = [Vec3::zeros()];
        let b = [Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_l1(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(fscore(&a, &a, 0.1).unwrap(), 1.0);
        assert_eq!(fscore(&a, &b, 0.5).unwrap(), 0.0);
        assert!(chamfer_l1(&[], &b).is_err());
    }

    #[test]
    fn half_precision_full_recall() {
        let a = [Vec3::zeros(), Vec3::new(5.0, 0.0, 0.0)];
        let b = [Vec3::new(0.01, 0.0, 0.0)];
        let f = fscore(&a, &b, 0.1).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn index_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1usize, 7, 50, 400] {
            let a = cloud(n, &mut rng);
            let mut b = cloud(n + 3, &mut rng);
            b.iter_mut().for_each(|p| p.x *= 0.1);
            let got = nn_distances(&a, &b).unwrap();
            for (q, d) in a.iter().zip(got) {
                assert_eq!(d, brute_nn(q, &b));
            }
        }
    }

    #[test]
    fn cube_group() {
        let rs = cube_rotations();
        assert_eq!(rs.len(), 24);
        assert_eq!(rs[0], Mat3::identity());
        for r in &rs {
            assert!((r.transpose() * r - Mat3::identity()).norm() == 0.0);
            for s in &rs {
                assert!(rs.contains(&(r * s)));
            }
        }
    }

    #[test]
    fn aligned_chamfer_finds_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = cloud(60, &mut rng);
        let rs = cube_rotations();
        let a: Vec<Vec3> = b.iter().map(|p| rs[7].transpose() * p).collect();
        let (v, i) = aligned_chamfer(&a, &b, &rs).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(i, 7);
        let plain = chamfer_l1(&a, &b).unwrap();
        assert_eq!(aligned_chamfer(&a, &b, &[Mat3::identity()]).unwrap().0, plain);
    }

    #[test]
    fn best_of_n_rules() {
        assert_eq!(best_of_n(&[0.3]).unwrap(), (0.3, 0));
        assert_eq!(best_of_n(&[0.3, 0.1, 0.1]).unwrap(), (0.1, 1));
        assert_eq!(best_of_n_curve(&[0.3, 0.4, 0.1, 0.2]), vec![0.3, 0.3, 0.1, 0.1]);
        assert!(best_of_n(&[]).is_err());
    }

    #[test]
    fn aggregation() {
        let (m, s) = mean_std(&[1.0, 3.0]).unwrap();
        assert_eq!((m, s), (2.0, 1.0));
    }
}
