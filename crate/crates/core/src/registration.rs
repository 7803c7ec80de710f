//! Similarity registration of NORF coordinates against back-projected depth:
//! closed-form least squares, RANSAC and hypothesis selection.

use nalgebra::SVD;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, NorfMap};
use crate::sim3::{Mat3, Sim3Record, Sim3Transform, Vec3};

/// Relative singular-value floor below which a configuration counts as rank deficient.
const RANK_TOL: f64 = 1e-10;
pub const DEFAULT_ITERATIONS: usize = 512;
/// Default inlier threshold as a fraction of the observed object's diameter.
pub const DEFAULT_THRESHOLD_FRACTION: f64 = 0.02;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFew(usize),
    #[error("degenerate configuration (rank {0})")]
    Rank(usize),
    #[error("registration failed: no model with at least 3 inliers")]
    Failed,
    #[error("usage error: {0}")]
    Usage(String),
}

/// Paired NORF and scene points.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub norf: Vec<Vec3>,
    pub scene: Vec<Vec3>,
    /// Source pixel of each pair.
    pub pixels: Vec<usize>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.norf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norf.is_empty()
    }

    /// Bounding-box diagonal of the scene points.
    pub fn scene_diameter(&self) -> f64 {
        if self.scene.is_empty() {
            return 0.0;
        }
        let mut lo = self.scene[0];
        let mut hi = self.scene[0];
        for p in &self.scene {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }
}

/// Camera-frame points of masked pixels with positive depth.
#[derive(Debug, Clone, PartialEq)]
pub struct BackProjection {
    pub points: Vec<Vec3>,
    pub pixels: Vec<usize>,
    /// Masked pixels skipped for nonpositive or non-finite depth.
    pub skipped: usize,
}

pub fn back_project(depth: &[f64], mask: &[bool], cam: &Camera) -> Result<BackProjection, RegistrationError> {
    let n = cam.size * cam.size;
    if depth.len() != n || mask.len() != n {
        return Err(RegistrationError::Usage(format!("depth and mask must have {n} pixels")));
    }
    let mut out = BackProjection {
        points: Vec::new(),
        pixels: Vec::new(),
        skipped: 0,
    };
    for px in 0..n {
        if !mask[px] {
            continue;
        }
        let z = depth[px];
        if !(z > 0.0 && z.is_finite()) {
            out.skipped += 1;
            continue;
        }
        let (row, col) = (px / cam.size, px % cam.size);
        out.points.push(cam.back_project(col as f64 + 0.5, row as f64 + 0.5, z));
        out.pixels.push(px);
    }
    Ok(out)
}

/// Pairs predicted NORF coordinates with back-projected depth wherever both
/// the prediction and the depth mask cover a pixel.
pub fn correspondences(
    map: &NorfMap,
    depth: &[f64],
    depth_mask: &[bool],
    cam: &Camera,
) -> Result<(CorrespondenceSet, usize), RegistrationError> {
    if map.size != cam.size {
        return Err(RegistrationError::Usage("map and camera sizes differ".into()));
    }
    let both: Vec<bool> = map.mask.iter().zip(depth_mask).map(|(a, b)| *a && *b).collect();
    let bp = back_project(depth, &both, cam)?;
    let set = CorrespondenceSet {
        norf: bp.pixels.iter().map(|&px| map.coord(px)).collect(),
        scene: bp.points,
        pixels: bp.pixels,
    };
    Ok((set, bp.skipped))
}

/// Least-squares similarity `dst ≈ s·R·src + t` with reflections excluded.
///
/// The pairs are processed in a canonical order, so the result does not
/// depend on how they are listed.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<Sim3Transform, RegistrationError> {
    if src.len() != dst.len() {
        return Err(RegistrationError::Usage("point sets differ in length".into()));
    }
    let n = src.len();
    if n < 3 {
        return Err(RegistrationError::TooFew(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| [src[i].x, src[i].y, src[i].z, dst[i].x, dst[i].y, dst[i].z];
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let inv = 1.0 / n as f64;
    let mu_s = order.iter().fold(Vec3::zeros(), |acc, &i| acc + src[i]) * inv;
    let mu_d = order.iter().fold(Vec3::zeros(), |acc, &i| acc + dst[i]) * inv;
    let mut cov = Mat3::zeros();
    let mut var_s = 0.0;
    for &i in &order {
        let a = src[i] - mu_s;
        let b = dst[i] - mu_d;
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov *= inv;
    var_s *= inv;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let d = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    let top = d[idx[0]];
    let rank = idx.iter().filter(|&&i| d[i] > RANK_TOL * top.max(f64::MIN_POSITIVE)).count();
    if !(var_s > 0.0) || top <= 0.0 || rank < 2 {
        return Err(RegistrationError::Rank(rank));
    }
    let mut s = Mat3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(idx[2], idx[2])] = -1.0;
    }
    let rotation = u * s * vt;
    let trace: f64 = (0..3).map(|i| d[i] * s[(i, i)]).sum();
    let scale = trace / var_s;
    if !(scale > 0.0) {
        return Err(RegistrationError::Rank(rank));
    }
    let translation = mu_d - scale * (rotation * mu_s);
    Ok(Sim3Transform::new(rotation, translation, scale))
}

/// Inlier statistics of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierSet {
    pub indices: Vec<usize>,
    pub mean_residual: f64,
}

impl InlierSet {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

pub fn inliers(t: &Sim3Transform, corr: &CorrespondenceSet, threshold: f64) -> InlierSet {
    let mut indices = Vec::new();
    let mut sum = 0.0;
    for (i, (p, q)) in corr.norf.iter().zip(&corr.scene).enumerate() {
        let r = (t.apply(p) - q).norm();
        if r < threshold {
            indices.push(i);
            sum += r;
        }
    }
    let mean_residual = if indices.is_empty() { f64::INFINITY } else { sum / indices.len() as f64 };
    InlierSet { indices, mean_residual }
}

/// More inliers wins; equal counts prefer the lower mean residual.
fn better(a: &InlierSet, b: &InlierSet) -> bool {
    a.count() > b.count() || (a.count() == b.count() && a.mean_residual < b.mean_residual)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub transform: Sim3Transform,
    pub inliers: InlierSet,
}

/// Samples for iteration `i` depend only on `(seed, i)`.
fn iteration_sample(seed: u64, iter: usize, n: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64 + 1);
    let v = sample(&mut rng, n, 3).into_vec();
    [v[0], v[1], v[2]]
}

/// RANSAC over minimal 3-point samples followed by a refit on the inliers.
pub fn ransac_register(corr: &CorrespondenceSet, cfg: &RansacConfig) -> Result<RansacResult, RegistrationError> {
    let n = corr.len();
    if corr.scene.len() != n {
        return Err(RegistrationError::Usage("correspondence lists differ in length".into()));
    }
    if n < 3 {
        return Err(RegistrationError::TooFew(n));
    }
    if !(cfg.threshold > 0.0) || cfg.iterations == 0 {
        return Err(RegistrationError::Usage("threshold and iterations must be positive".into()));
    }
    let mut best: Option<(Sim3Transform, InlierSet)> = None;
    for it in 0..cfg.iterations {
        let idx = iteration_sample(cfg.seed, it, n);
        let src: Vec<Vec3> = idx.iter().map(|&i| corr.norf[i]).collect();
        let dst: Vec<Vec3> = idx.iter().map(|&i| corr.scene[i]).collect();
        let Ok(model) = umeyama(&src, &dst) else { continue };
        let set = inliers(&model, corr, cfg.threshold);
        if best.as_ref().is_none_or(|(_, b)| better(&set, b)) {
            best = Some((model, set));
        }
    }
    let (mut transform, mut set) = best.ok_or(RegistrationError::Failed)?;
    if set.count() < 3 {
        return Err(RegistrationError::Failed);
    }
    let src: Vec<Vec3> = set.indices.iter().map(|&i| corr.norf[i]).collect();
    let dst: Vec<Vec3> = set.indices.iter().map(|&i| corr.scene[i]).collect();
    if let Ok(refit) = umeyama(&src, &dst) {
        let refit_set = inliers(&refit, corr, cfg.threshold);
        if refit_set.count() >= set.count() {
            transform = refit;
            set = refit_set;
        }
    }
    Ok(RansacResult { transform, inliers: set })
}

/// Registration outcome of one hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypothesisScore {
    pub inlier_count: usize,
    pub mean_residual: f64,
}

/// Most inliers; ties go to the lower mean residual, then the lower index.
pub fn select_hypothesis(scores: &[HypothesisScore]) -> Result<usize, RegistrationError> {
    if scores.is_empty() {
        return Err(RegistrationError::Usage("no hypotheses to select from".into()));
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        let b = &scores[best];
        let res = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
        if s.inlier_count > b.inlier_count
            || (s.inlier_count == b.inlier_count && res(s.mean_residual) < res(b.mean_residual))
        {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub transform: Sim3Record,
    pub inlier_count: usize,
    pub mean_residual: f64,
    pub threshold: f64,
    pub pairs: usize,
}

impl RegistrationReport {
    pub fn new(result: &RansacResult, threshold: f64, pairs: usize) -> Self {
        Self {
            transform: result.transform.to_record(),
            inlier_count: result.inliers.count(),
            mean_residual: result.inliers.mean_residual,
            threshold,
            pairs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim3::{random_rotation, rotation_angle_between};
    use rand::Rng;

    fn cloud(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect()
    }

    fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3Transform {
        Sim3Transform::new(
            random_rotation(rng),
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)),
            rng.random_range(0.1..2.0),
        )
    }

    #[test]
    fn identity_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = cloud(20, &mut rng);
        let t = umeyama(&p, &p).unwrap();
        assert!(rotation_angle_between(&t.rotation, &Mat3::identity()) < 1e-9);
        assert!(t.translation.norm() < 1e-12);
        assert!((t.scale - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_known_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let truth = random_sim3(&mut rng);
            let src = cloud(50, &mut rng);
            let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
            let t = umeyama(&src, &dst).unwrap();
            assert!(rotation_angle_between(&t.rotation, &truth.rotation) < 1e-6);
            assert!(((t.scale - truth.scale) / truth.scale).abs() < 1e-9);
            assert!((t.translation - truth.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn planar_points_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_sim3(&mut rng);
        let src: Vec<Vec3> = (0..30)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0))
            .collect();
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p)).collect();
        let t = umeyama(&src, &dst).unwrap();
        assert!(rotation_angle_between(&t.rotation, &truth.rotation) < 1e-6);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn collinear_points_rejected() {
        let src: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5)).collect();
        assert!(matches!(umeyama(&src, &src), Err(RegistrationError::Rank(_))));
        assert!(matches!(umeyama(&src[..2], &src[..2]), Err(RegistrationError::TooFew(2))));
    }

    #[test]
    fn order_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_sim3(&mut rng);
        let src = cloud(40, &mut rng);
        let dst: Vec<Vec3> = src.iter().map(|p| truth.apply(p) + Vec3::new(0.01, -0.02, 0.0) * rng.random::<f64>()).collect();
        let a = umeyama(&src, &dst).unwrap();
        let (mut s2, mut d2) = (src.clone(), dst.clone());
        s2.reverse();
        d2.reverse();
        assert_eq!(umeyama(&s2, &d2).unwrap(), a);
    }

    #[test]
    fn ransac_without_outliers_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_sim3(&mut rng);
        let norf = cloud(100, &mut rng);
        let scene = norf.iter().map(|p| truth.apply(p)).collect();
        let corr = CorrespondenceSet {
            norf,
            scene,
            pixels: (0..100).collect(),
        };
        let cfg = RansacConfig {
            threshold: 1e-3,
            iterations: 64,
            seed: 0,
        };
        let r = ransac_register(&corr, &cfg).unwrap();
        assert_eq!(r.inliers.count(), 100);
    }

    #[test]
    fn all_outliers_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Unrelated clouds: no minimal sample is even self-consistent.
        let norf = cloud(50, &mut rng);
        let scene = cloud(50, &mut rng);
        let corr = CorrespondenceSet {
            norf,
            scene,
            pixels: (0..50).collect(),
        };
        let cfg = RansacConfig {
            threshold: 1e-12,
            iterations: 64,
            seed: 0,
        };
        assert!(matches!(ransac_register(&corr, &cfg), Err(RegistrationError::Failed)));
    }

    #[test]
    fn tie_rules() {
        let s = |c, r| HypothesisScore {
            inlier_count: c,
            mean_residual: r,
        };
        assert_eq!(select_hypothesis(&[s(10, 0.5), s(50, 0.01), s(50, 0.02)]).unwrap(), 1);
        assert_eq!(select_hypothesis(&[s(50, 0.02), s(50, 0.02)]).unwrap(), 0);
        assert_eq!(select_hypothesis(&[s(1, 1.0)]).unwrap(), 0);
        assert!(select_hypothesis(&[]).is_err());
    }

    #[test]
    fn principal_pixel_back_projects_on_axis() {
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, -2.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0), 0.8, 4).unwrap();
        let mut depth = vec![0.0; 16];
        let mut mask = vec![false; 16];
        // Put the principal point on the centre of pixel 10.
        let shifted = Camera { cx: 2.5, cy: 2.5, ..cam };
        depth[10] = 1.5;
        mask[10] = true;
        mask[3] = true;
        let bp = back_project(&depth, &mask, &shifted).unwrap();
        assert_eq!(bp.skipped, 1);
        assert!((bp.points[0] - Vec3::new(0.0, 0.0, 1.5)).norm() < 1e-15);
    }
}
