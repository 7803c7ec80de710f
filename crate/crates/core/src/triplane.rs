//! Triplanar latent SDF representation: bilinear plane sampling, decoding,
//! fitting, per-channel normalisation and image layout.
//!
//! A triplane of level of detail `p` holds three `2^p × 2^p × n` feature
//! planes, ordered XY, XZ, YZ. Plane rows follow the first named axis and
//! columns the second. Cell `i` along an axis is centred at
//! `(i + 0.5) / 2^p − 0.5`; queries between the outermost centre and the cube
//! face clamp to the border cells.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{ByteReader, ByteWriter, DecodeError};
use crate::nn::{adam_step, AdamState, GatherStencil, Graph, Mlp, NnError, Parameterized, Tensor, TrainConfig, Var};

/// Target per-channel standard deviation before diffusion.
pub const NORMALIZED_STD: f64 = 0.2;
/// Channels with a reference deviation below this are left unscaled.
pub const MIN_REFERENCE_STD: f64 = 1e-8;

const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("point {0:?} lies outside the unit cube")]
    Domain([f64; 3]),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("non-finite fitting loss at step {0}")]
    Divergence(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplane {
    lod: u32,
    latent_dim: usize,
    /// `[3, 2^p, 2^p, n]`.
    planes: Tensor,
}

impl Triplane {
    pub fn zeros(lod: u32, latent_dim: usize) -> Self {
        let r = 1usize << lod;
        Self {
            lod,
            latent_dim,
            planes: Tensor::zeros(&[3, r, r, latent_dim]),
        }
    }

    pub fn from_planes(planes: Tensor) -> Result<Self, FieldError> {
        let s = planes.shape();
        if s.len() != 4 || s[0] != 3 || s[1] != s[2] || !s[1].is_power_of_two() || s[1] < 2 {
            return Err(FieldError::Usage(format!("triplane planes must be [3, 2^p, 2^p, n], got {s:?}")));
        }
        Ok(Self {
            lod: s[1].trailing_zeros(),
            latent_dim: s[3],
            planes,
        })
    }

    pub fn random<R: Rng + ?Sized>(lod: u32, latent_dim: usize, std: f64, rng: &mut R) -> Self {
        let r = 1usize << lod;
        Self {
            lod,
            latent_dim,
            planes: Tensor::randn(&[3, r, r, latent_dim], std, rng),
        }
    }

    pub fn lod(&self) -> u32 {
        self.lod
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn resolution(&self) -> usize {
        1 << self.lod
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    pub fn planes_mut(&mut self) -> &mut Tensor {
        &mut self.planes
    }

    /// Feature `channel` of `plane` at grid node `(row, col)`.
    pub fn node(&self, plane: usize, row: usize, col: usize) -> &[f64] {
        let (r, n) = (self.resolution(), self.latent_dim);
        let off = ((plane * r + row) * r + col) * n;
        &self.planes.data()[off..off + n]
    }

    /// Latent of length `3n`: per-plane bilinear samples, concatenated XY, XZ, YZ.
    pub fn interpolate(&self, point: [f64; 3]) -> Result<Vec<f64>, FieldError> {
        check_domain(point)?;
        let n = self.latent_dim;
        let data = self.planes.data();
        let mut out = vec![0.0; 3 * n];
        for (plane, taps) in plane_taps(point, self.resolution(), n).iter().enumerate() {
            let slot = &mut out[plane * n..(plane + 1) * n];
            for &(off, w) in taps {
                for (o, v) in slot.iter_mut().zip(&data[off..off + n]) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Rearranges the planes into a `2^p × 2^p × 3n` channel-last image with
    /// channels ordered XY, XZ, YZ.
    pub fn to_image_layout(&self) -> Tensor {
        let (r, n) = (self.resolution(), self.latent_dim);
        let src = self.planes.data();
        let mut out = vec![0.0; r * r * 3 * n];
        for plane in 0..3 {
            for i in 0..r {
                for j in 0..r {
                    let s = ((plane * r + i) * r + j) * n;
                    let d = (i * r + j) * 3 * n + plane * n;
                    out[d..d + n].copy_from_slice(&src[s..s + n]);
                }
            }
        }
        Tensor::new(&[r, r, 3 * n], out).expect("consistent layout")
    }

    pub fn from_image_layout(image: &Tensor) -> Result<Self, FieldError> {
        let s = image.shape();
        if s.len() != 3 || s[0] != s[1] || s[2] % 3 != 0 || !s[0].is_power_of_two() || s[0] < 2 {
            return Err(FieldError::Usage(format!("image layout must be [2^p, 2^p, 3n], got {s:?}")));
        }
        let (r, n) = (s[0], s[2] / 3);
        let src = image.data();
        let mut planes = vec![0.0; 3 * r * r * n];
        for plane in 0..3 {
            for i in 0..r {
                for j in 0..r {
                    let d = ((plane * r + i) * r + j) * n;
                    let so = (i * r + j) * 3 * n + plane * n;
                    planes[d..d + n].copy_from_slice(&src[so..so + n]);
                }
            }
        }
        Self::from_planes(Tensor::new(&[3, r, r, n], planes)?)
    }

    /// Anisotropic total variation summed over the three planes.
    pub fn total_variation(&self) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(self.planes.clone());
        let tv = g.total_variation(v).expect("rank-4 planes");
        g.value(tv).data()[0]
    }

    /// Scales each image-layout channel by `0.2 / ref_std[c]` and clips to [−1, 1].
    pub fn normalize(&self, ref_std: &[f64]) -> Result<Self, FieldError> {
        self.map_channels(ref_std, |v, s| (v * (NORMALIZED_STD / s)).clamp(-1.0, 1.0))
    }

    /// Undoes the scaling of [`Triplane::normalize`]; clipped values stay clipped.
    pub fn denormalize(&self, ref_std: &[f64]) -> Result<Self, FieldError> {
        self.map_channels(ref_std, |v, s| v * (s / NORMALIZED_STD))
    }

    fn map_channels(&self, ref_std: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<Self, FieldError> {
        let n = self.latent_dim;
        if ref_std.len() != 3 * n {
            return Err(FieldError::Usage(format!(
                "need {} reference deviations, got {}",
                3 * n,
                ref_std.len()
            )));
        }
        let mut out = self.clone();
        let r = self.resolution();
        for (idx, v) in out.planes.data_mut().iter_mut().enumerate() {
            let plane = idx / (r * r * n);
            let c = plane * n + idx % n;
            let s = if ref_std[c] >= MIN_REFERENCE_STD { ref_std[c] } else { NORMALIZED_STD };
            *v = f(*v, s);
        }
        Ok(out)
    }
}

/// Per image-layout channel standard deviation over a set of triplanes.
pub fn reference_std(triplanes: &[Triplane]) -> Result<Vec<f64>, FieldError> {
    let first = triplanes
        .first()
        .ok_or_else(|| FieldError::Usage("no triplanes to compute statistics over".into()))?;
    let channels = 3 * first.latent_dim;
    let mut sum = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    let mut count = 0usize;
    for z in triplanes {
        if z.lod != first.lod || z.latent_dim != first.latent_dim {
            return Err(FieldError::Usage("triplanes of mixed shapes".into()));
        }
        let img = z.to_image_layout();
        for px in img.data().chunks(channels) {
            for (c, &v) in px.iter().enumerate() {
                sum[c] += v;
                sq[c] += v * v;
            }
            count += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let mean = s / count as f64;
            (q / count as f64 - mean * mean).max(0.0).sqrt()
        })
        .collect())
}

fn check_domain(p: [f64; 3]) -> Result<(), FieldError> {
    if p.iter().all(|c| c.is_finite() && c.abs() <= 0.5 + DOMAIN_SLACK) {
        Ok(())
    } else {
        Err(FieldError::Domain(p))
    }
}

fn axis_taps(a: f64, r: usize) -> (usize, f64) {
    let u = ((a + 0.5) * r as f64 - 0.5).clamp(0.0, (r - 1) as f64);
    let i0 = (u.floor() as usize).min(r - 2);
    (i0, u - i0 as f64)
}

/// Bilinear taps `(flat offset, weight)` of one point in each of the three planes.
fn plane_taps(p: [f64; 3], r: usize, n: usize) -> [[(usize, f64); 4]; 3] {
    let axes = [(0, 1), (0, 2), (1, 2)];
    let mut out = [[(0, 0.0); 4]; 3];
    for (plane, &(ra, ca)) in axes.iter().enumerate() {
        let (i0, fi) = axis_taps(p[ra], r);
        let (j0, fj) = axis_taps(p[ca], r);
        let off = |i: usize, j: usize| ((plane * r + i) * r + j) * n;
        out[plane] = [
            (off(i0, j0), (1.0 - fi) * (1.0 - fj)),
            (off(i0, j0 + 1), (1.0 - fi) * fj),
            (off(i0 + 1, j0), fi * (1.0 - fj)),
            (off(i0 + 1, j0 + 1), fi * fj),
        ];
    }
    out
}

/// Gather stencil sampling `points` from a `[3, r, r, n]` plane tensor.
pub fn sample_stencil(points: &[[f64; 3]], lod: u32, latent_dim: usize) -> Result<GatherStencil, FieldError> {
    let r = 1usize << lod;
    let mut taps = Vec::with_capacity(points.len() * 3);
    for &p in points {
        check_domain(p)?;
        taps.extend(plane_taps(p, r, latent_dim));
    }
    Ok(GatherStencil {
        rows: points.len(),
        groups: 3,
        channels: latent_dim,
        taps,
    })
}

/// Signed-distance supervision for one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfSampleSet {
    pub points: Vec<[f64; 3]>,
    pub distances: Vec<f64>,
}

impl SdfSampleSet {
    pub fn new(points: Vec<[f64; 3]>, distances: Vec<f64>) -> Result<Self, FieldError> {
        let s = Self { points, distances };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.points.len() != self.distances.len() {
            return Err(FieldError::Usage("points and distances differ in length".into()));
        }
        for &p in &self.points {
            check_domain(p)?;
        }
        if self.distances.iter().any(|d| !d.is_finite()) {
            return Err(FieldError::Usage("non-finite distance".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::with_magic(b"SDS1");
        w.u32(self.points.len() as u32);
        w.f32s(self.points.iter().flatten().copied());
        w.f32s(self.distances.iter().copied());
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FieldError> {
        let mut r = ByteReader::with_magic(bytes, b"SDS1")?;
        let m = r.u32()? as usize;
        let coords = r.f32s(3 * m)?;
        let distances = r.f32s(m)?;
        r.finish()?;
        let points = coords.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        // f32 rounding can push a coordinate a hair past the face.
        let s = Self { points, distances };
        s.validate()?;
        Ok(s)
    }
}

/// Shared decoder plus one triplane per object.
#[derive(Debug, Clone)]
pub struct FieldLibrary {
    pub triplanes: Vec<Triplane>,
    pub decoder: Mlp,
    /// Loss of the final optimisation step.
    pub final_loss: f64,
}

impl FieldLibrary {
    pub fn new(triplanes: Vec<Triplane>, decoder: Mlp) -> Result<Self, FieldError> {
        for z in &triplanes {
            if decoder.input_width() != 3 * z.latent_dim() {
                return Err(FieldError::Usage(format!(
                    "decoder input width {} does not match 3n = {}",
                    decoder.input_width(),
                    3 * z.latent_dim()
                )));
            }
        }
        if decoder.output_width() != 1 {
            return Err(FieldError::Usage("decoder must output one distance".into()));
        }
        Ok(Self {
            triplanes,
            decoder,
            final_loss: f64::NAN,
        })
    }

    pub fn decode_sdf(&self, z: &Triplane, point: [f64; 3]) -> Result<f64, FieldError> {
        decode_sdf(&self.decoder, z, point)
    }

    /// Batched decoding of many points.
    pub fn decode_many(&self, z: &Triplane, points: &[[f64; 3]]) -> Result<Vec<f64>, FieldError> {
        decode_many(&self.decoder, z, points)
    }
}

pub fn decode_sdf(decoder: &Mlp, z: &Triplane, point: [f64; 3]) -> Result<f64, FieldError> {
    let latent = z.interpolate(point)?;
    Ok(decoder.forward(&latent)?[0])
}

pub fn decode_many(decoder: &Mlp, z: &Triplane, points: &[[f64; 3]]) -> Result<Vec<f64>, FieldError> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let mut latents = Vec::with_capacity(points.len() * 3 * z.latent_dim());
    for &p in points {
        latents.extend(z.interpolate(p)?);
    }
    let x = Tensor::new(&[points.len(), 3 * z.latent_dim()], latents)?;
    Ok(decoder.forward_batch(&x)?.into_data())
}

/// Settings for jointly optimising triplanes and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub lod: u32,
    pub latent_dim: usize,
    /// Decoder hidden widths; input `3n` and output 1 are implied.
    pub hidden: Vec<usize>,
    pub alpha_tv: f64,
    /// Per-step schedule; `batch_size` is the number of supervision points
    /// drawn per object for every step.
    pub train: TrainConfig,
    pub init_std: f64,
}

impl FitConfig {
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![3 * self.latent_dim];
        w.extend(&self.hidden);
        w.push(1);
        w
    }
}

/// Progress of a fit, one entry per optimisation step.
#[derive(Debug, Clone, Default)]
pub struct FitHistory {
    /// Value of the objective on that step's subsample.
    pub loss: Vec<f64>,
    /// Mean absolute distance error over that step's subsample.
    pub mean_abs_error: Vec<f64>,
}

/// Optimisation steps per reporting epoch.
pub const STEPS_PER_EPOCH: usize = 50;

impl FitHistory {
    /// Mean step loss over consecutive blocks of `steps_per_epoch` steps; a
    /// trailing partial block is dropped.
    pub fn epoch_losses(&self, steps_per_epoch: usize) -> Vec<f64> {
        self.loss
            .chunks_exact(steps_per_epoch.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// One subsampled batch of supervision for one object.
pub struct ObjectBatch {
    pub stencil: Rc<GatherStencil>,
    pub targets: Tensor,
}

impl ObjectBatch {
    pub fn new(points: &[[f64; 3]], distances: &[f64], lod: u32, latent_dim: usize) -> Result<Self, FieldError> {
        Ok(Self {
            stencil: Rc::new(sample_stencil(points, lod, latent_dim)?),
            targets: Tensor::new(&[distances.len(), 1], distances.to_vec())?,
        })
    }
}

/// Records the fitting objective
/// `Σ_i Σ_j |ξ(ω(s_j, z_i)) − d_j| + α_TV Σ_i TV(z_i)` on `g`.
///
/// Returns the loss and the summed absolute error.
pub fn record_fit_loss(
    g: &mut Graph,
    decoder: &Mlp,
    decoder_params: &[Var],
    planes: &[Var],
    batches: &[ObjectBatch],
    alpha_tv: f64,
) -> Result<(Var, f64), FieldError> {
    if planes.len() != batches.len() {
        return Err(FieldError::Usage("one batch per triplane required".into()));
    }
    let mut total: Option<Var> = None;
    let mut abs_sum = 0.0;
    for (&z, batch) in planes.iter().zip(batches) {
        let latent = g.gather(z, batch.stencil.clone())?;
        let pred = decoder.build(g, decoder_params, latent)?;
        let target = g.constant(batch.targets.clone());
        let diff = g.sub(pred, target)?;
        let a = g.abs(diff);
        let l1 = g.sum(a);
        abs_sum += g.value(l1).data()[0];
        let tv = g.total_variation(z)?;
        let tv = g.scale(tv, alpha_tv);
        let obj = g.add(l1, tv)?;
        total = Some(match total {
            Some(t) => g.add(t, obj)?,
            None => obj,
        });
    }
    let loss = total.ok_or_else(|| FieldError::Usage("no objects".into()))?;
    Ok((loss, abs_sum))
}

/// Jointly optimises one triplane per object and a shared decoder.
pub struct TriplaneFitter {
    pub cfg: FitConfig,
    pub triplanes: Vec<Triplane>,
    pub decoder: Mlp,
    pub adam: AdamState,
    pub step: usize,
    pub history: FitHistory,
}

impl TriplaneFitter {
    pub fn new(num_objects: usize, cfg: FitConfig) -> Result<Self, FieldError> {
        if num_objects == 0 {
            return Err(FieldError::Usage("at least one object is required".into()));
        }
        cfg.train.validate()?;
        if cfg.lod < 1 {
            return Err(FieldError::Usage("triplane level of detail must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let triplanes: Vec<Triplane> = (0..num_objects)
            .map(|_| Triplane::random(cfg.lod, cfg.latent_dim, cfg.init_std, &mut rng))
            .collect();
        let decoder = Mlp::new(&cfg.decoder_widths(), &mut rng)?;
        let mut fitter = Self {
            cfg,
            triplanes,
            decoder,
            adam: AdamState { m: vec![], v: vec![], t: 0 },
            step: 0,
            history: FitHistory::default(),
        };
        fitter.adam = AdamState::new(&fitter.parameters());
        Ok(fitter)
    }

    /// Parameters in optimiser order: every triplane, then the decoder.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.triplanes.iter().map(|z| z.planes()).collect();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.triplanes.iter_mut().map(|z| z.planes_mut()).collect();
        p.extend(self.decoder.parameters_mut());
        p
    }

    /// RNG for a given step; depends only on the seed and step index.
    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.train.seed ^ 0x5eed_f17e);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Runs one optimisation step and returns its loss.
    pub fn step(&mut self, samples: &[SdfSampleSet]) -> Result<f64, FieldError> {
        if samples.len() != self.triplanes.len() {
            return Err(FieldError::Usage("one sample set per triplane required".into()));
        }
        let step = self.step + 1;
        let mut rng = self.step_rng(step);
        let mut batches = Vec::with_capacity(samples.len());
        let mut count = 0;
        for s in samples {
            if s.is_empty() {
                return Err(FieldError::Usage("empty sample set".into()));
            }
            let k = self.cfg.train.batch_size.min(s.len());
            let idx = sample(&mut rng, s.len(), k).into_vec();
            let pts: Vec<[f64; 3]> = idx.iter().map(|&i| s.points[i]).collect();
            let ds: Vec<f64> = idx.iter().map(|&i| s.distances[i]).collect();
            count += k;
            batches.push(ObjectBatch::new(&pts, &ds, self.cfg.lod, self.cfg.latent_dim)?);
        }
        let mut g = Graph::new();
        let planes: Vec<Var> = self.triplanes.iter().map(|z| g.param(z.planes().clone())).collect();
        let dec_params = self.decoder.register(&mut g);
        let (loss, abs_sum) = record_fit_loss(&mut g, &self.decoder, &dec_params, &planes, &batches, self.cfg.alpha_tv)?;
        let loss_value = g.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(FieldError::Divergence(step));
        }
        let grads = g.backward(loss)?;
        let handles: Vec<Var> = planes.iter().chain(&dec_params).copied().collect();
        let grad_list: Vec<Tensor> = handles
            .iter()
            .zip(self.parameters())
            .map(|(&v, p)| grads.get_or_zeros(v, p))
            .collect();
        let cfg = self.cfg.train.clone();
        let mut adam = std::mem::replace(&mut self.adam, AdamState { m: vec![], v: vec![], t: 0 });
        adam_step(&mut self.parameters_mut(), &grad_list, &mut adam, step, &cfg)?;
        self.adam = adam;
        self.step = step;
        self.history.loss.push(loss_value);
        self.history.mean_abs_error.push(abs_sum / count as f64);
        Ok(loss_value)
    }

    /// Runs until `cfg.train.total_steps`.
    pub fn run(&mut self, samples: &[SdfSampleSet]) -> Result<(), FieldError> {
        while self.step < self.cfg.train.total_steps {
            self.step(samples)?;
        }
        Ok(())
    }

    pub fn library(&self) -> Result<FieldLibrary, FieldError> {
        let mut lib = FieldLibrary::new(self.triplanes.clone(), self.decoder.clone())?;
        lib.final_loss = self.history.loss.last().copied().unwrap_or(f64::NAN);
        Ok(lib)
    }
}

/// Fits a [`FieldLibrary`] to per-object supervision.
pub fn fit_triplanes(samples: &[SdfSampleSet], cfg: &FitConfig) -> Result<(FieldLibrary, FitHistory), FieldError> {
    if samples.is_empty() || samples.iter().any(|s| s.is_empty()) {
        return Err(FieldError::Usage("fitting needs at least one non-empty sample set".into()));
    }
    let mut fitter = TriplaneFitter::new(samples.len(), cfg.clone())?;
    fitter.run(samples)?;
    Ok((fitter.library()?, fitter.history))
}

/// `TPL1` triplane file: magic, `u32` p, `u32` n, `3n` `f32` reference
/// deviations, then the `[3, 2^p, 2^p, n]` planes as `f32` LE.
pub fn encode_triplane(z: &Triplane, ref_std: &[f64]) -> Result<Vec<u8>, FieldError> {
    if ref_std.len() != 3 * z.latent_dim {
        return Err(FieldError::Usage("reference deviations must have 3n entries".into()));
    }
    let mut w = ByteWriter::with_magic(b"TPL1");
    w.u32(z.lod).u32(z.latent_dim as u32);
    w.f32s(ref_std.iter().copied());
    w.f32s(z.planes.data().iter().copied());
    Ok(w.finish())
}

pub fn decode_triplane(bytes: &[u8]) -> Result<(Triplane, Vec<f64>), FieldError> {
    let mut r = ByteReader::with_magic(bytes, b"TPL1")?;
    let lod = r.u32()?;
    let n = r.u32()? as usize;
    if !(1..=10).contains(&lod) || n == 0 || n > 4096 {
        return Err(FieldError::Usage(format!("implausible triplane header p={lod} n={n}")));
    }
    let ref_std = r.f32s(3 * n)?;
    let res = 1usize << lod;
    let planes = Tensor::new(&[3, res, res, n], r.f32s(3 * res * res * n)?)?;
    r.finish()?;
    Ok((Triplane::from_planes(planes)?, ref_std))
}
