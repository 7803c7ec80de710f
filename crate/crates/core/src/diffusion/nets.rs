//! Small trainable noise predictors: a perceptron, a plain convolutional
//! stack and a two-scale encoder-decoder with skip connections.
//!
//! States and conditioning are stored channel-last (`[H, W, C]` per item);
//! the graph works channel-first, so inputs are transposed on the way in.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Denoiser, DiffusionError};
use crate::nn::checkpoint::{decode_tensors, encode_tensors};
use crate::nn::{Graph, NnError, Parameterized, Tensor, Var, LEAKY_SLOPE};

/// Width of the sinusoidal time encoding.
pub const TIME_FEATURES: usize = 16;
/// Hidden width of the time-embedding perceptron.
pub const TIME_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Conv,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub arch: Arch,
    /// Spatial side; 1 for the perceptron.
    pub size: usize,
    pub state_channels: usize,
    pub cond_channels: usize,
    /// Hidden widths; for the encoder-decoder, one per resolution level.
    pub widths: Vec<usize>,
    pub time_dim: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let bad = |m: String| Err(DiffusionError::Usage(m));
        if self.state_channels == 0 || self.time_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("degenerate network spec {self:?}"));
        }
        match self.arch {
            Arch::Mlp if self.size != 1 => bad("perceptron denoiser needs size 1".into()),
            Arch::Conv | Arch::Unet if self.size == 0 => bad("spatial size must be positive".into()),
            Arch::Unet if self.size % (1 << (self.widths.len() - 1)) != 0 => bad(format!(
                "size {} not divisible by 2^{}",
                self.size,
                self.widths.len() - 1
            )),
            _ => Ok(()),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.size * self.size * self.state_channels
    }

    pub fn cond_dim(&self) -> usize {
        self.size * self.size * self.cond_channels
    }

    /// `(in, out)` channels of each hidden layer in evaluation order.
    fn layer_channels(&self) -> Vec<(usize, usize)> {
        let input = self.state_channels + self.cond_channels;
        let w = &self.widths;
        match self.arch {
            Arch::Mlp | Arch::Conv => {
                let mut prev = input;
                w.iter()
                    .map(|&c| {
                        let io = (prev, c);
                        prev = c;
                        io
                    })
                    .collect()
            }
            Arch::Unet => {
                let mut out = Vec::new();
                let mut prev = input;
                for &c in w {
                    out.push((prev, c));
                    prev = c;
                }
                for j in (0..w.len() - 1).rev() {
                    out.push((prev + w[j], w[j]));
                    prev = w[j];
                }
                out
            }
        }
    }

    fn last_width(&self) -> usize {
        match self.arch {
            Arch::Unet => self.widths[0],
            _ => *self.widths.last().expect("validated"),
        }
    }

    fn kernel(&self) -> usize {
        if self.arch == Arch::Mlp {
            1
        } else {
            3
        }
    }
}

/// Sinusoidal features of a (possibly fractional) timestep.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let half = TIME_FEATURES / 2;
    let mut f = [0.0; TIME_FEATURES];
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        f[k] = (t * freq).sin();
        f[k + half] = (t * freq).cos();
    }
    f
}

/// `[B, H, W, C]` → `[B, C, H, W]`.
pub fn hwc_to_chw(data: &[f64], batch: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        let base = b * h * w * c;
        for p in 0..h * w {
            for ch in 0..c {
                out[base + ch * h * w + p] = data[base + p * c + ch];
            }
        }
    }
    out
}

/// `[B, C, H, W]` → `[B, H, W, C]`.
pub fn chw_to_hwc(data: &[f64], batch: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * h * w * c];
    for b in 0..batch {
        let base = b * h * w * c;
        for p in 0..h * w {
            for ch in 0..c {
                out[base + p * c + ch] = data[base + ch * h * w + p];
            }
        }
    }
    out
}

/// Time-conditioned noise predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    spec: NetSpec,
    params: Vec<Tensor>,
}

impl DenoiserNet {
    /// He-style initialisation with a zero output layer.
    pub fn new<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self, DiffusionError> {
        let mut net = Self::zeros(spec)?;
        let k = net.spec.kernel();
        let td = net.spec.time_dim;
        let layers = net.spec.layer_channels();
        let mut i = 0;
        for fan_in in [TIME_FEATURES, TIME_HIDDEN] {
            let shape = net.params[i].shape().to_vec();
            net.params[i] = Tensor::randn(&shape, (2.0 / fan_in as f64).sqrt(), rng);
            i += 2;
        }
        for (cin, _) in layers {
            let shape = net.params[i].shape().to_vec();
            net.params[i] = Tensor::randn(&shape, (2.0 / (cin * k * k) as f64).sqrt(), rng);
            let shape = net.params[i + 2].shape().to_vec();
            net.params[i + 2] = Tensor::randn(&shape, (1.0 / td as f64).sqrt(), rng);
            i += 3;
        }
        Ok(net)
    }

    pub fn zeros(spec: NetSpec) -> Result<Self, DiffusionError> {
        spec.validate()?;
        let shapes = Self::param_shapes(&spec);
        let params = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: NetSpec, params: Vec<Tensor>) -> Result<Self, DiffusionError> {
        spec.validate()?;
        let shapes = Self::param_shapes(&spec);
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape()) {
            return Err(DiffusionError::Shape("parameters do not match the network spec".into()));
        }
        Ok(Self { spec, params })
    }

    fn param_shapes(spec: &NetSpec) -> Vec<Vec<usize>> {
        let td = spec.time_dim;
        let mut s = vec![
            vec![TIME_FEATURES, TIME_HIDDEN],
            vec![TIME_HIDDEN],
            vec![TIME_HIDDEN, td],
            vec![td],
        ];
        let conv = spec.arch != Arch::Mlp;
        let weight = |cin: usize, cout: usize| if conv { vec![cout, cin, 3, 3] } else { vec![cin, cout] };
        for (cin, cout) in spec.layer_channels() {
            s.push(weight(cin, cout));
            s.push(vec![cout]);
            s.push(vec![td, cout]);
        }
        s.push(weight(spec.last_width(), spec.state_channels));
        s.push(vec![spec.state_channels]);
        s
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    /// Places the parameters on `g` as leaves.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect()
    }

    /// Records the forward pass. `x` and `cond` are `[B, C, H, W]`
    /// (`[B, C]` for the perceptron), `times` is `[B, TIME_FEATURES]`.
    pub fn record(&self, g: &mut Graph, params: &[Var], x: Var, cond: Var, times: Var) -> Result<Var, NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::Usage("parameter handle count mismatch".into()));
        }
        let conv = self.spec.arch != Arch::Mlp;
        let act = |g: &mut Graph, v: Var| g.leaky_relu(v, LEAKY_SLOPE);
        let mut e = g.matmul(times, params[0])?;
        e = g.add_row_bias(e, params[1])?;
        e = act(g, e);
        e = g.matmul(e, params[2])?;
        e = g.add_row_bias(e, params[3])?;
        let emb = act(g, e);

        let mut next = 4;
        let mut layer = |g: &mut Graph, h: Var| -> Result<Var, NnError> {
            let (w, b, p) = (params[next], params[next + 1], params[next + 2]);
            next += 3;
            let tb = g.matmul(emb, p)?;
            let y = if conv {
                let y = g.conv2d(h, w, b)?;
                g.add_channel_bias(y, tb)?
            } else {
                let y = g.matmul(h, w)?;
                let y = g.add_row_bias(y, b)?;
                g.add(y, tb)?
            };
            Ok(act(g, y))
        };

        let input = if self.spec.cond_channels > 0 { g.concat1(&[x, cond])? } else { x };
        let hidden = match self.spec.arch {
            Arch::Mlp | Arch::Conv => {
                let mut h = input;
                for _ in 0..self.spec.widths.len() {
                    h = layer(g, h)?;
                }
                h
            }
            Arch::Unet => {
                let levels = self.spec.widths.len();
                let mut skips = Vec::with_capacity(levels);
                let mut h = input;
                for l in 0..levels {
                    if l > 0 {
                        h = g.avg_pool2(h)?;
                    }
                    h = layer(g, h)?;
                    skips.push(h);
                }
                for j in (0..levels - 1).rev() {
                    let up = g.upsample2(h)?;
                    let cat = g.concat1(&[up, skips[j]])?;
                    h = layer(g, cat)?;
                }
                h
            }
        };
        let (w, b) = (params[params.len() - 2], params[params.len() - 1]);
        if conv {
            g.conv2d(hidden, w, b)
        } else {
            let y = g.matmul(hidden, w)?;
            g.add_row_bias(y, b)
        }
    }

    /// Graph-ready input tensors from channel-last data and per-item times.
    /// A missing conditioning payload becomes the zero null token.
    pub fn inputs(&self, x: &[f64], cond: Option<&[f64]>, times: &[f64]) -> Result<(Tensor, Tensor, Tensor), DiffusionError> {
        let batch = times.len();
        let s = &self.spec;
        if x.len() != batch * s.state_dim() {
            return Err(DiffusionError::Shape(format!("state has {} values, expected {}", x.len(), batch * s.state_dim())));
        }
        let zeros;
        let c = match cond {
            Some(c) => c,
            None => {
                zeros = vec![0.0; batch * s.cond_dim()];
                &zeros
            }
        };
        if c.len() != batch * s.cond_dim() {
            return Err(DiffusionError::Shape(format!("conditioning has {} values, expected {}", c.len(), batch * s.cond_dim())));
        }
        let n = s.size;
        let (xs, cs) = if s.arch == Arch::Mlp {
            (vec![batch, s.state_channels], vec![batch, s.cond_channels])
        } else {
            (vec![batch, s.state_channels, n, n], vec![batch, s.cond_channels, n, n])
        };
        let xt = Tensor::new(&xs, hwc_to_chw(x, batch, n, n, s.state_channels))?;
        // Unused placeholder when the network takes no conditioning.
        let ct = if s.cond_channels == 0 {
            Tensor::zeros(&[1])
        } else {
            Tensor::new(&cs, hwc_to_chw(c, batch, n, n, s.cond_channels))?
        };
        let tf: Vec<f64> = times.iter().flat_map(|&t| time_features(t)).collect();
        let tt = Tensor::new(&[batch, TIME_FEATURES], tf)?;
        Ok((xt, ct, tt))
    }

    /// Noise predictions with a separate time per item, channel-last.
    pub fn predict(&self, x: &[f64], cond: Option<&[f64]>, times: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let (xt, ct, tt) = self.inputs(x, cond, times)?;
        let mut g = Graph::new();
        let params = self.register(&mut g, false);
        let (xv, cv, tv) = (g.constant(xt), g.constant(ct), g.constant(tt));
        let out = self.record(&mut g, &params, xv, cv, tv)?;
        let n = self.spec.size;
        Ok(chw_to_hwc(g.value(out).data(), times.len(), n, n, self.spec.state_channels))
    }

    pub fn write(&self, stem: &Path) -> Result<(), DiffusionError> {
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&self.spec)?)?;
        let refs: Vec<&Tensor> = self.params.iter().collect();
        std::fs::write(stem.with_extension("nnp"), encode_tensors(&refs))?;
        Ok(())
    }

    pub fn read(stem: &Path) -> Result<Self, DiffusionError> {
        let spec: NetSpec = serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let params = decode_tensors(&std::fs::read(stem.with_extension("nnp"))?)?;
        Self::from_parts(spec, params)
    }
}

impl Parameterized for DenoiserNet {
    fn parameters(&self) -> Vec<&Tensor> {
        self.params.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().collect()
    }
}

impl Denoiser for DenoiserNet {
    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    fn cond_dim(&self) -> usize {
        self.spec.cond_dim()
    }

    fn epsilon(&self, x: &[f64], batch: usize, t: f64, cond: Option<&[f64]>) -> Result<Vec<f64>, DiffusionError> {
        self.predict(x, cond, &vec![t; batch])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(arch: Arch) -> NetSpec {
        match arch {
            Arch::Mlp => NetSpec {
                arch,
                size: 1,
                state_channels: 3,
                cond_channels: 2,
                widths: vec![8, 8],
                time_dim: 8,
            },
            Arch::Conv => NetSpec {
                arch,
                size: 4,
                state_channels: 2,
                cond_channels: 1,
                widths: vec![4, 4],
                time_dim: 8,
            },
            Arch::Unet => NetSpec {
                arch,
                size: 8,
                state_channels: 2,
                cond_channels: 1,
                widths: vec![4, 6, 6],
                time_dim: 8,
            },
        }
    }

    #[test]
    fn layout_roundtrip() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64).collect();
        let chw = hwc_to_chw(&data, 2, 3, 4, 5);
        assert_eq!(chw[1], data[5]);
        assert_eq!(chw_to_hwc(&chw, 2, 3, 4, 5), data);
    }

    #[test]
    fn fresh_nets_predict_zero_with_right_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for arch in [Arch::Mlp, Arch::Conv, Arch::Unet] {
            let net = DenoiserNet::new(spec(arch), &mut rng).unwrap();
            let x: Vec<f64> = (0..2 * net.state_dim()).map(|i| (i as f64).sin()).collect();
            let out = net.epsilon(&x, 2, 10.0, None).unwrap();
            assert_eq!(out.len(), x.len());
            assert!(out.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn prediction_is_deterministic_and_time_dependent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenoiserNet::new(spec(Arch::Unet), &mut rng).unwrap();
        let n = net.params.len();
        net.params[n - 2] = Tensor::randn(&net.params[n - 2].shape().to_vec(), 0.1, &mut rng);
        let x: Vec<f64> = (0..net.state_dim()).map(|i| (i as f64 * 0.3).cos()).collect();
        let c: Vec<f64> = (0..net.cond_dim()).map(|i| (i as f64 * 0.7).sin()).collect();
        let a = net.epsilon(&x, 1, 5.0, Some(&c)).unwrap();
        assert_eq!(a, net.epsilon(&x, 1, 5.0, Some(&c)).unwrap());
        assert_ne!(a, net.epsilon(&x, 1, 500.0, Some(&c)).unwrap());
        assert_ne!(a, net.epsilon(&x, 1, 5.0, None).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DenoiserNet::new(spec(Arch::Conv), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("net");
        net.write(&stem).unwrap();
        let back = DenoiserNet::read(&stem).unwrap();
        assert_eq!(back.spec(), net.spec());
        for (a, b) in back.parameters().iter().zip(net.parameters()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = spec(Arch::Unet);
        s.size = 6;
        assert!(DenoiserNet::zeros(s).is_err());
        let mut s = spec(Arch::Mlp);
        s.size = 2;
        assert!(DenoiserNet::zeros(s).is_err());
    }
}
