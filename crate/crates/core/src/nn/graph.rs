//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products. Nodes
//! created with [`Graph::constant`] and everything depending only on them are
//! skipped during the backward pass.

use std::rc::Rc;

use super::tensor::{gemm, gemm_strided, Tensor};
use super::NnError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Precomputed weighted taps for bilinear gathers out of a channel-last source.
///
/// Output element `(row, group * channels + c)` equals
/// `Σ_tap weight · src[offset + c]` over the four taps of `(row, group)`.
#[derive(Debug, Clone)]
pub struct GatherStencil {
    pub rows: usize,
    pub groups: usize,
    pub channels: usize,
    pub taps: Vec<[(usize, f64); 4]>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Var },
    AddChannelBias(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat1(Vec<Var>),
    Gather(Var, Rc<GatherStencil>),
    TotalVariation(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every differentiable node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of `like`'s shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn shape_err<T>(msg: String) -> Result<T, NnError> {
    Err(NnError::Shape(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, targets, conditioning).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul {sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return shape_err(format!("row bias {sx:?} + {sb:?}"));
        }
        let n = sx[1];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Stride-1 convolution with zero "same" padding.
    ///
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]` with odd `k`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 || sb != [sw[0]] {
            return shape_err(format!("conv2d x{sx:?} w{sw:?} b{sb:?}"));
        }
        let geom = ConvGeom::new(sx, sw);
        let out = conv_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(&[geom.batch, geom.c_out, geom.h, geom.w], out)?,
            Op::Conv2d { x, w, b },
            rg,
        ))
    }

    /// `[B, C, H, W] + [B, C]` broadcast over the spatial axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb != [sx[0], sx[1]] {
            return shape_err(format!("channel bias {sx:?} + {sb:?}"));
        }
        let hw = sx[2] * sx[3];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (plane, bb) in out.data_mut().chunks_mut(hw).zip(&bias) {
            plane.iter_mut().for_each(|v| *v += bb);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddChannelBias(x, b), rg))
    }

    /// 2×2 average pooling over `[B, C, H, W]`.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return shape_err(format!("avg_pool2 {s:?}"));
        }
        let (h2, w2) = (s[2] / 2, s[3] / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * h2 * w2];
        for (p, o) in out.chunks_mut(h2 * w2).enumerate() {
            let plane = &src[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for i in 0..h2 {
                for j in 0..w2 {
                    let r0 = 2 * i * s[3] + 2 * j;
                    o[i * w2 + j] = 0.25 * (plane[r0] + plane[r0 + 1] + plane[r0 + s[3]] + plane[r0 + s[3] + 1]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], h2, w2], out)?, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2× upsampling over `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("upsample2 {s:?}"));
        }
        let (h2, w2) = (s[2] * 2, s[3] * 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * h2 * w2];
        for (p, o) in out.chunks_mut(h2 * w2).enumerate() {
            let plane = &src[p * s[2] * s[3]..(p + 1) * s[2] * s[3]];
            for i in 0..h2 {
                for j in 0..w2 {
                    o[i * w2 + j] = plane[(i / 2) * s[3] + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[s[0], s[1], h2, w2], out)?, Op::Upsample2(x), rg))
    }

    /// Concatenation along axis 1 (channels of `[B, C, ...]`, features of `[M, F]`).
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = self
            .shape(*parts.first().ok_or_else(|| NnError::Shape("empty concat".into()))?)
            .to_vec();
        if first.len() < 2 {
            return shape_err(format!("concat1 needs rank >= 2, got {first:?}"));
        }
        let outer = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != outer || s[2..] != first[2..] {
                return shape_err(format!("concat1 {first:?} with {s:?}"));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat1(parts.to_vec()), rg))
    }

    /// Bilinear gather driven by a precomputed stencil; output `[rows, groups * channels]`.
    pub fn gather(&mut self, src: Var, stencil: Rc<GatherStencil>) -> Result<Var, NnError> {
        let n = self.value(src).len();
        if stencil.taps.len() != stencil.rows * stencil.groups
            || stencil
                .taps
                .iter()
                .any(|t| t.iter().any(|&(off, _)| off + stencil.channels > n))
        {
            return shape_err("gather stencil out of bounds".into());
        }
        let ch = stencil.channels;
        let data = self.value(src).data();
        let mut out = vec![0.0; stencil.rows * stencil.groups * ch];
        for (slot, taps) in out.chunks_mut(ch).zip(&stencil.taps) {
            for &(off, wt) in taps {
                for (o, s) in slot.iter_mut().zip(&data[off..off + ch]) {
                    *o += wt * s;
                }
            }
        }
        let shape = [stencil.rows, stencil.groups * ch];
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Gather(src, stencil), rg))
    }

    /// Anisotropic total variation of `[P, H, W, C]` planes: the sum of absolute
    /// forward differences along both spatial axes, over all planes and channels.
    pub fn total_variation(&mut self, planes: Var) -> Result<Var, NnError> {
        let s = self.shape(planes);
        if s.len() != 4 {
            return shape_err(format!("total_variation {s:?}"));
        }
        let tv = total_variation_value(s, self.value(planes).data());
        let rg = self.rg(planes);
        Ok(self.push(Tensor::scalar(tv), Op::TotalVariation(planes), rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm_strided(m, n, k, g.data(), (n, 1), vb.data(), (1, n), &mut da, false);
                    acc(*a, Tensor::new(&[m, k], da).expect("shape"));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    gemm_strided(k, m, n, va.data(), (1, k), g.data(), (n, 1), &mut db, false);
                    acc(*b, Tensor::new(&[k, n], db).expect("shape"));
                }
            }
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let n = g.shape()[1];
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                acc(*b, g.zip_map(self.value(*a), |gv, av| gv * av));
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                acc(*a, g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { s * gv }));
            }
            // Subgradient of |x| at 0 is taken as 0.
            Op::Abs(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv * sign(x))),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.data()[0] / n));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a)).expect("shape")),
            Op::Conv2d { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(vx.shape(), vw.shape());
                let (dx, dw, db) = conv_backward(
                    &geom,
                    vx.data(),
                    vw.data(),
                    g.data(),
                    self.rg(*x),
                    self.rg(*w) || self.rg(*b),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(vx.shape(), dx).expect("shape"));
                }
                if let Some((dw, db)) = dw.zip(db) {
                    acc(*w, Tensor::new(vw.shape(), dw).expect("shape"));
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let s = g.shape();
                    let hw = s[2] * s[3];
                    let db: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                    acc(*b, Tensor::new(&[s[0], s[1]], db).expect("shape"));
                }
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (h2, w2) = (h / 2, w / 2);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, gp) in g.data().chunks(h2 * w2).enumerate() {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..h {
                        for j in 0..w {
                            plane[i * w + j] = 0.25 * gp[(i / 2) * w2 + j / 2];
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).expect("shape"));
            }
            Op::Upsample2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let w2 = w * 2;
                let mut dx = vec![0.0; self.value(*x).len()];
                for (p, gp) in g.data().chunks(4 * h * w).enumerate() {
                    let plane = &mut dx[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..w2 {
                            plane[(i / 2) * w + j / 2] += gp[i * w2 + j];
                        }
                    }
                }
                acc(*x, Tensor::new(s, dx).expect("shape"));
            }
            Op::Concat1(parts) => {
                let gs = g.shape();
                let outer = gs[0];
                let inner: usize = gs[2..].iter().product();
                let total = gs[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(outer * c * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + c * inner]);
                        }
                        acc(p, Tensor::new(self.shape(p), d).expect("shape"));
                    }
                    offset += c;
                }
            }
            Op::Gather(src, st) => {
                let ch = st.channels;
                let mut d = vec![0.0; self.value(*src).len()];
                for (slot, taps) in g.data().chunks(ch).zip(&st.taps) {
                    for &(off, wt) in taps {
                        for (dd, gv) in d[off..off + ch].iter_mut().zip(slot) {
                            *dd += wt * gv;
                        }
                    }
                }
                acc(*src, Tensor::new(self.shape(*src), d).expect("shape"));
            }
            Op::TotalVariation(planes) => {
                let s = self.shape(*planes);
                let mut d = total_variation_grad(s, self.value(*planes).data());
                let gv = g.data()[0];
                d.iter_mut().for_each(|v| *v *= gv);
                acc(*planes, Tensor::new(s, d).expect("shape"));
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn total_variation_value(shape: &[usize], data: &[f64]) -> f64 {
    let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let at = |pl: usize, i: usize, j: usize, k: usize| data[((pl * h + i) * w + j) * c + k];
    let mut tv = 0.0;
    for pl in 0..p {
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let v = at(pl, i, j, k);
                    if i + 1 < h {
                        tv += (at(pl, i + 1, j, k) - v).abs();
                    }
                    if j + 1 < w {
                        tv += (at(pl, i, j + 1, k) - v).abs();
                    }
                }
            }
        }
    }
    tv
}

fn total_variation_grad(shape: &[usize], data: &[f64]) -> Vec<f64> {
    let (p, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let idx = |pl: usize, i: usize, j: usize, k: usize| ((pl * h + i) * w + j) * c + k;
    let mut d = vec![0.0; data.len()];
    for pl in 0..p {
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let here = idx(pl, i, j, k);
                    if i + 1 < h {
                        let there = idx(pl, i + 1, j, k);
                        let s = sign(data[there] - data[here]);
                        d[there] += s;
                        d[here] -= s;
                    }
                    if j + 1 < w {
                        let there = idx(pl, i, j + 1, k);
                        let s = sign(data[there] - data[here]);
                        d[there] += s;
                        d[here] -= s;
                    }
                }
            }
        }
    }
    d
}

struct ConvGeom {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvGeom {
    fn new(sx: &[usize], sw: &[usize]) -> Self {
        Self {
            batch: sx[0],
            c_in: sx[1],
            c_out: sw[0],
            h: sx[2],
            w: sx[3],
            k: sw[2],
        }
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one `[Ci, H, W]` image into `[Ci·k·k, H·W]` patch columns.
fn im2col(geom: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let (h, w, k) = (geom.h as isize, geom.w as isize, geom.k);
    let pad = (k / 2) as isize;
    let hw = geom.hw();
    for c in 0..geom.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (di, dj) = (ki as isize - pad, kj as isize - pad);
                for i in 0..h {
                    let si = i + di;
                    let out_row = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
                    if si < 0 || si >= h {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[(si * w) as usize..((si + 1) * w) as usize];
                    for j in 0..w {
                        let sj = j + dj;
                        out_row[j as usize] = if sj < 0 || sj >= w { 0.0 } else { src_row[sj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
fn col2im(geom: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (h, w, k) = (geom.h as isize, geom.w as isize, geom.k);
    let pad = (k / 2) as isize;
    let hw = geom.hw();
    for c in 0..geom.c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let (di, dj) = (ki as isize - pad, kj as isize - pad);
                for i in 0..h {
                    let si = i + di;
                    if si < 0 || si >= h {
                        continue;
                    }
                    for j in 0..w {
                        let sj = j + dj;
                        if sj >= 0 && sj < w {
                            plane[(si * w + sj) as usize] += src[(i * w + j) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (hw, kr) = (geom.hw(), geom.col_rows());
    let mut out = vec![0.0; geom.batch * geom.c_out * hw];
    let mut col = vec![0.0; kr * hw];
    for b in 0..geom.batch {
        im2col(geom, &x[b * geom.c_in * hw..(b + 1) * geom.c_in * hw], &mut col);
        let o = &mut out[b * geom.c_out * hw..(b + 1) * geom.c_out * hw];
        for (plane, bb) in o.chunks_mut(hw).zip(bias) {
            plane.fill(*bb);
        }
        gemm(geom.c_out, kr, hw, wt, &col, o, true);
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv_backward(geom: &ConvGeom, x: &[f64], wt: &[f64], g: &[f64], need_dx: bool, need_dw: bool) -> ConvGrads {
    let (hw, kr) = (geom.hw(), geom.col_rows());
    let mut col = vec![0.0; kr * hw];
    let mut dcol = vec![0.0; kr * hw];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; wt.len()]);
    let mut db = need_dw.then(|| vec![0.0; geom.c_out]);
    for b in 0..geom.batch {
        let gb = &g[b * geom.c_out * hw..(b + 1) * geom.c_out * hw];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            im2col(geom, &x[b * geom.c_in * hw..(b + 1) * geom.c_in * hw], &mut col);
            // dW += G_b · colᵀ
            gemm_strided(geom.c_out, hw, kr, gb, (hw, 1), &col, (1, hw), dw, true);
            for (d, plane) in db.iter_mut().zip(gb.chunks(hw)) {
                *d += plane.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · G_b
            gemm_strided(kr, geom.c_out, hw, wt, (1, kr), gb, (hw, 1), &mut dcol, false);
            col2im(geom, &dcol, &mut dx[b * geom.c_in * hw..(b + 1) * geom.c_in * hw]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(loss)/d(param) for a graph builder.
    fn check_grad(param: Tensor, build: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let p = g.param(param.clone());
        let loss = build(&mut g, p);
        let analytic = g.backward(loss).unwrap().get_or_zeros(p, &param);
        let h = 1e-5;
        for i in 0..param.len() {
            let eval = |delta: f64| {
                let mut q = param.clone();
                q.data_mut()[i] += delta;
                let mut g = Graph::new();
                let p = g.param(q);
                let l = build(&mut g, p);
                g.value(l).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: analytic {a} numeric {numeric}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.square(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn leaky_relu_negative_slope() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(-1.0));
        let y = g.leaky_relu(x, 0.01);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.01]);
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(NnError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn matmul_bias_gradients() {
        let mut r = rng();
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let bias = Tensor::randn(&[2], 1.0, &mut r);
        let (b2, bias2) = (b.clone(), bias.clone());
        check_grad(a.clone(), move |g, p| {
            let bv = g.constant(b2.clone());
            let m = g.matmul(p, bv).unwrap();
            let bb = g.constant(bias2.clone());
            let m = g.add_row_bias(m, bb).unwrap();
            let s = g.square(m);
            g.sum(s)
        });
        check_grad(b, move |g, p| {
            let av = g.constant(a.clone());
            let m = g.matmul(av, p).unwrap();
            let l = g.leaky_relu(m, 0.01);
            let s = g.abs(l);
            g.mean(s)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[2], 0.5, &mut r);
        let (w2, b2) = (w.clone(), b.clone());
        check_grad(x.clone(), move |g, p| {
            let wv = g.constant(w2.clone());
            let bv = g.constant(b2.clone());
            let y = g.conv2d(p, wv, bv).unwrap();
            let s = g.square(y);
            g.sum(s)
        });
        let (x2, b3) = (x.clone(), b.clone());
        check_grad(w, move |g, p| {
            let xv = g.constant(x2.clone());
            let bv = g.constant(b3.clone());
            let y = g.conv2d(xv, p, bv).unwrap();
            let s = g.square(y);
            g.sum(s)
        });
        let w3 = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut r);
        check_grad(b, move |g, p| {
            let xv = g.constant(x.clone());
            let wv = g.constant(w3.clone());
            let y = g.conv2d(xv, wv, p).unwrap();
            let s = g.square(y);
            g.sum(s)
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 5, 4], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv).unwrap();
        let out = g.value(y);
        for o in 0..3 {
            for i in 0..5i64 {
                for j in 0..4i64 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ki in 0..3i64 {
                            for kj in 0..3i64 {
                                let (si, sj) = (i + ki - 1, j + kj - 1);
                                if (0..5).contains(&si) && (0..4).contains(&sj) {
                                    acc += w.data()[((o * 2 + c) * 3 + ki as usize) * 3 + kj as usize]
                                        * x.data()[(c * 5 + si as usize) * 4 + sj as usize];
                                }
                            }
                        }
                    }
                    let got = out.data()[(o * 5 + i as usize) * 4 + j as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pooling_concat_and_channel_bias_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut r);
        let other = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut r);
        let cb = Tensor::randn(&[2, 3], 1.0, &mut r);
        let weights = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        check_grad(x, move |g, p| {
            let pooled = g.avg_pool2(p).unwrap();
            let up = g.upsample2(pooled).unwrap();
            let o = g.constant(other.clone());
            let cat = g.concat1(&[up, o]).unwrap();
            let bias = g.constant(cb.clone());
            let y = g.add_channel_bias(cat, bias).unwrap();
            let wv = g.constant(weights.clone());
            let y = g.mul(y, wv).unwrap();
            let s = g.square(y);
            g.sum(s)
        });
        let bias = Tensor::randn(&[2, 3], 1.0, &mut r);
        let base = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        check_grad(bias, move |g, p| {
            let x = g.constant(base.clone());
            let y = g.add_channel_bias(x, p).unwrap();
            let s = g.square(y);
            g.sum(s)
        });
    }

    #[test]
    fn gather_and_tv_gradients() {
        let mut r = rng();
        let planes = Tensor::randn(&[3, 3, 3, 2], 1.0, &mut r);
        let stencil = Rc::new(GatherStencil {
            rows: 2,
            groups: 3,
            channels: 2,
            taps: (0..6)
                .map(|i| {
                    let base = (i % 3) * 18;
                    [(base, 0.1), (base + 2, 0.2), (base + 6, 0.3), (base + 8 + (i % 2) * 2, 0.4)]
                })
                .collect(),
        });
        check_grad(planes, move |g, p| {
            let z = g.gather(p, stencil.clone()).unwrap();
            let s = g.square(z);
            let a = g.sum(s);
            let tv = g.total_variation(p).unwrap();
            let tv = g.scale(tv, 0.3);
            g.add(a, tv).unwrap()
        });
    }

    #[test]
    fn tv_hand_value() {
        // [[0,1],[0,1]]: two unit differences along the second axis, none along the first.
        let v = total_variation_value(&[1, 2, 2, 1], &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(v, 2.0);
        assert_eq!(total_variation_value(&[3, 4, 4, 2], &[0.7; 96]), 0.0);
    }
}
