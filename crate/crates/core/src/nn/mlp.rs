//! Fully connected network with leaky-rectifier hidden activations.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{gemm, Tensor};
use super::{NnError, Parameterized};

/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Multilayer perceptron. Layer `l` maps `widths[l] -> widths[l + 1]`;
/// weights are stored `[in, out]` row-major. The output layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// He-style initialisation.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(widths)?;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let fan_in = widths[l] as f64;
            *w = Tensor::randn(w.shape(), (2.0 / fan_in).sqrt(), rng);
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self, NnError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NnError::Shape(format!("invalid layer widths {widths:?}")));
        }
        let weights = widths
            .windows(2)
            .map(|p| Tensor::zeros(&[p[0], p[1]]))
            .collect();
        let biases = widths[1..].iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn from_parts(widths: &[usize], weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self, NnError> {
        let net = Self::zeros(widths)?;
        if weights.len() != net.weights.len()
            || weights.iter().zip(&net.weights).any(|(a, b)| a.shape() != b.shape())
            || biases.iter().zip(&net.biases).any(|(a, b)| a.shape() != b.shape())
            || biases.len() != net.biases.len()
        {
            return Err(NnError::Shape("layer parameters do not match widths".into()));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.biases[layer]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    /// Single-vector forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        let input = Tensor::new(&[1, x.len()], x.to_vec())?;
        Ok(self.forward_batch(&input)?.into_data())
    }

    /// Row-wise forward pass of `[m, in]` inputs.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.widths[0] {
            return Err(NnError::Shape(format!(
                "mlp input {s:?} but first width is {}",
                self.widths[0]
            )));
        }
        let m = s[0];
        let mut cur = x.data().to_vec();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (k, n) = (w.shape()[0], w.shape()[1]);
            let mut next = vec![0.0; m * n];
            gemm(m, k, n, &cur, w.data(), &mut next, false);
            for row in next.chunks_mut(n) {
                for (v, bb) in row.iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            if l < last {
                next.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= LEAKY_SLOPE
                    }
                });
            }
            cur = next;
        }
        Tensor::new(&[m, self.output_width()], cur)
    }

    /// Places the parameters on `g` as differentiable leaves, in
    /// [`Parameterized::parameters`] order.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.parameters().into_iter().map(|p| g.param(p.clone())).collect()
    }

    /// Records the forward pass of `[m, in]` inputs using parameter handles
    /// from [`Mlp::register`].
    pub fn build(&self, g: &mut Graph, params: &[Var], x: Var) -> Result<Var, NnError> {
        if params.len() != 2 * self.weights.len() {
            return Err(NnError::Usage("parameter handle count mismatch".into()));
        }
        let last = self.weights.len() - 1;
        let mut h = x;
        for l in 0..self.weights.len() {
            h = g.matmul(h, params[2 * l])?;
            h = g.add_row_bias(h, params[2 * l + 1])?;
            if l < last {
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let mut net = Mlp::zeros(&[3, 5, 2]).unwrap();
        net.bias_mut(1).data_mut().copy_from_slice(&[0.25, -1.5]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.25, -1.5]);
    }

    #[test]
    fn single_affine_layer() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        net.weight_mut(0).data_mut()[0] = 2.0;
        net.bias_mut(0).data_mut()[0] = 1.0;
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = Mlp::zeros(&[3, 2]).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(NnError::Shape(_))));
    }

    #[test]
    fn matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[4, 7, 3], &mut rng).unwrap();
        let x = [0.3, -1.2, 0.8, 2.0];
        // Independent oracle: explicit loops over the stored [in, out] weights.
        let mut hidden = [0.0; 7];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut acc = net.bias(0).data()[j];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * net.weight(0).data()[i * 7 + j];
            }
            *h = if acc > 0.0 { acc } else { 0.01 * acc };
        }
        let got = net.forward(&x).unwrap();
        for (k, g) in got.iter().enumerate() {
            let mut acc = net.bias(1).data()[k];
            for (j, h) in hidden.iter().enumerate() {
                acc += h * net.weight(1).data()[j * 3 + k];
            }
            assert!((g - acc).abs() <= 1e-12 * acc.abs().max(1.0));
        }
    }

    #[test]
    fn graph_forward_equals_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 8, 8, 1], &mut rng).unwrap();
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let params = net.register(&mut g);
        let xv = g.constant(x.clone());
        let y = net.build(&mut g, &params, xv).unwrap();
        assert_eq!(g.value(y), &net.forward_batch(&x).unwrap());
    }
}
