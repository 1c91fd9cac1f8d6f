//! Fully connected networks with ReLU hidden layers and a linear output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::activation::relu;
use super::half::quantize;
use super::matrix::{gemm_a_bt, gemm_acc, gemm_at_b_acc, Matrix, PrecisionMode};
use crate::error::{dim_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in x fan_out`.
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Dense {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let weight = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
        Dense {
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    /// `x W + b`.
    pub fn affine(&self, x: &Matrix, mode: PrecisionMode) -> Result<Matrix> {
        affine(x, &self.weight, &self.bias, mode)
    }
}

/// `x W + b`; in `Emulated16` all three operands are rounded to binary16 first.
pub fn affine(x: &Matrix, weight: &Matrix, bias: &[f32], mode: PrecisionMode) -> Result<Matrix> {
    if x.cols() != weight.rows() || bias.len() != weight.cols() {
        return Err(dim_err(format!(
            "affine: input width {}, weight {}x{}, bias {}",
            x.cols(),
            weight.rows(),
            weight.cols(),
            bias.len()
        )));
    }
    let (m, k, n) = (x.rows(), weight.rows(), weight.cols());
    let mut out = Matrix::zeros(m, n);
    match mode {
        PrecisionMode::Full32 => {
            for r in 0..m {
                out.row_mut(r).copy_from_slice(bias);
            }
            gemm_acc(out.as_mut_slice(), x.as_slice(), weight.as_slice(), m, k, n);
        }
        PrecisionMode::Emulated16 => {
            let bias: Vec<f32> = bias.iter().map(|&b| quantize(b)).collect();
            for r in 0..m {
                out.row_mut(r).copy_from_slice(&bias);
            }
            let xq = x.quantized();
            let wq = weight.quantized();
            gemm_acc(out.as_mut_slice(), xq.as_slice(), wq.as_slice(), m, k, n);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    inputs: Vec<Matrix>,
}

impl MlpTape {
    /// Input of every layer; entry 0 is the network input, entry `i > 0` the
    /// post-ReLU activation of hidden layer `i - 1`.
    pub fn layer_inputs(&self) -> &[Matrix] {
        &self.inputs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseGrads>,
}

impl MlpGrads {
    /// Gradient buffers in the same order as [`Mlp::params_mut`].
    pub fn flat(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

impl Mlp {
    /// Builds a network with layer widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn xavier<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        Mlp {
            layers: dims.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect(),
        }
    }

    pub fn zeros(dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::fan_out));
        dims
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice().len(), l.bias.len()])
            .collect()
    }

    pub fn params(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn check_chain(&self) -> Result<()> {
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(dim_err(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].fan_out(),
                    i + 1,
                    w[1].fan_in()
                )));
            }
        }
        Ok(())
    }

    /// Forward pass returning the raw output layer and a tape for backprop.
    pub fn forward(&self, input: &Matrix, mode: PrecisionMode) -> Result<(Matrix, MlpTape)> {
        self.check_chain()?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.affine(&x, mode)?;
            if i < last {
                y.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
            }
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok((x, MlpTape { inputs }))
    }

    /// Forward pass without a tape.
    pub fn infer(&self, input: &Matrix, mode: PrecisionMode) -> Result<Matrix> {
        self.check_chain()?;
        let mut x = self.layers[0].affine(input, mode)?;
        for layer in &self.layers[1..] {
            x.as_mut_slice().iter_mut().for_each(|v| *v = relu(*v));
            x = layer.affine(&x, mode)?;
        }
        Ok(x)
    }

    /// Gradients of every weight and bias, plus the gradient with respect to
    /// the network input, given `upstream = dL/d(output)`.
    pub fn backward(&self, tape: &MlpTape, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(dim_err(format!(
                "tape has {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        let batch = tape.inputs[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.output_dim() {
            return Err(dim_err(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                upstream.rows(),
                upstream.cols(),
                batch,
                self.output_dim()
            )));
        }

        let mut grads: Vec<DenseGrads> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.inputs[i];
            let (m, k, n) = (batch, layer.fan_in(), layer.fan_out());
            if x.cols() != k {
                return Err(dim_err(format!("tape input {i} has width {}, expected {k}", x.cols())));
            }
            let mut dw = vec![0.0; k * n];
            gemm_at_b_acc(&mut dw, x.as_slice(), g.as_slice(), m, k, n);
            let mut db = vec![0.0; n];
            for r in 0..m {
                for (d, &v) in db.iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            let mut dx = Matrix::zeros(m, k);
            gemm_a_bt(dx.as_mut_slice(), g.as_slice(), layer.weight.as_slice(), m, k, n);
            if i > 0 {
                // x is the ReLU output of the previous layer.
                for (d, &xv) in dx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            grads.push(DenseGrads { weight: dw, bias: db });
            g = dx;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_yield_bias_only() {
        let mut net = Mlp::zeros(&[4, 3, 2]);
        net.layers[1].bias = vec![0.25, -0.5];
        let x = Matrix::from_fn(5, 4, |r, c| (r + c) as f32);
        let (y, _) = net.forward(&x, PrecisionMode::Full32).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), &[0.25, -0.5]);
        }
    }

    #[test]
    fn identity_single_layer() {
        let net = Mlp {
            layers: vec![Dense {
                weight: Matrix::identity(3),
                bias: vec![0.0; 3],
            }],
        };
        let x = Matrix::from_fn(2, 3, |r, c| r as f32 - c as f32 * 1.5);
        let (y, _) = net.forward(&x, PrecisionMode::Full32).unwrap();
        assert_eq!(y, x);
        assert_eq!(net.infer(&x, PrecisionMode::Full32).unwrap(), x);
    }

    #[test]
    fn forward_is_deterministic_and_matches_infer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::xavier(&[6, 8, 5, 2], &mut rng);
        let x = Matrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let (a, _) = net.forward(&x, PrecisionMode::Full32).unwrap();
        let (b, _) = net.forward(&x, PrecisionMode::Full32).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.infer(&x, PrecisionMode::Full32).unwrap(), a);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::xavier(&[3, 4, 2], &mut rng);
        let x = Matrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let (_, tape) = net.forward(&x, PrecisionMode::Full32).unwrap();
        let (grads, dx) = net.backward(&tape, &Matrix::zeros(2, 2)).unwrap();
        for g in grads.flat() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_neuron() {
        let net = Mlp {
            layers: vec![Dense {
                weight: Matrix::from_vec(1, 1, vec![0.7]).unwrap(),
                bias: vec![0.0],
            }],
        };
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let (_, tape) = net.forward(&x, PrecisionMode::Full32).unwrap();
        let (grads, dx) = net
            .backward(&tape, &Matrix::from_vec(1, 1, vec![2.0]).unwrap())
            .unwrap();
        assert_eq!(grads.layers[0].weight, vec![6.0]);
        assert_eq!(grads.layers[0].bias, vec![2.0]);
        assert!((dx.get(0, 0) - 1.4).abs() < 1e-6);
    }

    #[test]
    fn mismatched_input_width() {
        let net = Mlp::zeros(&[3, 2]);
        let x = Matrix::zeros(1, 4);
        assert!(net.forward(&x, PrecisionMode::Full32).is_err());
    }

    #[test]
    fn mismatched_tape() {
        let net = Mlp::zeros(&[3, 2]);
        let other = Mlp::zeros(&[3, 3, 2]);
        let (_, tape) = other.forward(&Matrix::zeros(1, 3), PrecisionMode::Full32).unwrap();
        assert!(net.backward(&tape, &Matrix::zeros(1, 2)).is_err());
    }
}
