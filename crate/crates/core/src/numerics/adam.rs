use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        AdamConfig {
            learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are laid out like the
/// parameter list handed to [`Adam::step`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Adam {
        Adam {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Restores a saved optimizer.
    pub fn from_state(config: AdamConfig, steps: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>) -> Result<Adam> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(m, v)| m.len() != v.len()) {
            return Err(dim_err("first and second moment buffers differ in shape"));
        }
        Ok(Adam {
            config,
            step: steps,
            first,
            second,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Tensor lengths of the moment buffers.
    pub fn shapes(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    /// First and second moment buffers.
    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first, &self.second)
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(dim_err(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(dim_err(format!(
                    "tensor {i}: state {} vs param {} vs grad {}",
                    self.first[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (b1 as f64).powi(t);
        let bc2 = 1.0 - (b2 as f64).powi(t);
        let step_size = (lr as f64 / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        for _ in 0..5 {
            adam.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.01), &[2]);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut [p.as_mut_slice()], &[&[3.0, -0.2]]).unwrap();
        // m̂ = g, v̂ = g², update = lr * g / (|g| + eps).
        assert!((p[0] + 0.01).abs() < 1e-7);
        assert!((p[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(AdamConfig::with_learning_rate(0.01), &[1]);
        let mut x = vec![0.0f32];
        let mut reached = None;
        for step in 1..=5000 {
            let g = 2.0 * (x[0] - 3.0);
            adam.step(&mut [x.as_mut_slice()], &[&[g]]).unwrap();
            if (x[0] - 3.0).abs() <= 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", x[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut adam = Adam::new(AdamConfig::default(), &[2]);
        let mut p = vec![0.0; 3];
        assert!(adam.step(&mut [p.as_mut_slice()], &[&[0.0; 3]]).is_err());
    }
}
