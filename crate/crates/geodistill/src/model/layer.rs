//! Dense layers with explicit forward traces and backprop primitives, the
//! Xavier initializer, and the softplus link that maps head outputs onto
//! strictly positive distribution parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Fully connected layer. Weights are row-major: row o holds the fan-in
/// of output unit o.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Xavier (Glorot) initialization: weights uniform on
    /// ±√(6/(d_in + d_out)), bias zero.
    pub fn xavier<R: Rng>(d_out: usize, d_in: usize, activation: Activation, rng: &mut R) -> Self {
        assert!(d_in > 0 && d_out > 0, "layer dimensions must be positive");
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weights = (0..d_in * d_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            d_in,
            d_out,
            weights,
            bias: vec![0.0; d_out],
            activation,
        }
    }

    /// Forward pass returning (pre-activation, output).
    pub(crate) fn apply(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        debug_assert_eq!(input.len(), self.d_in);
        let mut pre = Vec::with_capacity(self.d_out);
        for o in 0..self.d_out {
            let row = &self.weights[o * self.d_in..(o + 1) * self.d_in];
            let mut acc = self.bias[o];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            pre.push(acc);
        }
        let out = match self.activation {
            Activation::Relu => pre.iter().map(|&z| z.max(0.0)).collect(),
            Activation::Identity => pre.clone(),
        };
        (pre, out)
    }

    /// Backward pass for one sample. `d_out_grad` is ∂loss/∂output;
    /// accumulates ∂loss/∂weights into `grad_w`, ∂loss/∂bias into `grad_b`,
    /// and returns ∂loss/∂input.
    pub(crate) fn backprop(
        &self,
        input: &[f64],
        pre: &[f64],
        d_out_grad: &[f64],
        grad_w: &mut [f64],
        grad_b: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(d_out_grad.len(), self.d_out);
        let mut d_input = vec![0.0; self.d_in];
        for o in 0..self.d_out {
            let dz = match self.activation {
                Activation::Relu => {
                    if pre[o] > 0.0 {
                        d_out_grad[o]
                    } else {
                        0.0
                    }
                }
                Activation::Identity => d_out_grad[o],
            };
            if dz == 0.0 {
                continue;
            }
            grad_b[o] += dz;
            let row = &self.weights[o * self.d_in..(o + 1) * self.d_in];
            let grad_row = &mut grad_w[o * self.d_in..(o + 1) * self.d_in];
            for i in 0..self.d_in {
                grad_row[i] += dz * input[i];
                d_input[i] += row[i] * dz;
            }
        }
        d_input
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Overflow-safe softplus plus a positivity floor:
/// ln(1 + eᶻ) + floor, with the asymptote z + floor used for z > 30.
pub fn softplus_link(z: &[f64], floor: f64) -> Vec<f64> {
    debug_assert!(floor > 0.0);
    z.iter().map(|&v| softplus_scalar(v, floor)).collect()
}

pub(crate) fn softplus_scalar(z: f64, floor: f64) -> f64 {
    if z > 30.0 {
        z + floor
    } else {
        z.exp().ln_1p() + floor
    }
}

/// Derivative of softplus: the logistic sigmoid.
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn xavier_weight_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = DenseLayer::xavier(64, 64, Activation::Relu, &mut rng);
        let n = layer.weights.len() as f64;
        let mean = layer.weights.iter().sum::<f64>() / n;
        let var = layer.weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n;
        let glorot = 2.0 / (64.0 + 64.0);
        assert!((var - glorot).abs() < 0.2 * glorot, "var={var} vs {glorot}");
    }

    #[test]
    fn xavier_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = DenseLayer::xavier(8, 4, Activation::Identity, &mut rng);
        assert!(layer.bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn xavier_deterministic() {
        let a = DenseLayer::xavier(6, 3, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(9));
        let b = DenseLayer::xavier(6, 3, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn softplus_values() {
        let floor = 1e-6;
        let out = softplus_link(&[0.0, -100.0, 100.0], floor);
        assert!((out[0] - (2.0f64.ln() + floor)).abs() < 1e-12);
        assert!(out[1] > 0.0 && out[1] < 2.0 * floor);
        assert!((out[2] - (100.0 + floor)).abs() < 1e-12);
    }

    #[test]
    fn softplus_always_positive_and_finite() {
        for z in [-1e6, -30.0, -1.0, 0.0, 1.0, 30.0, 1e6] {
            let v = softplus_scalar(z, 1e-6);
            assert!(v > 0.0 && v.is_finite(), "z={z} -> {v}");
        }
    }

    #[test]
    fn sigmoid_matches_softplus_derivative() {
        let h = 1e-6;
        for z in [-5.0, -0.3, 0.0, 2.0, 8.0] {
            let fd = (softplus_scalar(z + h, 1e-9) - softplus_scalar(z - h, 1e-9)) / (2.0 * h);
            assert!((sigmoid(z) - fd).abs() < 1e-8, "z={z}");
        }
    }

    #[test]
    fn softmax_normalizes() {
        let q = softmax(&[1.0, 2.0, -400.0, 3.0]);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(q.iter().all(|&v| v >= 0.0));
    }
}
