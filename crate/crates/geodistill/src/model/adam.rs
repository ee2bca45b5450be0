//! Adam with bias correction. Weight decay is applied either coupled
//! (added to the gradient before the moment updates) or decoupled
//! (subtracted from the parameters directly), selectable per run.

use serde::{Deserialize, Serialize};

use super::layer::DenseLayer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// g ← g + wd·θ before the moment updates (classic L2).
    Coupled,
    /// θ ← θ − lr·wd·θ applied alongside the Adam step.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            decay_mode: WeightDecayMode::Coupled,
        }
    }
}

/// First/second moment estimates for one layer.
#[derive(Debug, Clone)]
struct Moments {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
}

/// Optimizer state over an ordered list of layers. The caller owns the
/// layer ordering and must pass gradients in the same order on every step.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    blocks: Vec<Moments>,
}

impl AdamState {
    pub fn for_layers(layers: &[&DenseLayer], config: AdamConfig) -> Self {
        let blocks = layers
            .iter()
            .map(|layer| Moments {
                m_w: vec![0.0; layer.weights.len()],
                v_w: vec![0.0; layer.weights.len()],
                m_b: vec![0.0; layer.bias.len()],
                v_b: vec![0.0; layer.bias.len()],
            })
            .collect();
        Self {
            config,
            step: 0,
            blocks,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter. Call once per optimization step,
    /// before updating any block.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update to a single layer. `skip` leaves both the
    /// parameters and the moments untouched (frozen blocks).
    pub fn update_layer(
        &mut self,
        block: usize,
        layer: &mut DenseLayer,
        grad_w: &[f64],
        grad_b: &[f64],
        skip: bool,
    ) {
        if skip {
            return;
        }
        assert!(self.step > 0, "begin_step must run before update_layer");
        let moments = &mut self.blocks[block];
        let cfg = &self.config;
        let correction1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let correction2 = 1.0 - cfg.beta2.powi(self.step as i32);
        update_slice(
            &mut layer.weights,
            grad_w,
            &mut moments.m_w,
            &mut moments.v_w,
            cfg,
            correction1,
            correction2,
        );
        update_slice(
            &mut layer.bias,
            grad_b,
            &mut moments.m_b,
            &mut moments.v_b,
            cfg,
            correction1,
            correction2,
        );
    }
}

fn update_slice(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    correction1: f64,
    correction2: f64,
) {
    debug_assert_eq!(theta.len(), grad.len());
    for i in 0..theta.len() {
        let g = match cfg.decay_mode {
            WeightDecayMode::Coupled => grad[i] + cfg.weight_decay * theta[i],
            WeightDecayMode::Decoupled => grad[i],
        };
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / correction1;
        let v_hat = v[i] / correction2;
        let mut update = cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        if cfg.decay_mode == WeightDecayMode::Decoupled {
            update += cfg.learning_rate * cfg.weight_decay * theta[i];
        }
        theta[i] -= update;
    }
}
