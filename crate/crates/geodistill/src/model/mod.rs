//! The two-component network: a shared dense backbone and three prediction
//! heads emitting Dirichlet concentrations over two label spaces and
//! Poisson rates over object counts. Forward, exact backpropagation of the
//! joint negative log-likelihood, and checkpoint round-tripping live here.

mod adam;
mod layer;

pub use adam::{AdamConfig, AdamState, WeightDecayMode};
pub use layer::{softplus_link, Activation, DenseLayer};

pub(crate) use layer::{sigmoid, softmax};

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GroundSample;
use crate::dist::{
    smooth_simplex, DirichletParams, PoissonParams, SimplexVector, DEFAULT_SIMPLEX_EPS,
};
use crate::error::{ensure_dims, ensure_positive, Error, Result};

/// Network shape. Head hidden width defaults to 1024; desk-scale runs
/// override it (and the output dimensions) downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub head_hidden: usize,
    pub scene_dim: usize,
    pub image_dim: usize,
    pub count_dim: usize,
    pub link_floor: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: usize| -> Result<()> {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be positive".into(),
                });
            }
            Ok(())
        };
        positive("feature_dim", self.feature_dim)?;
        positive("head_hidden", self.head_hidden)?;
        positive("count_dim", self.count_dim)?;
        if self.backbone_widths.is_empty() {
            return Err(Error::Config {
                field: "backbone_widths",
                reason: "at least one backbone layer is required".into(),
            });
        }
        for &w in &self.backbone_widths {
            positive("backbone_widths", w)?;
        }
        if self.scene_dim < 2 || self.image_dim < 2 {
            return Err(Error::Config {
                field: "scene_dim/image_dim",
                reason: "categorical label spaces need at least 2 classes".into(),
            });
        }
        ensure_positive("link_floor", self.link_floor)?;
        Ok(())
    }

    pub fn backbone_out(&self) -> usize {
        *self.backbone_widths.last().expect("validated non-empty")
    }
}

/// Per-dimension standardization fitted on the training split and applied
/// to every feature before the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        feature
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }
}

/// A prediction head: dense+relu into dense+identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl Head {
    fn xavier<R: Rng>(hidden: usize, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            hidden: DenseLayer::xavier(hidden, d_in, Activation::Relu, rng),
            output: DenseLayer::xavier(d_out, hidden, Activation::Identity, rng),
        }
    }
}

/// All learnable weights plus the frozen flag and input statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: ModelConfig,
    pub input_norm: Option<InputNorm>,
    pub backbone: Vec<DenseLayer>,
    pub head_scene: Head,
    pub head_image: Head,
    pub head_counts: Head,
    pub backbone_frozen: bool,
}

/// Gradient container mirroring [`ModelState`] shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub hidden: LayerGrad,
    pub output: LayerGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub backbone: Vec<LayerGrad>,
    pub scene: HeadGrad,
    pub image: HeadGrad,
    pub counts: HeadGrad,
}

impl ModelGrads {
    pub fn zeros_like(model: &ModelState) -> Self {
        let head = |h: &Head| HeadGrad {
            hidden: LayerGrad::zeros_like(&h.hidden),
            output: LayerGrad::zeros_like(&h.output),
        };
        Self {
            backbone: model.backbone.iter().map(LayerGrad::zeros_like).collect(),
            scene: head(&model.head_scene),
            image: head(&model.head_image),
            counts: head(&model.head_counts),
        }
    }

    /// Canonical block order shared with [`adam_step`]: backbone layers,
    /// then scene, image, counts heads (hidden before output).
    pub fn blocks(&self) -> Vec<&LayerGrad> {
        let mut out: Vec<&LayerGrad> = self.backbone.iter().collect();
        for head in [&self.scene, &self.image, &self.counts] {
            out.push(&head.hidden);
            out.push(&head.output);
        }
        out
    }
}

/// Mean per-head negative log-likelihoods plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub scene: f64,
    pub image: f64,
    pub counts: f64,
    pub total: f64,
}

impl ModelState {
    /// Xavier-initialize every layer. Draw order is fixed: backbone first,
    /// then the scene, image, and counts heads.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.backbone_widths.len());
        let mut d_in = config.feature_dim;
        for &width in &config.backbone_widths {
            backbone.push(DenseLayer::xavier(width, d_in, Activation::Relu, rng));
            d_in = width;
        }
        let bb_out = config.backbone_out();
        let head_scene = Head::xavier(config.head_hidden, bb_out, config.scene_dim, rng);
        let head_image = Head::xavier(config.head_hidden, bb_out, config.image_dim, rng);
        let head_counts = Head::xavier(config.head_hidden, bb_out, config.count_dim, rng);
        Ok(Self {
            config,
            input_norm: None,
            backbone,
            head_scene,
            head_image,
            head_counts,
            backbone_frozen: false,
        })
    }

    /// Canonical mutable layer order matching [`ModelGrads::blocks`].
    pub fn layers_mut(&mut self) -> Vec<&mut DenseLayer> {
        let mut out: Vec<&mut DenseLayer> = self.backbone.iter_mut().collect();
        for head in [
            &mut self.head_scene,
            &mut self.head_image,
            &mut self.head_counts,
        ] {
            out.push(&mut head.hidden);
            out.push(&mut head.output);
        }
        out
    }

    pub fn layers(&self) -> Vec<&DenseLayer> {
        let mut out: Vec<&DenseLayer> = self.backbone.iter().collect();
        for head in [&self.head_scene, &self.head_image, &self.head_counts] {
            out.push(&head.hidden);
            out.push(&head.output);
        }
        out
    }

    fn normalized(&self, feature: &[f64]) -> Vec<f64> {
        match &self.input_norm {
            Some(norm) => norm.apply(feature),
            None => feature.to_vec(),
        }
    }

    pub(crate) fn backbone_trace(&self, feature: &[f64]) -> BackboneTrace {
        let mut activations = vec![self.normalized(feature)];
        let mut pre = Vec::with_capacity(self.backbone.len());
        for layer in &self.backbone {
            let (p, out) = layer.apply(activations.last().expect("non-empty"));
            pre.push(p);
            activations.push(out);
        }
        BackboneTrace { activations, pre }
    }

    /// Forward pass: backbone, three heads, softplus link. Every returned
    /// parameter is strictly positive and finite.
    pub fn forward(
        &self,
        feature: &[f64],
    ) -> Result<(DirichletParams, DirichletParams, PoissonParams)> {
        ensure_dims("forward feature", self.config.feature_dim, feature.len())?;
        let trace = self.backbone_trace(feature);
        let bb_out = trace.output();
        let floor = self.config.link_floor;
        let link = |head: &Head| -> Vec<f64> {
            let (_, hidden_out) = head.hidden.apply(bb_out);
            let (_, z) = head.output.apply(&hidden_out);
            softplus_link(&z, floor)
        };
        let scene = DirichletParams::new(link(&self.head_scene))
            .expect("softplus link output is positive");
        let image = DirichletParams::new(link(&self.head_image))
            .expect("softplus link output is positive");
        let counts = PoissonParams::new(link(&self.head_counts))
            .expect("softplus link output is positive");
        Ok((scene, image, counts))
    }

    /// Per-sample negative log-likelihoods of the three heads. Ground
    /// categorical vectors are smoothed before Dirichlet evaluation.
    pub fn sample_nll(&self, feature: &[f64], ground: &GroundSample) -> Result<(f64, f64, f64)> {
        let (scene, image, counts) = self.forward(feature)?;
        let scene_obs = smooth_simplex(ground.scene_dist.values(), DEFAULT_SIMPLEX_EPS)?;
        let image_obs = smooth_simplex(ground.image_dist.values(), DEFAULT_SIMPLEX_EPS)?;
        Ok((
            -scene.log_pdf(&scene_obs)?,
            -image.log_pdf(&image_obs)?,
            -counts.log_pmf(&ground.counts)?,
        ))
    }

    /// Exact gradients of the weighted joint loss over a mini-batch, via
    /// the chain rule through the NLL terms, the softplus link, and the
    /// dense stack. Frozen backbones receive exactly zero gradient.
    ///
    /// The loss is Σ_h w_h · mean_batch(NLL_h); the returned report holds
    /// the unweighted per-head means and the weighted total.
    pub fn backward(
        &self,
        batch: &[(&[f64], &GroundSample)],
        head_weights: [f64; 3],
    ) -> Result<(ModelGrads, NllReport)> {
        if batch.is_empty() {
            return Err(Error::Empty { name: "batch" });
        }
        let mut grads = ModelGrads::zeros_like(self);
        let scale = 1.0 / batch.len() as f64;
        let mut sums = [0.0f64; 3];

        for &(feature, ground) in batch {
            ensure_dims("backward feature", self.config.feature_dim, feature.len())?;
            let trace = self.backbone_trace(feature);
            let bb_out = trace.output();
            let mut d_bb_out = vec![0.0; bb_out.len()];

            let scene_obs = smooth_simplex(ground.scene_dist.values(), DEFAULT_SIMPLEX_EPS)?;
            let image_obs = smooth_simplex(ground.image_dist.values(), DEFAULT_SIMPLEX_EPS)?;

            sums[0] += self.head_backward(
                &self.head_scene,
                &mut grads.scene,
                bb_out,
                &mut d_bb_out,
                head_weights[0] * scale,
                |params| {
                    let d = DirichletParams::new(params.to_vec())?;
                    Ok((-d.log_pdf(&scene_obs)?, d.nll_grad(&scene_obs)?))
                },
            )?;
            sums[1] += self.head_backward(
                &self.head_image,
                &mut grads.image,
                bb_out,
                &mut d_bb_out,
                head_weights[1] * scale,
                |params| {
                    let d = DirichletParams::new(params.to_vec())?;
                    Ok((-d.log_pdf(&image_obs)?, d.nll_grad(&image_obs)?))
                },
            )?;
            sums[2] += self.head_backward(
                &self.head_counts,
                &mut grads.counts,
                bb_out,
                &mut d_bb_out,
                head_weights[2] * scale,
                |params| {
                    let p = PoissonParams::new(params.to_vec())?;
                    Ok((-p.log_pmf(&ground.counts)?, p.nll_grad(&ground.counts)?))
                },
            )?;

            if !self.backbone_frozen {
                let mut upstream = d_bb_out;
                for (idx, layer) in self.backbone.iter().enumerate().rev() {
                    let block = &mut grads.backbone[idx];
                    upstream = layer.backprop(
                        &trace.activations[idx],
                        &trace.pre[idx],
                        &upstream,
                        &mut block.weights,
                        &mut block.bias,
                    );
                }
            }
        }

        let report = NllReport {
            scene: sums[0] * scale,
            image: sums[1] * scale,
            counts: sums[2] * scale,
            total: head_weights[0] * sums[0] * scale
                + head_weights[1] * sums[1] * scale
                + head_weights[2] * sums[2] * scale,
        };
        Ok((grads, report))
    }

    /// Forward one head, evaluate its NLL and parameter gradient through
    /// `nll_and_grad`, and backpropagate `weight`-scaled gradients into the
    /// head block and the shared backbone output. Returns the sample NLL.
    fn head_backward<F>(
        &self,
        head: &Head,
        grad: &mut HeadGrad,
        bb_out: &[f64],
        d_bb_out: &mut [f64],
        weight: f64,
        nll_and_grad: F,
    ) -> Result<f64>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let (hidden_pre, hidden_out) = head.hidden.apply(bb_out);
        let (z_pre, z) = head.output.apply(&hidden_out);
        let params = softplus_link(&z, self.config.link_floor);
        let (nll, d_params) = nll_and_grad(&params)?;
        if weight != 0.0 {
            let dz: Vec<f64> = d_params
                .iter()
                .zip(&z_pre)
                .map(|(&dp, &zi)| weight * dp * sigmoid(zi))
                .collect();
            let d_hidden = head.output.backprop(
                &hidden_out,
                &z_pre,
                &dz,
                &mut grad.output.weights,
                &mut grad.output.bias,
            );
            let d_input = head.hidden.backprop(
                bb_out,
                &hidden_pre,
                &d_hidden,
                &mut grad.hidden.weights,
                &mut grad.hidden.bias,
            );
            for (acc, d) in d_bb_out.iter_mut().zip(d_input) {
                *acc += d;
            }
        }
        Ok(nll)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expect_layer = |layer: &DenseLayer, d_in: usize, d_out: usize| -> Result<()> {
            ensure_dims("layer fan-in", d_in, layer.d_in)?;
            ensure_dims("layer fan-out", d_out, layer.d_out)?;
            ensure_dims("layer weights", d_in * d_out, layer.weights.len())?;
            ensure_dims("layer bias", d_out, layer.bias.len())?;
            for &w in layer.weights.iter().chain(&layer.bias) {
                if !w.is_finite() {
                    return Err(Error::NotFinite {
                        name: "layer parameter",
                        value: w,
                    });
                }
            }
            Ok(())
        };
        ensure_dims(
            "backbone depth",
            self.config.backbone_widths.len(),
            self.backbone.len(),
        )?;
        let mut d_in = self.config.feature_dim;
        for (layer, &width) in self.backbone.iter().zip(&self.config.backbone_widths) {
            expect_layer(layer, d_in, width)?;
            d_in = width;
        }
        let bb_out = self.config.backbone_out();
        for (head, out_dim) in [
            (&self.head_scene, self.config.scene_dim),
            (&self.head_image, self.config.image_dim),
            (&self.head_counts, self.config.count_dim),
        ] {
            expect_layer(&head.hidden, bb_out, self.config.head_hidden)?;
            expect_layer(&head.output, self.config.head_hidden, out_dim)?;
        }
        if let Some(norm) = &self.input_norm {
            ensure_dims("input_norm mean", self.config.feature_dim, norm.mean.len())?;
            ensure_dims("input_norm std", self.config.feature_dim, norm.std.len())?;
        }
        Ok(())
    }
}

pub(crate) struct BackboneTrace {
    /// activations[0] is the (normalized) input; activations[i+1] the
    /// output of backbone layer i.
    pub activations: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
}

impl BackboneTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty")
    }
}

/// KL(p ‖ q) = Σᵢ pᵢ (ln pᵢ − ln qᵢ), with 0·ln 0 taken as 0.
/// Any zero in q is rejected; smooth q upstream.
pub fn kl_divergence(p: &SimplexVector, q: &SimplexVector) -> Result<f64> {
    ensure_dims("kl_divergence", p.len(), q.len())?;
    let mut sum = 0.0;
    for (i, (&pi, &qi)) in p.values().iter().zip(q.values()).enumerate() {
        if qi == 0.0 {
            return Err(Error::ZeroComponent {
                name: "kl reference distribution",
                index: i,
            });
        }
        if pi > 0.0 {
            sum += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(sum)
}

pub(crate) fn kl_divergence_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            sum += pi * (pi.ln() - qi.ln());
        }
    }
    sum
}

/// One Adam update over the whole model. Frozen backbones are skipped
/// entirely: neither their parameters nor their moments move.
pub fn adam_step(state: &mut AdamState, model: &mut ModelState, grads: &ModelGrads) -> Result<()> {
    let frozen = model.backbone_frozen;
    let backbone_len = model.backbone.len();
    ensure_dims("gradient backbone depth", backbone_len, grads.backbone.len())?;
    let blocks = grads.blocks();
    let layers = model.layers_mut();
    ensure_dims("gradient block count", layers.len(), blocks.len())?;
    for (layer, grad) in layers.iter().zip(&blocks) {
        ensure_dims("gradient weights", layer.weights.len(), grad.weights.len())?;
        ensure_dims("gradient bias", layer.bias.len(), grad.bias.len())?;
    }
    state.begin_step();
    for (idx, (layer, grad)) in layers.into_iter().zip(blocks).enumerate() {
        let skip = frozen && idx < backbone_len;
        state.update_layer(idx, layer, &grad.weights, &grad.bias, skip);
    }
    Ok(())
}

/// Build optimizer state sized for the model, in canonical block order.
pub fn adam_state_for(model: &ModelState, config: AdamConfig) -> AdamState {
    AdamState::for_layers(&model.layers(), config)
}

const CHECKPOINT_FORMAT: &str = "geodistill.checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    seed: u64,
    model: ModelState,
}

/// Write the model (dimensions, layer order, parameters, frozen flag,
/// input statistics) and the seed that produced it. JSON floats round-trip
/// bit-exactly, so save → load → forward reproduces outputs exactly.
pub fn save_checkpoint(model: &ModelState, seed: u64, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        seed,
        model: model.clone(),
    };
    let mut body = serde_json::to_string(&file)?;
    body.push('\n');
    fs::write(path, body)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelState, u64)> {
    let body = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&body)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Config {
            field: "checkpoint.format",
            reason: format!("expected {CHECKPOINT_FORMAT}, found {}", file.format),
        });
    }
    file.model.validate()?;
    Ok((file.model, file.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GroundSample;
    use crate::dist::CountVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 5,
            backbone_widths: vec![8],
            head_hidden: 8,
            scene_dim: 4,
            image_dim: 6,
            count_dim: 3,
            link_floor: 1e-6,
        }
    }

    fn tiny_ground(rng: &mut ChaCha8Rng, config: &ModelConfig) -> GroundSample {
        let simplex = |k: usize, rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            SimplexVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
        };
        GroundSample {
            scene_dist: simplex(config.scene_dim, rng),
            image_dist: simplex(config.image_dim, rng),
            counts: CountVector::new((0..config.count_dim).map(|_| rng.gen_range(0..6)).collect()),
        }
    }

    fn tiny_batch(
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
        n: usize,
    ) -> Vec<(Vec<f64>, GroundSample)> {
        (0..n)
            .map(|_| {
                let feature: Vec<f64> = (0..config.feature_dim)
                    .map(|_| rng.gen_range(-1.5..1.5))
                    .collect();
                (feature, tiny_ground(rng, config))
            })
            .collect()
    }

    fn borrow_batch(batch: &[(Vec<f64>, GroundSample)]) -> Vec<(&[f64], &GroundSample)> {
        batch.iter().map(|(f, g)| (f.as_slice(), g)).collect()
    }

    fn batch_loss(model: &ModelState, batch: &[(&[f64], &GroundSample)]) -> f64 {
        let scale = 1.0 / batch.len() as f64;
        batch
            .iter()
            .map(|(f, g)| {
                let (s, i, c) = model.sample_nll(f, g).unwrap();
                (s + i + c) * scale
            })
            .sum()
    }

    #[test]
    fn forward_zero_model_emits_link_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ModelState::init(tiny_config(), &mut rng).unwrap();
        for layer in model.layers_mut() {
            layer.weights.iter_mut().for_each(|w| *w = 0.0);
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let expected = 2.0f64.ln() + model.config.link_floor;
        let (scene, image, counts) = model.forward(&[0.3, -1.0, 0.5, 2.0, 0.0]).unwrap();
        for &v in scene
            .alpha()
            .iter()
            .chain(image.alpha())
            .chain(counts.rates())
        {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_outputs_always_positive_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for round in 0..20 {
            let mut model = ModelState::init(tiny_config(), &mut rng).unwrap();
            let scale = 1.0 + (round as f64) * 0.45; // weight scales up to ~10
            for layer in model.layers_mut() {
                layer.weights.iter_mut().for_each(|w| *w *= scale);
            }
            for _ in 0..500 {
                let feature: Vec<f64> = (0..5).map(|_| rng.gen_range(-10.0..10.0)).collect();
                let (scene, image, counts) = model.forward(&feature).unwrap();
                for &v in scene
                    .alpha()
                    .iter()
                    .chain(image.alpha())
                    .chain(counts.rates())
                {
                    assert!(v > 0.0 && v.is_finite());
                }
            }
        }
    }

    #[test]
    fn forward_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = ModelState::init(tiny_config(), &mut rng).unwrap();
        let feature = [0.1, 0.2, -0.7, 1.1, 0.0];
        let a = model.forward(&feature).unwrap();
        let b = model.forward(&feature).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ModelState::init(tiny_config(), &mut rng).unwrap();
        assert!(model.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let config = tiny_config();
        let mut model = ModelState::init(config.clone(), &mut rng).unwrap();
        let owned = tiny_batch(&mut rng, &config, 3);
        let batch = borrow_batch(&owned);
        let (grads, report) = model.backward(&batch, [1.0, 1.0, 1.0]).unwrap();
        assert!((report.total - batch_loss(&model, &batch)).abs() < 1e-10);

        let h = 1e-4;
        let n_layers = model.layers().len();
        let mut max_rel: f64 = 0.0;
        for layer_idx in 0..n_layers {
            let n_params = model.layers()[layer_idx].param_count();
            for p in 0..n_params {
                let read = |m: &mut ModelState, v: Option<f64>| -> f64 {
                    let layer = &mut m.layers_mut()[layer_idx];
                    let n_w = layer.weights.len();
                    let slot = if p < n_w {
                        &mut layer.weights[p]
                    } else {
                        &mut layer.bias[p - n_w]
                    };
                    let old = *slot;
                    if let Some(v) = v {
                        *slot = v;
                    }
                    old
                };
                let original = read(&mut model, None);
                read(&mut model, Some(original + h));
                let up = batch_loss(&model, &batch);
                read(&mut model, Some(original - h));
                let down = batch_loss(&model, &batch);
                read(&mut model, Some(original));
                let fd = (up - down) / (2.0 * h);
                let block = grads.blocks()[layer_idx];
                let analytic = if p < block.weights.len() {
                    block.weights[p]
                } else {
                    block.bias[p - block.weights.len()]
                };
                let denom = analytic.abs().max(fd.abs());
                if denom > 1e-7 {
                    max_rel = max_rel.max((analytic - fd).abs() / denom);
                } else {
                    assert!((analytic - fd).abs() < 1e-7);
                }
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn backward_duplicated_batch_equals_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let config = tiny_config();
        let model = ModelState::init(config.clone(), &mut rng).unwrap();
        let owned = tiny_batch(&mut rng, &config, 1);
        let single = borrow_batch(&owned);
        let tripled: Vec<_> = single
            .iter()
            .cycle()
            .take(3)
            .map(|&(f, g)| (f, g))
            .collect();
        let (g1, r1) = model.backward(&single, [1.0, 1.0, 1.0]).unwrap();
        let (g3, r3) = model.backward(&tripled, [1.0, 1.0, 1.0]).unwrap();
        assert!((r1.total - r3.total).abs() < 1e-12);
        for (a, b) in g1.blocks().iter().zip(g3.blocks()) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_frozen_backbone_gets_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let config = tiny_config();
        let mut model = ModelState::init(config.clone(), &mut rng).unwrap();
        model.backbone_frozen = true;
        let owned = tiny_batch(&mut rng, &config, 2);
        let (grads, _) = model
            .backward(&borrow_batch(&owned), [1.0, 1.0, 1.0])
            .unwrap();
        for block in &grads.backbone {
            assert!(block.weights.iter().all(|&g| g == 0.0));
            assert!(block.bias.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn backward_rejects_empty_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let model = ModelState::init(tiny_config(), &mut rng).unwrap();
        assert!(model.backward(&[], [1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn zero_head_weight_silences_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let config = tiny_config();
        let model = ModelState::init(config.clone(), &mut rng).unwrap();
        let owned = tiny_batch(&mut rng, &config, 2);
        let (grads, _) = model
            .backward(&borrow_batch(&owned), [1.0, 0.0, 0.0])
            .unwrap();
        for grad in [&grads.image, &grads.counts] {
            assert!(grad.hidden.weights.iter().all(|&g| g == 0.0));
            assert!(grad.output.weights.iter().all(|&g| g == 0.0));
        }
        assert!(grads.scene.output.weights.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn kl_divergence_cases() {
        let p = SimplexVector::new(vec![0.3, 0.7]).unwrap();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);

        let one_hot = SimplexVector::new(vec![1.0, 0.0]).unwrap();
        let uniform = SimplexVector::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&one_hot, &uniform).unwrap() - 2.0f64.ln()).abs() < 1e-12);

        // q with a zero is rejected even where p is zero
        assert!(kl_divergence(&uniform, &one_hot).is_err());
    }

    #[test]
    fn kl_divergence_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha8Rng| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                let total: f64 = raw.iter().sum();
                SimplexVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn adam_step_descends_at_small_learning_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let config = tiny_config();
        let mut model = ModelState::init(config.clone(), &mut rng).unwrap();
        let owned = tiny_batch(&mut rng, &config, 1);
        let batch = borrow_batch(&owned);
        let before = batch_loss(&model, &batch);
        let (grads, _) = model.backward(&batch, [1.0, 1.0, 1.0]).unwrap();
        let mut adam = adam_state_for(&model, AdamConfig::new(1e-4, 0.0));
        adam_step(&mut adam, &mut model, &grads).unwrap();
        let after = batch_loss(&model, &batch);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn adam_step_keeps_frozen_backbone_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let config = tiny_config();
        let mut model = ModelState::init(config.clone(), &mut rng).unwrap();
        model.backbone_frozen = true;
        let reference = model.backbone.clone();
        let owned = tiny_batch(&mut rng, &config, 2);
        let batch = borrow_batch(&owned);
        let mut adam = adam_state_for(&model, AdamConfig::new(0.01, 1e-3));
        for _ in 0..100 {
            let (grads, _) = model.backward(&batch, [1.0, 1.0, 1.0]).unwrap();
            adam_step(&mut adam, &mut model, &grads).unwrap();
        }
        assert_eq!(model.backbone, reference);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let config = tiny_config();
        let mut model = ModelState::init(config.clone(), &mut rng).unwrap();
        model.input_norm = Some(InputNorm {
            mean: vec![0.1, -0.2, 0.0, 3.0, 1e-14],
            std: vec![1.0, 2.0, 0.5, 1.5, 1.0],
        });
        model.backbone_frozen = true;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, 41, &path).unwrap();
        let (loaded, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(seed, 41);
        assert_eq!(loaded, model);
        let feature = [0.4, -0.9, 2.2, 0.0, -3.3];
        let (s1, i1, c1) = model.forward(&feature).unwrap();
        let (s2, i2, c2) = loaded.forward(&feature).unwrap();
        assert_eq!(s1.alpha(), s2.alpha());
        assert_eq!(i1.alpha(), i2.alpha());
        assert_eq!(c1.rates(), c2.rates());
    }
}
