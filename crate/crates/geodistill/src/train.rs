//! The two-stage training protocol: KL-divergence backbone pretraining
//! against the two ground categorical distributions, backbone freezing,
//! then joint negative log-likelihood training of the three heads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GeoRecord;
use crate::dist::sampling::standard_normal;
use crate::error::{Error, Result};
use crate::model::{
    adam_state_for, adam_step, kl_divergence_raw, softmax, Activation, AdamConfig, AdamState,
    DenseLayer, InputNorm, ModelConfig, ModelState, NllReport, WeightDecayMode,
};

fn default_epochs() -> usize {
    6
}

fn default_batch_size() -> usize {
    32
}

fn default_learning_rate() -> f64 {
    0.001
}

fn default_weight_decay() -> f64 {
    0.0005
}

fn default_head_loss_weights() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

fn default_shuffle() -> bool {
    true
}

fn default_decay_mode() -> WeightDecayMode {
    WeightDecayMode::Coupled
}

/// Optimization settings shared by pretraining and head training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_decay_mode")]
    pub decay_mode: WeightDecayMode,
    /// Scene, image, counts loss weights in the joint objective.
    #[serde(default = "default_head_loss_weights")]
    pub head_loss_weights: [f64; 3],
    /// Pretraining epoch count; defaults to `epochs` when absent. Zero
    /// skips pretraining entirely but still freezes the backbone.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shuffle")]
    pub shuffle: bool,
    /// Optional Gaussian noise added to features during training batches.
    /// Off by default; this is an extension knob, not part of the protocol.
    #[serde(default)]
    pub feature_jitter_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            decay_mode: default_decay_mode(),
            head_loss_weights: default_head_loss_weights(),
            pretrain_epochs: None,
            seed: 0,
            shuffle: default_shuffle(),
            feature_jitter_sigma: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config {
                field: "epochs",
                reason: "must be at least 1".into(),
            });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "batch_size",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config {
                field: "learning_rate",
                reason: format!("must be non-negative, got {}", self.learning_rate),
            });
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config {
                field: "weight_decay",
                reason: format!("must be non-negative, got {}", self.weight_decay),
            });
        }
        for &w in &self.head_loss_weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config {
                    field: "head_loss_weights",
                    reason: format!("must be non-negative, got {w}"),
                });
            }
        }
        if !(self.feature_jitter_sigma >= 0.0 && self.feature_jitter_sigma.is_finite()) {
            return Err(Error::Config {
                field: "feature_jitter_sigma",
                reason: format!("must be non-negative, got {}", self.feature_jitter_sigma),
            });
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }
}

/// Per-dimension mean and std over the training split, applied to every
/// feature entering the backbone. Stored in the checkpoint with the model.
pub fn fit_input_norm(records: &[GeoRecord]) -> Result<InputNorm> {
    let first = records.first().ok_or(Error::Empty { name: "records" })?;
    let dim = first.feature.len();
    let n = records.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in records {
        crate::error::ensure_dims("feature", dim, r.feature.len())?;
        for (acc, &v) in mean.iter_mut().zip(&r.feature) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in records {
        for (acc, (&v, &m)) in var.iter_mut().zip(r.feature.iter().zip(&mean)) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|&v| (v / n).sqrt().max(1e-12)).collect();
    Ok(InputNorm { mean, std })
}

/// Seeded epoch shuffle: the order is a pure function of (seed, epoch).
fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle && n > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch as u64));
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
    }
    order
}

fn jittered_features(
    records: &[&GeoRecord],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Vec<f64>>> {
    if sigma == 0.0 {
        return None;
    }
    Some(
        records
            .iter()
            .map(|r| {
                r.feature
                    .iter()
                    .map(|&v| v + sigma * standard_normal(rng))
                    .collect()
            })
            .collect(),
    )
}

/// Backbone plus the two temporary softmax projection heads used only
/// during pretraining.
struct PretrainNet {
    backbone: Vec<DenseLayer>,
    scene_proj: DenseLayer,
    image_proj: DenseLayer,
}

impl PretrainNet {
    /// Mean KL(ground ‖ predicted) summed over the two label spaces.
    fn mean_kl(&self, model: &ModelState, records: &[GeoRecord]) -> f64 {
        let mut total = 0.0;
        for r in records {
            let out = self.backbone_out(model, &r.feature);
            let (_, z_scene) = self.scene_proj.apply(&out);
            let (_, z_image) = self.image_proj.apply(&out);
            total += kl_divergence_raw(r.ground.scene_dist.values(), &softmax(&z_scene));
            total += kl_divergence_raw(r.ground.image_dist.values(), &softmax(&z_image));
        }
        total / records.len() as f64
    }

    fn backbone_out(&self, model: &ModelState, feature: &[f64]) -> Vec<f64> {
        let mut x = match &model.input_norm {
            Some(norm) => norm.apply(feature),
            None => feature.to_vec(),
        };
        for layer in &self.backbone {
            let (_, out) = layer.apply(&x);
            x = out;
        }
        x
    }
}

/// Stage one: train the backbone to predict the two ground categorical
/// distributions through temporary softmax heads, minimizing their summed
/// KL divergence, then freeze it and discard the heads.
///
/// Returns the model (backbone trained and frozen) and the mean KL over
/// `records` evaluated before training and after each epoch, so callers
/// can verify the loss actually fell.
pub fn pretrain_backbone(
    mut model: ModelState,
    records: &[GeoRecord],
    config: &TrainConfig,
) -> Result<(ModelState, Vec<f64>)> {
    config.validate()?;
    if model.backbone_frozen {
        return Err(Error::BackboneFrozen);
    }
    if records.is_empty() {
        return Err(Error::Empty {
            name: "pretraining records",
        });
    }
    let scene_dim = model.config.scene_dim;
    let image_dim = model.config.image_dim;
    let bb_out = model.config.backbone_out();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = PretrainNet {
        backbone: model.backbone.clone(),
        scene_proj: DenseLayer::xavier(scene_dim, bb_out, Activation::Identity, &mut init_rng),
        image_proj: DenseLayer::xavier(image_dim, bb_out, Activation::Identity, &mut init_rng),
    };

    let epochs = config.pretrain_epochs.unwrap_or(config.epochs);
    let mut kl_history = vec![net.mean_kl(&model, records)];

    let n_blocks = net.backbone.len() + 2;
    let mut adam = {
        let refs: Vec<&DenseLayer> = net
            .backbone
            .iter()
            .chain([&net.scene_proj, &net.image_proj])
            .collect();
        AdamState::for_layers(&refs, config.adam())
    };

    for epoch in 0..epochs {
        let order = epoch_order(records.len(), config.seed, epoch, config.shuffle);
        let mut jitter_rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64) ^ 0x4a69_7474);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&GeoRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let jittered =
                jittered_features(&batch, config.feature_jitter_sigma, &mut jitter_rng);
            let scale = 1.0 / batch.len() as f64;

            let mut grads: Vec<(Vec<f64>, Vec<f64>)> = net
                .backbone
                .iter()
                .chain([&net.scene_proj, &net.image_proj])
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect();

            for (b_idx, record) in batch.iter().enumerate() {
                let feature: &[f64] = match &jittered {
                    Some(j) => &j[b_idx],
                    None => &record.feature,
                };
                let x0 = match &model.input_norm {
                    Some(norm) => norm.apply(feature),
                    None => feature.to_vec(),
                };
                let mut activations = vec![x0];
                let mut pres = Vec::with_capacity(net.backbone.len());
                for layer in &net.backbone {
                    let (pre, out) = layer.apply(activations.last().expect("non-empty"));
                    pres.push(pre);
                    activations.push(out);
                }
                let out = activations.last().expect("non-empty").clone();

                let mut d_out = vec![0.0; bb_out];
                for (proj, target, g_idx) in [
                    (&net.scene_proj, record.ground.scene_dist.values(), n_blocks - 2),
                    (&net.image_proj, record.ground.image_dist.values(), n_blocks - 1),
                ] {
                    let (z_pre, z) = proj.apply(&out);
                    let q = softmax(&z);
                    // d KL(p ‖ softmax(z)) / dz = q − p
                    let dz: Vec<f64> = q
                        .iter()
                        .zip(target)
                        .map(|(&qi, &pi)| scale * (qi - pi))
                        .collect();
                    let (gw, gb) = &mut grads[g_idx];
                    let d_in = proj.backprop(&out, &z_pre, &dz, gw, gb);
                    for (acc, d) in d_out.iter_mut().zip(d_in) {
                        *acc += d;
                    }
                }
                let mut upstream = d_out;
                for (idx, layer) in net.backbone.iter().enumerate().rev() {
                    let (gw, gb) = &mut grads[idx];
                    upstream = layer.backprop(&activations[idx], &pres[idx], &upstream, gw, gb);
                }
            }

            adam.begin_step();
            for (idx, layer) in net
                .backbone
                .iter_mut()
                .chain([&mut net.scene_proj, &mut net.image_proj])
                .enumerate()
            {
                let (gw, gb) = &grads[idx];
                adam.update_layer(idx, layer, gw, gb, false);
            }
        }
        kl_history.push(net.mean_kl(&model, records));
    }

    model.backbone = net.backbone;
    model.backbone_frozen = true;
    Ok((model, kl_history))
}

/// One epoch's losses. `steps` counts optimizer updates taken that epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub train: NllReport,
    pub val: Option<NllReport>,
}

/// Stage two: minimize the weighted joint NLL over mini-batches with Adam.
/// Requires a frozen backbone; refuses to run otherwise.
pub fn train_heads(
    mut model: ModelState,
    train_records: &[GeoRecord],
    val_records: &[GeoRecord],
    config: &TrainConfig,
) -> Result<(ModelState, Vec<EpochStats>)> {
    config.validate()?;
    if !model.backbone_frozen {
        return Err(Error::BackboneNotFrozen);
    }
    if train_records.is_empty() {
        return Err(Error::Empty {
            name: "training records",
        });
    }
    let mut adam = adam_state_for(&model, config.adam());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let order = epoch_order(train_records.len(), config.seed, epoch, config.shuffle);
        let mut jitter_rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64) ^ 0x4a69_7474);
        let mut steps = 0;
        let mut sums = [0.0f64; 4];
        for chunk in order.chunks(config.batch_size) {
            let batch_records: Vec<&GeoRecord> = chunk.iter().map(|&i| &train_records[i]).collect();
            let jittered =
                jittered_features(&batch_records, config.feature_jitter_sigma, &mut jitter_rng);
            let batch: Vec<(&[f64], &crate::dataset::GroundSample)> = batch_records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    let feature: &[f64] = match &jittered {
                        Some(j) => &j[i],
                        None => &r.feature,
                    };
                    (feature, &r.ground)
                })
                .collect();
            let (grads, report) = model.backward(&batch, config.head_loss_weights)?;
            adam_step(&mut adam, &mut model, &grads)?;
            steps += 1;
            let w = batch.len() as f64;
            sums[0] += report.scene * w;
            sums[1] += report.image * w;
            sums[2] += report.counts * w;
            sums[3] += report.total * w;
        }
        let n = train_records.len() as f64;
        let train = NllReport {
            scene: sums[0] / n,
            image: sums[1] / n,
            counts: sums[2] / n,
            total: sums[3] / n,
        };
        let val = if val_records.is_empty() {
            None
        } else {
            Some(evaluate_nll(&model, val_records, config.head_loss_weights)?)
        };
        history.push(EpochStats {
            epoch: epoch + 1,
            steps,
            train,
            val,
        });
    }
    Ok((model, history))
}

/// Mean per-head NLLs over `records` and their weighted total, without
/// touching any weights.
pub fn evaluate_nll(
    model: &ModelState,
    records: &[GeoRecord],
    head_weights: [f64; 3],
) -> Result<NllReport> {
    if records.is_empty() {
        return Err(Error::Empty {
            name: "evaluation records",
        });
    }
    let mut sums = [0.0f64; 3];
    for r in records {
        let (s, i, c) = model.sample_nll(&r.feature, &r.ground)?;
        sums[0] += s;
        sums[1] += i;
        sums[2] += c;
    }
    let n = records.len() as f64;
    let scene = sums[0] / n;
    let image = sums[1] / n;
    let counts = sums[2] / n;
    Ok(NllReport {
        scene,
        image,
        counts,
        total: head_weights[0] * scene + head_weights[1] * image + head_weights[2] * counts,
    })
}

/// Output of the full two-stage protocol.
#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub model: ModelState,
    /// Mean pretraining KL before training and after each pretrain epoch.
    pub pretrain_kl: Vec<f64>,
    pub history: Vec<EpochStats>,
}

/// Run the whole protocol: Xavier init, input standardization from the
/// training split, KL pretraining, freeze, head training.
pub fn train_protocol(
    model_config: ModelConfig,
    train_records: &[GeoRecord],
    val_records: &[GeoRecord],
    config: &TrainConfig,
) -> Result<ProtocolOutput> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ModelState::init(model_config, &mut init_rng)?;
    model.input_norm = Some(fit_input_norm(train_records)?);
    let (model, pretrain_kl) = pretrain_backbone(model, train_records, config)?;
    let (model, history) = train_heads(model, train_records, val_records, config)?;
    Ok(ProtocolOutput {
        model,
        pretrain_kl,
        history,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write the per-epoch loss history as CSV.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(
        out,
        "epoch,train_scene_nll,train_image_nll,train_counts_nll,train_total_nll,\
         val_scene_nll,val_image_nll,val_counts_nll,val_total_nll"
    )?;
    for e in history {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch,
            e.train.scene,
            e.train.image,
            e.train.counts,
            e.train.total,
            fmt_opt(e.val.map(|v| v.scene)),
            fmt_opt(e.val.map(|v| v.image)),
            fmt_opt(e.val.map(|v| v.counts)),
            fmt_opt(e.val.map(|v| v.total)),
        )?;
    }
    out.flush()?;
    Ok(())
}
