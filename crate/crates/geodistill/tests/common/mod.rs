//! Shared fixtures and independent oracles for the integration suites.
//!
//! The oracles here deliberately avoid the library's analytic derivative
//! and normalization code paths: gradients are checked against central
//! difference quotients of the log-densities, and Dirichlet normalization
//! against direct numerical integration over the simplex.

#![allow(dead_code)]

use geodistill::dataset::{
    generate_world, split_dataset, DatasetSplit, GeoBounds, GeoRecord, GroundSample,
    SplitFractions, WorldConfig,
};
use geodistill::dist::{CountVector, DirichletParams, SimplexVector};
use geodistill::model::{ModelConfig, ModelState};
use geodistill::train::{
    fit_input_norm, pretrain_backbone, train_heads, EpochStats, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

pub const DESK_SEED: u64 = 7;
pub const DESK_SPLIT_SEED: u64 = 8;
pub const DESK_TRAIN_SEED: u64 = 9;

/// Mirrors configs/desk-scale.json: 20 classes, 2000 records, d = 32,
/// label spaces 16/24, 8 count classes, hidden width 64.
pub fn desk_world_config() -> WorldConfig {
    WorldConfig {
        num_classes: 20,
        num_records: 2000,
        feature_dim: 32,
        scene_dim: 16,
        image_dim: 24,
        count_dim: 8,
        feature_noise_sigma: 1.2,
        class_alpha_scale: 16.0,
        class_rate_scale: 8.0,
        class_geo_sigma: 0.35,
        geo_extent: GeoBounds {
            lat_min: 24.0,
            lat_max: 49.0,
            lon_min: -125.0,
            lon_max: -66.0,
        },
        seed: DESK_SEED,
    }
}

pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 32,
        backbone_widths: vec![128, 128, 128],
        head_hidden: 64,
        scene_dim: 16,
        image_dim: 24,
        count_dim: 8,
        link_floor: 1e-6,
    }
}

pub fn desk_split_fractions() -> SplitFractions {
    SplitFractions {
        train: 0.93,
        val: 0.02,
        test: 0.05,
    }
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        seed: DESK_TRAIN_SEED,
        ..TrainConfig::default()
    }
}

/// One desk-scale dataset + trained model, built once and shared by the
/// acceptance checks. Construction is staged so the frozen backbone can
/// be compared before and after head training.
pub struct DeskFixture {
    pub records: Vec<GeoRecord>,
    pub split: DatasetSplit,
    pub pretrain_kl: Vec<f64>,
    pub backbone_after_pretrain: Vec<geodistill::model::DenseLayer>,
    pub model: ModelState,
    pub history: Vec<EpochStats>,
}

pub fn desk_fixture() -> &'static DeskFixture {
    static FIXTURE: OnceLock<DeskFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let records = generate_world(&desk_world_config()).unwrap();
        let split =
            split_dataset(records.clone(), desk_split_fractions(), DESK_SPLIT_SEED).unwrap();
        let config = desk_train_config();
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut model = ModelState::init(desk_model_config(), &mut init_rng).unwrap();
        model.input_norm = Some(fit_input_norm(&split.train).unwrap());
        let (model, pretrain_kl) = pretrain_backbone(model, &split.train, &config).unwrap();
        let backbone_after_pretrain = model.backbone.clone();
        let (model, history) = train_heads(model, &split.train, &split.val, &config).unwrap();
        DeskFixture {
            records,
            split,
            pretrain_kl,
            backbone_after_pretrain,
            model,
            history,
        }
    })
}

/// Central difference quotient.
pub fn central_diff<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Richardson extrapolation of the central difference.
pub fn central_diff_richardson<F: Fn(f64) -> f64 + Copy>(f: F, x: f64, h: f64) -> f64 {
    (4.0 * central_diff(f, x, h / 2.0) - central_diff(f, x, h)) / 3.0
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Numerically integrate exp(log_pdf) of a 3-component Dirichlet over the
/// 2-simplex on a 400-step barycentric grid. The grid is warped through
/// t = sin²θ per axis so the integrand stays bounded at the simplex edges
/// where concentrations below 1 diverge; the midpoint rule then holds the
/// stated 1e-3 accuracy across α ∈ [0.5, 5].
pub fn dirichlet_quadrature_k3(params: &DirichletParams, steps: usize) -> f64 {
    assert_eq!(params.len(), 3);
    let h = std::f64::consts::FRAC_PI_2 / steps as f64;
    let mut total = 0.0;
    for i in 0..steps {
        let phi = (i as f64 + 0.5) * h;
        let (sin_phi, cos_phi) = phi.sin_cos();
        let x = sin_phi * sin_phi;
        let jac_phi = 2.0 * sin_phi * cos_phi * (1.0 - x);
        for j in 0..steps {
            let theta = (j as f64 + 0.5) * h;
            let (sin_theta, cos_theta) = theta.sin_cos();
            let w = sin_theta * sin_theta;
            let y = (1.0 - x) * w;
            let z = (1.0 - x) * (1.0 - w);
            let point = SimplexVector::new(vec![x, y, z]).unwrap();
            let density = params.log_pdf(&point).unwrap().exp();
            total += density * jac_phi * 2.0 * sin_theta * cos_theta * h * h;
        }
    }
    total
}

/// Tiny network used by the gradient-oracle checks.
pub fn tiny_model_config() -> ModelConfig {
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

pub fn random_simplex<R: Rng>(k: usize, rng: &mut R) -> SimplexVector {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    SimplexVector::new(raw.iter().map(|v| v / total).collect()).unwrap()
}

pub fn tiny_batch(seed: u64, n: usize) -> Vec<(Vec<f64>, GroundSample)> {
    let config = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let feature: Vec<f64> = (0..config.feature_dim)
                .map(|_| rng.gen_range(-1.5..1.5))
                .collect();
            let ground = GroundSample {
                scene_dist: random_simplex(config.scene_dim, &mut rng),
                image_dist: random_simplex(config.image_dim, &mut rng),
                counts: CountVector::new(
                    (0..config.count_dim).map(|_| rng.gen_range(0..6)).collect(),
                ),
            };
            (feature, ground)
        })
        .collect()
}

/// Joint loss of the tiny batch via the forward path only; the gradient
/// check differentiates this numerically.
pub fn batch_loss(model: &ModelState, batch: &[(Vec<f64>, GroundSample)]) -> f64 {
    let scale = 1.0 / batch.len() as f64;
    batch
        .iter()
        .map(|(f, g)| {
            let (s, i, c) = model.sample_nll(f, g).unwrap();
            (s + i + c) * scale
        })
        .sum()
}

/// Read or nudge one scalar parameter, addressed by (layer, flat index).
pub fn param_access(model: &mut ModelState, layer_idx: usize, p: usize, set: Option<f64>) -> f64 {
    let mut layers = model.layers_mut();
    let layer = &mut layers[layer_idx];
    let n_w = layer.weights.len();
    let slot = if p < n_w {
        &mut layer.weights[p]
    } else {
        &mut layer.bias[p - n_w]
    };
    let old = *slot;
    if let Some(v) = set {
        *slot = v;
    }
    old
}
