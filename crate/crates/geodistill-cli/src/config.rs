//! Run configuration: one JSON file drives the whole pipeline, with CLI
//! flags overriding individual keys. Sub-seeds are derived from the global
//! seed so a single value reproduces every stage.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use geodistill::dataset::{GeoBounds, SplitFractions, WorldConfig};
use geodistill::eval::HeadSelector;
use geodistill::model::ModelConfig;
use geodistill::train::TrainConfig;
use serde::{Deserialize, Serialize};

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_split() -> SplitFractions {
    SplitFractions {
        train: 0.93,
        val: 0.02,
        test: 0.05,
    }
}

fn default_backbone_widths() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_head_hidden() -> usize {
    1024
}

fn default_link_floor() -> f64 {
    1e-6
}

/// Network shape without the data-dependent dimensions, which come from
/// the dataset header at train time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "default_backbone_widths")]
    pub backbone_widths: Vec<usize>,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_link_floor")]
    pub link_floor: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            backbone_widths: default_backbone_widths(),
            head_hidden: default_head_hidden(),
            link_floor: default_link_floor(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Defaults to out_dir/dataset.jsonl.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Defaults to out_dir/split_manifest.json.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Defaults to out_dir/checkpoint.json.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub world: WorldConfig,
    #[serde(default = "default_split")]
    pub split: SplitFractions,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: RunConfig = serde_json::from_str(&body)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.apply_seed();
        Ok(config)
    }

    /// Derive stage seeds from the global seed: world = seed,
    /// split = seed + 1, training = seed + 2.
    pub fn apply_seed(&mut self) {
        self.world.seed = self.seed;
        self.train.seed = self.seed.wrapping_add(2);
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.jsonl"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.manifest
            .clone()
            .unwrap_or_else(|| self.out_dir.join("split_manifest.json"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.json"))
    }

    /// Combine the configured network shape with the dimensions a dataset
    /// actually carries.
    pub fn model_config(
        &self,
        feature_dim: usize,
        scene_dim: usize,
        image_dim: usize,
        count_dim: usize,
    ) -> ModelConfig {
        ModelConfig {
            feature_dim,
            backbone_widths: self.network.backbone_widths.clone(),
            head_hidden: self.network.head_hidden,
            scene_dim,
            image_dim,
            count_dim,
            link_floor: self.network.link_floor,
        }
    }
}

/// Which split each record id belongs to; written by `generate`, consumed
/// by `train` and `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: SplitFractions,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

/// A head/label pair like `scene:3` or `counts:0`.
#[derive(Debug, Clone, Copy)]
pub struct LabelRef {
    pub head: HeadSelector,
    pub index: usize,
}

impl FromStr for LabelRef {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some((head, index)) = s.split_once(':') else {
            bail!("expected head:index (e.g. scene:3), got {s}");
        };
        Ok(LabelRef {
            head: head.parse()?,
            index: index
                .parse()
                .with_context(|| format!("label index in {s}"))?,
        })
    }
}

/// A bounding box as `lat_min,lat_max,lon_min,lon_max`.
#[derive(Debug, Clone, Copy)]
pub struct BoundsArg(pub GeoBounds);

impl FromStr for BoundsArg {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 4 {
            bail!("expected lat_min,lat_max,lon_min,lon_max, got {s}");
        }
        let mut values = [0.0f64; 4];
        for (v, part) in values.iter_mut().zip(&parts) {
            *v = part.trim().parse().with_context(|| format!("bounds component {part}"))?;
        }
        Ok(BoundsArg(GeoBounds {
            lat_min: values[0],
            lat_max: values[1],
            lon_min: values[2],
            lon_max: values[3],
        }))
    }
}
