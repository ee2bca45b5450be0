//! Synthetic geo-world generation, paired-feature ingestion, and the
//! train/validation/test split.
//!
//! Each record pairs an overhead feature vector with the co-located
//! ground-level supervision signal: two categorical distributions plus an
//! object-count histogram. The generator plants latent classes with their
//! own feature prototype, Dirichlet concentrations, Poisson rates, and a
//! geographic center, so nearby records share label statistics.
//!
//! Storage is line-delimited JSON: one header line carrying the
//! dimensions, then one record per line, floats at full round-trip
//! precision, UTF-8, LF line endings.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::sampling::standard_normal;
use crate::dist::{CountVector, DirichletParams, PoissonParams, SimplexVector};
use crate::error::{Error, Result};

/// Ground-level supervision for one location.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundSample {
    pub scene_dist: SimplexVector,
    pub image_dist: SimplexVector,
    pub counts: CountVector,
}

/// One overhead/ground pair. `latent_class` is populated only by the
/// synthetic generator; ingested data leaves it empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeoRecord {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub feature: Vec<f64>,
    #[serde(flatten)]
    pub ground: GroundSample,
    pub latent_class: Option<u32>,
}

/// Geographic bounding box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl GeoBounds {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::Config {
                field: "geo_extent",
                reason: format!(
                    "degenerate box lat [{}, {}] lon [{}, {}]",
                    self.lat_min, self.lat_max, self.lon_min, self.lon_max
                ),
            });
        }
        Ok(())
    }
}

fn default_class_geo_sigma() -> f64 {
    0.35
}

fn default_class_rate_scale() -> f64 {
    8.0
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub num_records: usize,
    pub feature_dim: usize,
    pub scene_dim: usize,
    pub image_dim: usize,
    pub count_dim: usize,
    /// Std-dev of the Gaussian added to each class prototype feature.
    pub feature_noise_sigma: f64,
    /// Multiplier on the per-class Dirichlet concentrations; larger values
    /// concentrate samples around the class mean.
    pub class_alpha_scale: f64,
    /// Upper end of the uniform range for per-class Poisson rates.
    #[serde(default = "default_class_rate_scale")]
    pub class_rate_scale: f64,
    /// Std-dev in degrees of record locations around their class center.
    #[serde(default = "default_class_geo_sigma")]
    pub class_geo_sigma: f64,
    pub geo_extent: GeoBounds,
    #[serde(default)]
    pub seed: u64,
}

impl WorldConfig {
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
        positive("num_classes", self.num_classes)?;
        positive("num_records", self.num_records)?;
        positive("feature_dim", self.feature_dim)?;
        positive("count_dim", self.count_dim)?;
        if self.scene_dim < 2 || self.image_dim < 2 {
            return Err(Error::Config {
                field: "scene_dim/image_dim",
                reason: "categorical label spaces need at least 2 classes".into(),
            });
        }
        for (field, v) in [
            ("feature_noise_sigma", self.feature_noise_sigma),
            ("class_geo_sigma", self.class_geo_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config {
                    field,
                    reason: format!("must be a non-negative finite number, got {v}"),
                });
            }
        }
        for (field, v) in [
            ("class_alpha_scale", self.class_alpha_scale),
            ("class_rate_scale", self.class_rate_scale),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config {
                    field,
                    reason: format!("must be a positive finite number, got {v}"),
                });
            }
        }
        self.geo_extent.validate()
    }
}

/// Parameters of one latent class, reproducible from the world config.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClass {
    pub prototype: Vec<f64>,
    pub scene_alpha: DirichletParams,
    pub image_alpha: DirichletParams,
    pub rates: PoissonParams,
    pub center_lat: f64,
    pub center_lon: f64,
}

/// The latent classes a config's seed produces. Classes are drawn before
/// any record, so this matches what [`generate_world`] used.
pub fn world_classes(config: &WorldConfig) -> Result<Vec<LatentClass>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(sample_classes(config, &mut rng))
}

fn sample_classes(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<LatentClass> {
    let extent = &config.geo_extent;
    (0..config.num_classes)
        .map(|_| {
            let prototype = (0..config.feature_dim)
                .map(|_| standard_normal(rng))
                .collect();
            let alpha = |k: usize, rng: &mut ChaCha8Rng| {
                DirichletParams::new(
                    (0..k)
                        .map(|_| config.class_alpha_scale * rng.gen_range(0.05..1.0))
                        .collect(),
                )
                .expect("scaled uniform draws are positive")
            };
            let scene_alpha = alpha(config.scene_dim, rng);
            let image_alpha = alpha(config.image_dim, rng);
            let rates = PoissonParams::new(
                (0..config.count_dim)
                    .map(|_| rng.gen_range(0.1..config.class_rate_scale))
                    .collect(),
            )
            .expect("uniform draws above 0.1 are positive");
            let center_lat = rng.gen_range(extent.lat_min..extent.lat_max);
            let center_lon = rng.gen_range(extent.lon_min..extent.lon_max);
            LatentClass {
                prototype,
                scene_alpha,
                image_alpha,
                rates,
                center_lat,
                center_lon,
            }
        })
        .collect()
}

/// Generate a deterministic synthetic world: latent classes first, then
/// records assigned uniformly to classes, with features, locations, and
/// ground samples drawn from the class parameters.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<GeoRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let classes = sample_classes(config, &mut rng);

    let records = (0..config.num_records)
        .map(|i| {
            let class_idx = rng.gen_range(0..config.num_classes);
            let class = &classes[class_idx];
            let lat = class.center_lat + config.class_geo_sigma * standard_normal(&mut rng);
            let lon = class.center_lon + config.class_geo_sigma * standard_normal(&mut rng);
            let feature = class
                .prototype
                .iter()
                .map(|&p| p + config.feature_noise_sigma * standard_normal(&mut rng))
                .collect();
            GeoRecord {
                id: i as u64,
                lat,
                lon,
                feature,
                ground: GroundSample {
                    scene_dist: class.scene_alpha.sample(&mut rng),
                    image_dist: class.image_alpha.sample(&mut rng),
                    counts: class.rates.sample(&mut rng),
                },
                latent_class: Some(class_idx as u32),
            }
        })
        .collect();
    Ok(records)
}

/// Train/validation/test proportions. Each must be strictly positive and
/// they must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions { sum });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<GeoRecord>,
    pub val: Vec<GeoRecord>,
    pub test: Vec<GeoRecord>,
}

/// Seeded shuffled partition. Split sizes are ⌊N·f⌋ per split with the
/// flooring remainder assigned to the training portion.
pub fn split_dataset(
    records: Vec<GeoRecord>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplit> {
    fractions.validate()?;
    let n = records.len();
    let n_train_floor = (n as f64 * fractions.train).floor() as usize;
    let n_val = (n as f64 * fractions.val).floor() as usize;
    let n_test = (n as f64 * fractions.test).floor() as usize;
    let n_train = n - n_val - n_test; // floor remainder goes to train
    debug_assert!(n_train >= n_train_floor);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut slots: Vec<Option<GeoRecord>> = records.into_iter().map(Some).collect();
    let mut take = |indices: &[usize]| -> Vec<GeoRecord> {
        indices
            .iter()
            .map(|&i| slots[i].take().expect("each index moved once"))
            .collect()
    };
    Ok(DatasetSplit {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

const DATASET_FORMAT: &str = "geodistill.dataset";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    feature_dim: usize,
    scene_dim: usize,
    image_dim: usize,
    count_dim: usize,
    num_records: usize,
}

/// Raw wire form of a record; validated field by field on load so errors
/// can name the offending line and field.
#[derive(Debug, Deserialize)]
struct RawRecord {
    id: u64,
    lat: f64,
    lon: f64,
    feature: Vec<f64>,
    scene_dist: Vec<f64>,
    image_dist: Vec<f64>,
    counts: Vec<u32>,
    #[serde(default)]
    latent_class: Option<u32>,
}

/// Write records as JSONL: a header line with the dimensions, then one
/// record per line.
pub fn save_records(records: &[GeoRecord], path: &Path) -> Result<()> {
    let first = records.first().ok_or(Error::Empty { name: "records" })?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: 1,
        feature_dim: first.feature.len(),
        scene_dim: first.ground.scene_dist.len(),
        image_dim: first.ground.image_dist.len(),
        count_dim: first.ground.counts.len(),
        num_records: records.len(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load a JSONL dataset, validating every record against the header
/// dimensions and the simplex/count invariants. Errors carry the file
/// path, 1-based line number, and the failing field.
pub fn load_records(path: &Path) -> Result<Vec<GeoRecord>> {
    let display = path.display().to_string();
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: display.clone(),
        line,
        detail,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header line".into()))?;
    let header: DatasetHeader = serde_json::from_str(&header_line?)
        .map_err(|e| parse_err(1, format!("header: {e}")))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(
            1,
            format!("header: expected format {DATASET_FORMAT}, found {}", header.format),
        ));
    }

    let mut records = Vec::with_capacity(header.num_records);
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| parse_err(line_no, format!("record: {e}")))?;
        let check_dim = |field: &str, expected: usize, actual: usize| -> Result<()> {
            if expected != actual {
                return Err(parse_err(
                    line_no,
                    format!("{field}: expected {expected} components per header, got {actual}"),
                ));
            }
            Ok(())
        };
        check_dim("feature", header.feature_dim, raw.feature.len())?;
        check_dim("scene_dist", header.scene_dim, raw.scene_dist.len())?;
        check_dim("image_dist", header.image_dim, raw.image_dist.len())?;
        check_dim("counts", header.count_dim, raw.counts.len())?;
        for (i, &f) in raw.feature.iter().enumerate() {
            if !f.is_finite() {
                return Err(parse_err(line_no, format!("feature[{i}]: not finite")));
            }
        }
        if !raw.lat.is_finite() || !raw.lon.is_finite() {
            return Err(parse_err(line_no, "lat/lon: not finite".into()));
        }
        let scene_dist = SimplexVector::new(raw.scene_dist)
            .map_err(|e| parse_err(line_no, format!("scene_dist: {e}")))?;
        let image_dist = SimplexVector::new(raw.image_dist)
            .map_err(|e| parse_err(line_no, format!("image_dist: {e}")))?;
        records.push(GeoRecord {
            id: raw.id,
            lat: raw.lat,
            lon: raw.lon,
            feature: raw.feature,
            ground: GroundSample {
                scene_dist,
                image_dist,
                counts: CountVector::new(raw.counts),
            },
            latent_class: raw.latent_class,
        });
    }
    if records.len() != header.num_records {
        return Err(parse_err(
            1,
            format!(
                "header: num_records {} but file holds {}",
                header.num_records,
                records.len()
            ),
        ));
    }
    Ok(records)
}
