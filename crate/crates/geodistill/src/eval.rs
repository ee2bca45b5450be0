//! The three downstream applications: cross-view retrieval, joint-attribute
//! location search, and localization with accuracy curves and heatmaps.
//!
//! Every query scores a ground-level sample against a reference database of
//! per-location predicted distribution parameters, one head at a time; heads
//! are never fused.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GeoBounds, GeoRecord, GroundSample};
use crate::dist::{smooth_simplex, DirichletParams, PoissonParams, DEFAULT_SIMPLEX_EPS};
use crate::error::{Error, Result};
use crate::model::ModelState;

/// Which probabilistic head scores a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelector {
    Scene,
    Image,
    Counts,
}

impl HeadSelector {
    pub const ALL: [HeadSelector; 3] = [Self::Scene, Self::Image, Self::Counts];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Scene => "scene",
            Self::Image => "image",
            Self::Counts => "counts",
        }
    }
}

impl FromStr for HeadSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scene" => Ok(Self::Scene),
            "image" => Ok(Self::Image),
            "counts" => Ok(Self::Counts),
            other => Err(Error::Config {
                field: "head",
                reason: format!("expected scene, image, or counts, got {other}"),
            }),
        }
    }
}

impl std::fmt::Display for HeadSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Predicted distribution parameters for one overhead location.
#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub scene: DirichletParams,
    pub image: DirichletParams,
    pub counts: PoissonParams,
}

/// All overhead entries with their predicted parameters, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDB {
    pub entries: Vec<DbEntry>,
}

impl ReferenceDB {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: u64) -> Option<&DbEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Run every record through the model and collect the predicted parameters.
/// Record order is preserved; duplicate ids are rejected.
pub fn build_reference_db(model: &ModelState, records: &[GeoRecord]) -> Result<ReferenceDB> {
    if records.is_empty() {
        return Err(Error::Empty { name: "records" });
    }
    let mut seen = HashSet::with_capacity(records.len());
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.id) {
            return Err(Error::DuplicateId { id: r.id });
        }
        let (scene, image, counts) = model.forward(&r.feature)?;
        entries.push(DbEntry {
            id: r.id,
            lat: r.lat,
            lon: r.lon,
            scene,
            image,
            counts,
        });
    }
    Ok(ReferenceDB { entries })
}

/// Log-probability of the ground sample under one entry's predicted
/// distribution for the chosen head. Categorical observations are smoothed
/// before Dirichlet evaluation.
pub fn score(ground: &GroundSample, entry: &DbEntry, head: HeadSelector) -> Result<f64> {
    match head {
        HeadSelector::Scene => {
            let obs = smooth_simplex(ground.scene_dist.values(), DEFAULT_SIMPLEX_EPS)?;
            entry.scene.log_pdf(&obs)
        }
        HeadSelector::Image => {
            let obs = smooth_simplex(ground.image_dist.values(), DEFAULT_SIMPLEX_EPS)?;
            entry.image.log_pdf(&obs)
        }
        HeadSelector::Counts => entry.counts.log_pmf(&ground.counts),
    }
}

/// Score the query against every entry, in entry order. Smoothing happens
/// once per query rather than once per entry.
fn score_all(ground: &GroundSample, db: &ReferenceDB, head: HeadSelector) -> Result<Vec<f64>> {
    match head {
        HeadSelector::Scene => {
            let obs = smooth_simplex(ground.scene_dist.values(), DEFAULT_SIMPLEX_EPS)?;
            db.entries.iter().map(|e| e.scene.log_pdf(&obs)).collect()
        }
        HeadSelector::Image => {
            let obs = smooth_simplex(ground.image_dist.values(), DEFAULT_SIMPLEX_EPS)?;
            db.entries.iter().map(|e| e.image.log_pdf(&obs)).collect()
        }
        HeadSelector::Counts => db
            .entries
            .iter()
            .map(|e| e.counts.log_pmf(&ground.counts))
            .collect(),
    }
}

/// The k best-scoring entries, descending by score, ties broken by
/// ascending id.
pub fn retrieve_topk(
    ground: &GroundSample,
    db: &ReferenceDB,
    head: HeadSelector,
    k: usize,
) -> Result<Vec<(u64, f64)>> {
    if k > db.len() {
        return Err(Error::KTooLarge { k, len: db.len() });
    }
    let scores = score_all(ground, db, head)?;
    let mut ranked: Vec<(u64, f64)> = db
        .entries
        .iter()
        .zip(scores)
        .map(|(e, s)| (e.id, s))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Fraction of other entries ranked above the true one, ties counted
/// against the query (they cannot inflate the result). 0 means the true
/// entry wins outright; 1 means everything beat it.
pub fn localize(
    ground: &GroundSample,
    true_id: u64,
    db: &ReferenceDB,
    head: HeadSelector,
) -> Result<f64> {
    let scores = score_all(ground, db, head)?;
    let true_idx = db
        .entries
        .iter()
        .position(|e| e.id == true_id)
        .ok_or(Error::UnknownId { id: true_id })?;
    if db.len() == 1 {
        return Ok(0.0);
    }
    let true_score = scores[true_idx];
    let higher = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != true_idx && s >= true_score)
        .count();
    Ok(higher as f64 / (db.len() - 1) as f64)
}

/// Like [`localize`] but with seeded random tie order instead of the
/// pessimistic rule, so degenerate all-tied databases yield uniform ranks.
/// Used by the calibration check.
pub fn localize_randomized<R: Rng>(
    ground: &GroundSample,
    true_id: u64,
    db: &ReferenceDB,
    head: HeadSelector,
    rng: &mut R,
) -> Result<f64> {
    let scores = score_all(ground, db, head)?;
    let true_idx = db
        .entries
        .iter()
        .position(|e| e.id == true_id)
        .ok_or(Error::UnknownId { id: true_id })?;
    if db.len() == 1 {
        return Ok(0.0);
    }
    let tiebreak: Vec<u64> = (0..db.len()).map(|_| rng.gen()).collect();
    let key = (scores[true_idx], tiebreak[true_idx]);
    let higher = scores
        .iter()
        .zip(&tiebreak)
        .enumerate()
        .filter(|&(i, (&s, &t))| i != true_idx && (s, t) > key)
        .count();
    Ok(higher as f64 / (db.len() - 1) as f64)
}

/// One point of a localization accuracy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Accuracy at increasing rank-error thresholds. Accuracy is
/// non-decreasing, and reaches 1 at threshold 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationCurve {
    pub points: Vec<CurvePoint>,
}

impl LocalizationCurve {
    pub fn accuracy_at(&self, threshold: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|p| (p.threshold - threshold).abs() < 1e-12)
            .map(|p| p.accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "threshold,accuracy")?;
        for p in &self.points {
            writeln!(out, "{},{}", p.threshold, p.accuracy)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evenly spaced thresholds 0.00, 0.01, …, 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// accuracy(t) = fraction of rank fractions ≤ t. Thresholds must lie in
/// [0, 1] and increase strictly.
pub fn accuracy_curve(ranks: &[f64], thresholds: &[f64]) -> Result<LocalizationCurve> {
    if ranks.is_empty() {
        return Err(Error::Empty { name: "ranks" });
    }
    if thresholds.is_empty() {
        return Err(Error::Empty { name: "thresholds" });
    }
    for pair in thresholds.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config {
                field: "thresholds",
                reason: format!("not strictly increasing at {} -> {}", pair[0], pair[1]),
            });
        }
    }
    if thresholds[0] < 0.0 || *thresholds.last().expect("non-empty") > 1.0 {
        return Err(Error::Config {
            field: "thresholds",
            reason: "must lie in [0, 1]".into(),
        });
    }
    let n = ranks.len() as f64;
    let points = thresholds
        .iter()
        .map(|&t| CurvePoint {
            threshold: t,
            accuracy: ranks.iter().filter(|&&r| r <= t).count() as f64 / n,
        })
        .collect();
    Ok(LocalizationCurve { points })
}

/// Score grid over a bounding box, row-major north to south. Each cell
/// holds the best score among entries falling inside it; cells without
/// entries hold the query's global minimum score.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatGrid {
    pub rows: usize,
    pub cols: usize,
    pub bounds: GeoBounds,
    pub values: Vec<f64>,
}

impl HeatGrid {
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Plain PGM (P2), 255 levels, min-max normalized over the grid.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "P2")?;
        writeln!(out, "{} {}", self.cols, self.rows)?;
        writeln!(out, "255")?;
        let min = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        for row in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|col| {
                    let v = self.value(row, col);
                    let level = if span > 0.0 {
                        ((v - min) / span * 255.0).round() as u32
                    } else {
                        0
                    };
                    level.to_string()
                })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Raw scores as CSV, one grid row per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for row in 0..self.rows {
            let line: Vec<String> = (0..self.cols)
                .map(|col| self.value(row, col).to_string())
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Georeferencing sidecar with the bounding box and grid shape.
    pub fn write_sidecar_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            rows: usize,
            cols: usize,
            bounds: &'a GeoBounds,
        }
        let mut body = serde_json::to_string_pretty(&Sidecar {
            rows: self.rows,
            cols: self.cols,
            bounds: &self.bounds,
        })?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Rasterize one query's scores over the database into a grid. Entries
/// outside the box are ignored.
pub fn heatmap(
    ground: &GroundSample,
    db: &ReferenceDB,
    head: HeadSelector,
    rows: usize,
    cols: usize,
    bounds: GeoBounds,
) -> Result<HeatGrid> {
    bounds.validate()?;
    if rows == 0 || cols == 0 {
        return Err(Error::Config {
            field: "grid",
            reason: "rows and cols must be positive".into(),
        });
    }
    let scores = score_all(ground, db, head)?;
    let fill = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut values = vec![fill; rows * cols];
    let lat_span = bounds.lat_max - bounds.lat_min;
    let lon_span = bounds.lon_max - bounds.lon_min;
    for (entry, &s) in db.entries.iter().zip(&scores) {
        if entry.lat < bounds.lat_min
            || entry.lat > bounds.lat_max
            || entry.lon < bounds.lon_min
            || entry.lon > bounds.lon_max
        {
            continue;
        }
        // Row 0 is the north edge.
        let row = (((bounds.lat_max - entry.lat) / lat_span) * rows as f64) as usize;
        let col = (((entry.lon - bounds.lon_min) / lon_span) * cols as f64) as usize;
        let row = row.min(rows - 1);
        let col = col.min(cols - 1);
        let cell = &mut values[row * cols + col];
        if s > *cell {
            *cell = s;
        }
    }
    Ok(HeatGrid {
        rows,
        cols,
        bounds,
        values,
    })
}

/// Expected mass of one label under an entry's predicted distribution:
/// the normalized Dirichlet mean for categorical heads, the raw rate for
/// the counts head.
pub fn label_score(entry: &DbEntry, head: HeadSelector, index: usize) -> Result<f64> {
    let check = |len: usize| -> Result<()> {
        if index >= len {
            return Err(Error::LabelIndex { index, len });
        }
        Ok(())
    };
    match head {
        HeadSelector::Scene => {
            check(entry.scene.len())?;
            Ok(entry.scene.mean().values()[index])
        }
        HeadSelector::Image => {
            check(entry.image.len())?;
            Ok(entry.image.mean().values()[index])
        }
        HeadSelector::Counts => {
            check(entry.counts.len())?;
            Ok(entry.counts.rates()[index])
        }
    }
}

/// One joint-attribute search result.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub primary_score: f64,
    pub secondary_score: f64,
}

/// Take the `top_n` entries by primary label score, then order that
/// selection by ascending secondary score. `top_n` is clamped to the
/// database size.
pub fn attribute_search(
    db: &ReferenceDB,
    primary: (HeadSelector, usize),
    secondary: (HeadSelector, usize),
    top_n: usize,
) -> Result<Vec<SearchHit>> {
    let mut hits: Vec<SearchHit> = db
        .entries
        .iter()
        .map(|e| {
            Ok(SearchHit {
                id: e.id,
                lat: e.lat,
                lon: e.lon,
                primary_score: label_score(e, primary.0, primary.1)?,
                secondary_score: label_score(e, secondary.0, secondary.1)?,
            })
        })
        .collect::<Result<_>>()?;
    hits.sort_by(|a, b| {
        b.primary_score
            .total_cmp(&a.primary_score)
            .then(a.id.cmp(&b.id))
    });
    hits.truncate(top_n.min(db.len()));
    hits.sort_by(|a, b| {
        a.secondary_score
            .total_cmp(&b.secondary_score)
            .then(a.id.cmp(&b.id))
    });
    Ok(hits)
}

/// id, lat, lon, score rows for retrieval results.
pub fn write_retrieval_csv(db: &ReferenceDB, results: &[(u64, f64)], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "id,lat,lon,score")?;
    for &(id, score) in results {
        let entry = db.entry(id).ok_or(Error::UnknownId { id })?;
        writeln!(out, "{},{},{},{}", id, entry.lat, entry.lon, score)?;
    }
    out.flush()?;
    Ok(())
}

/// id, lat, lon, and both label scores for search results.
pub fn write_search_csv(hits: &[SearchHit], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "id,lat,lon,primary_score,secondary_score")?;
    for h in hits {
        writeln!(
            out,
            "{},{},{},{},{}",
            h.id, h.lat, h.lon, h.primary_score, h.secondary_score
        )?;
    }
    out.flush()?;
    Ok(())
}
