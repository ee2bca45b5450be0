//! One function per subcommand. Each writes its declared outputs under the
//! run's output directory and never mutates an input file.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use geodistill::dataset::{
    generate_world, load_records, save_records, split_dataset, GeoRecord,
};
use geodistill::eval::{
    accuracy_curve, attribute_search, build_reference_db, default_thresholds, heatmap, localize,
    retrieve_topk, write_retrieval_csv, write_search_csv, HeadSelector, ReferenceDB,
};
use geodistill::model::{load_checkpoint, save_checkpoint, ModelState, NllReport};
use geodistill::train::{evaluate_nll, train_protocol, write_history_csv};
use serde::Serialize;

use crate::config::{BoundsArg, LabelRef, RunConfig, SplitManifest};

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_out_dir(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))
}

/// Generate the synthetic world, store it as JSONL, and record the split.
pub fn cmd_generate(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let records = generate_world(&config.world)?;
    let dataset_path = config.dataset_path();
    save_records(&records, &dataset_path)?;
    let split = split_dataset(records, config.split, config.split_seed())?;
    let ids = |part: &[GeoRecord]| part.iter().map(|r| r.id).collect();
    let manifest = SplitManifest {
        seed: config.split_seed(),
        fractions: config.split,
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    };
    write_json(&manifest, &config.manifest_path())?;
    println!(
        "generate: {} records ({} train / {} val / {} test) -> {}",
        manifest.train.len() + manifest.val.len() + manifest.test.len(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len(),
        dataset_path.display()
    );
    Ok(())
}

struct LoadedSplits {
    records: Vec<GeoRecord>,
    train: Vec<GeoRecord>,
    val: Vec<GeoRecord>,
    test: Vec<GeoRecord>,
}

fn load_splits(config: &RunConfig) -> Result<LoadedSplits> {
    let dataset_path = config.dataset_path();
    let records = load_records(&dataset_path)
        .with_context(|| format!("loading dataset {}", dataset_path.display()))?;
    let manifest_path = config.manifest_path();
    let body = std::fs::read_to_string(&manifest_path)
        .with_context(|| format!("loading split manifest {}", manifest_path.display()))?;
    let manifest: SplitManifest = serde_json::from_str(&body)
        .with_context(|| format!("parsing split manifest {}", manifest_path.display()))?;
    let by_id: HashMap<u64, &GeoRecord> = records.iter().map(|r| (r.id, r)).collect();
    let take = |ids: &[u64]| -> Result<Vec<GeoRecord>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|r| (*r).clone())
                    .ok_or_else(|| anyhow!("manifest id {id} not present in dataset"))
            })
            .collect()
    };
    Ok(LoadedSplits {
        train: take(&manifest.train)?,
        val: take(&manifest.val)?,
        test: take(&manifest.test)?,
        records,
    })
}

/// Run the two-stage protocol and write the checkpoint plus loss history.
pub fn cmd_train(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let splits = load_splits(config)?;
    let first = splits
        .records
        .first()
        .ok_or_else(|| anyhow!("dataset is empty"))?;
    let model_config = config.model_config(
        first.feature.len(),
        first.ground.scene_dist.len(),
        first.ground.image_dist.len(),
        first.ground.counts.len(),
    );
    let result = train_protocol(model_config, &splits.train, &splits.val, &config.train)?;
    let checkpoint_path = config.checkpoint_path();
    save_checkpoint(&result.model, config.seed, &checkpoint_path)?;
    write_history_csv(&result.history, &config.out_dir.join("history.csv"))?;

    let kl_path = config.out_dir.join("pretrain_kl.csv");
    let mut kl_csv = String::from("epoch,mean_kl\n");
    for (epoch, kl) in result.pretrain_kl.iter().enumerate() {
        kl_csv.push_str(&format!("{epoch},{kl}\n"));
    }
    std::fs::write(&kl_path, kl_csv)?;

    let initial_kl = result.pretrain_kl.first().copied().unwrap_or(f64::NAN);
    let final_kl = result.pretrain_kl.last().copied().unwrap_or(f64::NAN);
    let last = result.history.last();
    println!(
        "train: pretrain kl {initial_kl:.4} -> {final_kl:.4}; final train nll {:.4}; checkpoint {}",
        last.map(|e| e.train.total).unwrap_or(f64::NAN),
        checkpoint_path.display()
    );
    Ok(())
}

fn load_model(config: &RunConfig) -> Result<ModelState> {
    let path = config.checkpoint_path();
    let (model, _) =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct NllReportFile {
    train: NllReport,
    val: Option<NllReport>,
    test: NllReport,
}

/// NLL report over the splits, plus per-head localization accuracy curves
/// for the test queries against a reference database of every record.
pub fn cmd_eval(config: &RunConfig) -> Result<()> {
    ensure_out_dir(config)?;
    let splits = load_splits(config)?;
    let model = load_model(config)?;
    let weights = config.train.head_loss_weights;
    let report = NllReportFile {
        train: evaluate_nll(&model, &splits.train, weights)?,
        val: if splits.val.is_empty() {
            None
        } else {
            Some(evaluate_nll(&model, &splits.val, weights)?)
        },
        test: evaluate_nll(&model, &splits.test, weights)?,
    };
    write_json(&report, &config.out_dir.join("nll_report.json"))?;

    let db = build_reference_db(&model, &splits.records)?;
    let thresholds = default_thresholds();
    for head in HeadSelector::ALL {
        let ranks: Vec<f64> = splits
            .test
            .iter()
            .map(|r| localize(&r.ground, r.id, &db, head))
            .collect::<geodistill::Result<_>>()?;
        let curve = accuracy_curve(&ranks, &thresholds)?;
        let path = config.out_dir.join(format!("curve_{}.csv", head.name()));
        curve.write_csv(&path)?;
        println!(
            "eval: {head} accuracy@0.01 {:.4}, @0.05 {:.4} -> {}",
            curve.accuracy_at(0.01).unwrap_or(f64::NAN),
            curve.accuracy_at(0.05).unwrap_or(f64::NAN),
            path.display()
        );
    }
    println!(
        "eval: test nll scene {:.4} image {:.4} counts {:.4} total {:.4}",
        report.test.scene, report.test.image, report.test.counts, report.test.total
    );
    Ok(())
}

fn reference_db(config: &RunConfig) -> Result<(Vec<GeoRecord>, ModelState, ReferenceDB)> {
    let dataset_path = config.dataset_path();
    let records = load_records(&dataset_path)
        .with_context(|| format!("loading dataset {}", dataset_path.display()))?;
    let model = load_model(config)?;
    let db = build_reference_db(&model, &records)?;
    Ok((records, model, db))
}

/// Score one record's ground signal against every location and keep the
/// k best.
pub fn cmd_retrieve(config: &RunConfig, query_id: u64, head: HeadSelector, k: usize) -> Result<()> {
    ensure_out_dir(config)?;
    let (records, _, db) = reference_db(config)?;
    let query = records
        .iter()
        .find(|r| r.id == query_id)
        .ok_or_else(|| anyhow!("query id {query_id} not present in dataset"))?;
    let results = retrieve_topk(&query.ground, &db, head, k)?;
    let path = config.out_dir.join("retrieval.csv");
    write_retrieval_csv(&db, &results, &path)?;
    println!(
        "retrieve: query {query_id} head {head} top-{k} -> {} (best id {} score {:.4})",
        path.display(),
        results.first().map(|r| r.0).unwrap_or_default(),
        results.first().map(|r| r.1).unwrap_or(f64::NAN),
    );
    Ok(())
}

/// Rank locations by one label's expected mass, then order the winners by
/// a second label.
pub fn cmd_search(
    config: &RunConfig,
    primary: LabelRef,
    secondary: LabelRef,
    top_n: usize,
) -> Result<()> {
    ensure_out_dir(config)?;
    let (_, _, db) = reference_db(config)?;
    let hits = attribute_search(
        &db,
        (primary.head, primary.index),
        (secondary.head, secondary.index),
        top_n,
    )?;
    let path = config.out_dir.join("search.csv");
    write_search_csv(&hits, &path)?;
    println!("search: {} hits -> {}", hits.len(), path.display());
    Ok(())
}

/// Rasterize one query's scores over a geographic grid.
pub fn cmd_heatmap(
    config: &RunConfig,
    query_id: u64,
    head: HeadSelector,
    rows: usize,
    cols: usize,
    bounds: Option<BoundsArg>,
) -> Result<()> {
    ensure_out_dir(config)?;
    let (records, _, db) = reference_db(config)?;
    let query = records
        .iter()
        .find(|r| r.id == query_id)
        .ok_or_else(|| anyhow!("query id {query_id} not present in dataset"))?;
    let bounds = bounds.map(|b| b.0).unwrap_or(config.world.geo_extent);
    let grid = heatmap(&query.ground, &db, head, rows, cols, bounds)?;
    let pgm = config.out_dir.join("heatmap.pgm");
    grid.write_pgm(&pgm)?;
    grid.write_csv(&config.out_dir.join("heatmap.csv"))?;
    grid.write_sidecar_json(&config.out_dir.join("heatmap.json"))?;
    println!(
        "heatmap: query {query_id} head {head} {rows}x{cols} -> {}",
        pgm.display()
    );
    Ok(())
}
