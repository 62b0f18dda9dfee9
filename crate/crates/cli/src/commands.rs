use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use hssn_core::datapipe::{generate_synthetic, kfold_split};
use hssn_core::evaluator::{self, EvalResults};
use hssn_core::experiment::{run_experiment, ExperimentOptions};
use hssn_core::{Dataset, Error, FoldSplit, Manifest, Model, TrainConfig};

use crate::Overrides;

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

fn settle(o: &Overrides) -> Result<TrainConfig> {
    let mut cfg = load_config(o.config.as_deref())?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = o.batch_size {
        cfg.batch_size = b;
    }
    if o.triplets_per_epoch.is_some() {
        cfg.triplets_per_epoch = o.triplets_per_epoch;
    }
    if let Some(w) = o.w1 {
        cfg.loss.w1 = w;
    }
    if let Some(w) = o.w2 {
        cfg.loss.w2 = w;
    }
    if let Some(k) = o.k {
        cfg.k_folds = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(manifest: &Path, input_shape: [usize; 3]) -> Result<Dataset> {
    let m = Manifest::load(manifest)?;
    Ok(Dataset::load(m, input_shape)?)
}

/// The requested fold, or a pseudo-fold that trains and tests on everything.
fn select_fold(data: &Dataset, fold: Option<usize>, k: usize, seed: u64) -> Result<FoldSplit> {
    let ids = data.manifest.complete_outfit_ids();
    match fold {
        None => {
            let all: std::collections::BTreeSet<String> = ids.into_iter().collect();
            Ok(FoldSplit {
                fold_index: 0,
                train_outfits: all.clone(),
                test_outfits: all,
            })
        }
        Some(i) => {
            let mut folds = kfold_split(&ids, k, seed)?;
            if i >= folds.len() {
                return Err(Error::Config(format!("fold: index {i} out of range for k = {k}")).into());
            }
            Ok(folds.swap_remove(i))
        }
    }
}

pub fn gen_synth(out: &Path, outfits: usize, size: usize, families: usize, seed: u64) -> Result<()> {
    let manifest = generate_synthetic(out, outfits, size, families, seed)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn init(settings: &Overrides, out: &Path) -> Result<()> {
    let cfg = settle(settings)?;
    Model::new(cfg.model, cfg.seed)?.save(out)?;
    println!("{}", out.display());
    Ok(())
}

pub fn train(settings: &Overrides, manifest: &Path, fold: Option<usize>, out: &Path) -> Result<()> {
    let mut cfg = settle(settings)?;
    cfg.checkpoint_dir = Some(out.to_path_buf());
    cfg.log_path = Some(out.join("log.jsonl"));
    let data = load_data(manifest, cfg.model.input_shape)?;
    let split = select_fold(&data, fold, cfg.k_folds, cfg.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = hssn_core::trainer::train(&cfg, &data, &split)?;
    let ckpt = outcome.final_checkpoint.expect("checkpoint dir was set");
    println!("{}", ckpt.display());
    if let Some(last) = outcome.log.last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

pub fn eval(
    ckpt: &Path,
    manifest: &Path,
    fold: Option<usize>,
    seed: u64,
    k: usize,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let expected = match config {
        Some(p) => Some(load_config(Some(p))?.model),
        None => None,
    };
    let model = Model::load(ckpt, expected.as_ref())?;
    let data = load_data(manifest, model.config().input_shape)?;
    let split = select_fold(&data, fold, k, seed)?;
    let results: EvalResults = evaluator::evaluate_fold(&model, &data, &split)?;
    results.write(out)?;
    println!("{}", out.display());
    println!(
        "{}",
        serde_json::json!({"map_normalized": results.map_normalized, "n_pairs": results.n_pairs})
    );
    Ok(())
}

pub fn embed(ckpt: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let model = Model::load(ckpt, None)?;
    let data = load_data(manifest, model.config().input_shape)?;
    let records = evaluator::embed_dataset(&model, &data)?;
    evaluator::write_embeddings(out, &records)?;
    println!("{}", out.display());
    Ok(())
}

pub fn retrieve(embeddings: &Path, query: &str, k: usize) -> Result<()> {
    let records = evaluator::read_embeddings(embeddings)?;
    let q = records
        .iter()
        .find(|r| r.item_id == query)
        .ok_or_else(|| Error::Lookup(query.to_string()))?;
    let want = q.category.complement();
    let candidates: Vec<String> = records
        .iter()
        .filter(|r| r.category == want)
        .map(|r| r.item_id.clone())
        .collect();
    let map: BTreeMap<String, Vec<f32>> = records
        .iter()
        .map(|r| (r.item_id.clone(), r.vector.clone()))
        .collect();
    for (id, d) in evaluator::retrieve(query, &candidates, &map, k)? {
        println!("{}", serde_json::json!({"item_id": id, "distance": d}));
    }
    Ok(())
}

pub fn experiment(
    settings: &Overrides,
    manifest: &Path,
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = settle(settings)?;
    let data = load_data(manifest, cfg.model.input_shape)?;
    let opts = ExperimentOptions {
        jobs,
        ..ExperimentOptions::default()
    };
    let progress = |r: &hssn_core::experiment::RunRecord| {
        eprintln!(
            "seed {} fold {} {:?} {}: map {:.4}",
            r.seed, r.fold, r.variant, r.schedule, r.map_normalized
        );
    };
    let table = run_experiment(&cfg, &data, seeds, cfg.k_folds, &opts, &progress)?;
    print!("{table}");
    if let Some(path) = out {
        let mut s = serde_json::to_string(&table)?;
        s.push('\n');
        std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
