//! Training and evaluation drivers and their on-disk run directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::evaluation::{
    choose_threshold, evaluate_logits, BranchLogits, feasibility_filter, feasibility_scores, read_summary_csv, write_curve_csv,
    write_summary_csv, CompositionSpace, CurveSummary, EvalReport, SummaryRow, World,
};
use crate::model::{CompositionModel, Variant};
use crate::training::checkpoint::Checkpoint;
use crate::training::{fit, EpochRecord, FitResult, Split};

use super::config::RunConfig;
use super::splits::read_dataset;
use super::synthetic::{gen_synthetic, Dataset};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "CZSL_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// `<root>/<config hash>-seed<seed>`.
pub fn run_dir(root: &Path, cfg: &RunConfig) -> PathBuf {
    root.join(format!("{}-seed{}", cfg.hash(), cfg.seed))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => read_dataset(dir),
        None => gen_synthetic(&cfg.synthetic_spec()),
    }
}

pub fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<CompositionModel> {
    CompositionModel::new(&cfg.architecture(), ds.space.states().len(), ds.space.objects().len(), cfg.seed)
}

/// Caches frozen encoder outputs on every split; reuses existing caches when
/// `model` has the same frozen weights as `cached_for`.
pub fn cache_layers(ds: &mut Dataset, model: &CompositionModel, cached_for: &mut Option<String>) -> Result<()> {
    let key = model.encoder_is_frozen().then(|| model.store.frozen_checksum());
    if key.is_some() && *cached_for == key && ds.train.layers.is_some() {
        return Ok(());
    }
    for split in [&mut ds.train, &mut ds.val, &mut ds.test] {
        if split.is_empty() {
            split.layers = None;
        } else {
            split.cache_layers(model)?;
        }
    }
    *cached_for = key;
    Ok(())
}

/// Validation and test reports in the configured world.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub val: EvalReport,
    pub test: EvalReport,
    /// Open-world pruning threshold in use, if any.
    pub threshold: Option<f64>,
}

fn score_split(model: &CompositionModel, split: &Split, space: &CompositionSpace, cfg: &RunConfig) -> Result<BranchLogits> {
    model.score(&split.x, split.layers.as_deref(), &space.candidates(), cfg.train.eval_batch)
}

pub fn evaluate(model: &CompositionModel, ds: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let beta = cfg.train.beta;
    let space = ds.space.with_world(cfg.eval.world);
    let val_logits = score_split(model, &ds.val, &space, cfg)?;
    let test_logits = score_split(model, &ds.test, &space, cfg)?;
    match cfg.eval.world {
        World::Closed => {
            let active = space.candidates();
            Ok(Evaluation {
                val: evaluate_logits(&val_logits, &active, &ds.val.labels, &space, beta)?,
                test: evaluate_logits(&test_logits, &active, &ds.test.labels, &space, beta)?,
                threshold: None,
            })
        }
        World::Open => {
            let store = &model.store;
            let scores = feasibility_scores(
                &space,
                store.value(model.prompts.state_tokens),
                store.value(model.prompts.object_tokens),
            )?;
            let theta = match cfg.eval.threshold {
                Some(t) => t,
                None => choose_threshold(&val_logits, &ds.val.labels, &space, &scores, beta, cfg.eval.max_thresholds)?.0,
            };
            let outcome = feasibility_filter(&space, &scores, theta);
            let mut val = evaluate_logits(&val_logits, &outcome.candidates, &ds.val.labels, &space, beta)?;
            let mut test = evaluate_logits(&test_logits, &outcome.candidates, &ds.test.labels, &space, beta)?;
            val.warning.clone_from(&outcome.warning);
            test.warning = outcome.warning;
            Ok(Evaluation { val, test, threshold: Some(theta) })
        }
    }
}

/// Everything a finished training run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CompositionModel,
    pub fit: FitResult,
    pub eval: Evaluation,
    /// Wall time of model construction, caching, fitting and evaluation.
    pub seconds: f64,
}

/// Builds, trains and evaluates a model on `ds`.
pub fn train_on(cfg: &RunConfig, ds: &mut Dataset, cached_for: &mut Option<String>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut model = build_model(cfg, ds)?;
    cache_layers(ds, &model, cached_for)?;
    let fit = fit(&mut model, &ds.train, &ds.val, &ds.space, &cfg.train, cfg.seed)?;
    let eval = evaluate(&model, ds, cfg)?;
    Ok(TrainOutcome { model, fit, eval, seconds: start.elapsed().as_secs_f64() })
}

pub fn train(cfg: &RunConfig) -> Result<(Dataset, TrainOutcome)> {
    let mut ds = load_dataset(cfg)?;
    let out = train_on(cfg, &mut ds, &mut None)?;
    Ok((ds, out))
}

/// Files of a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const HISTORY: &str = "history.csv";
    pub const VAL_SUMMARY: &str = "val_summary.csv";
    pub const SUMMARY: &str = "summary.csv";
    pub const VAL_CURVE: &str = "val_curve.csv";
    pub const TEST_CURVE: &str = "test_curve.csv";
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,S,U,HM,AUC\n");
    for h in history {
        let v = h.val;
        out.push_str(&format!("{},{},{},{},{},{},{}\n", h.epoch, h.lr, h.train_loss, v.seen, v.unseen, v.hm, v.auc));
    }
    fs::write(path, out)?;
    Ok(())
}

fn summary_row(ds: &Dataset, cfg: &RunConfig, summary: CurveSummary) -> SummaryRow {
    SummaryRow { dataset: ds.name.clone(), world: cfg.eval.world, seed: cfg.seed, summary }
}

/// Writes config, checkpoint, history, summaries and curves into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, ds: &Dataset, out: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let config = cfg.to_toml();
    fs::write(dir.join(files::CONFIG), &config)?;
    Checkpoint::from_store(config, &out.model.store).save(&dir.join(files::CHECKPOINT))?;
    write_history(&dir.join(files::HISTORY), &out.fit.history)?;
    let val = [summary_row(ds, cfg, out.fit.best_val)];
    write_summary_csv(fs::File::create(dir.join(files::VAL_SUMMARY))?, &val)?;
    let test = [summary_row(ds, cfg, out.eval.test.curve.summary)];
    write_summary_csv(fs::File::create(dir.join(files::SUMMARY))?, &test)?;
    write_curve_csv(fs::File::create(dir.join(files::VAL_CURVE))?, &out.eval.val.curve)?;
    write_curve_csv(fs::File::create(dir.join(files::TEST_CURVE))?, &out.eval.test.curve)?;
    Ok(())
}

/// Model restored from a run directory, with its configuration.
pub fn load_run(dir: &Path) -> Result<(RunConfig, Dataset, CompositionModel)> {
    let ck = Checkpoint::load(&dir.join(files::CHECKPOINT))?;
    let cfg = RunConfig::from_toml(&ck.header)?;
    let ds = load_dataset(&cfg)?;
    let mut model = build_model(&cfg, &ds)?;
    ck.restore(&mut model.store)?;
    Ok((cfg, ds, model))
}

/// Result of re-evaluating a stored run.
#[derive(Clone, Debug)]
pub struct Reevaluation {
    pub cfg: RunConfig,
    pub closed_val: CurveSummary,
    pub stored_val: CurveSummary,
    pub eval: Evaluation,
}

impl Reevaluation {
    /// Whether the recomputed validation metrics equal the stored ones bit for bit.
    pub fn reproduces(&self) -> bool {
        let bits = |s: CurveSummary| [s.seen, s.unseen, s.hm, s.auc].map(f64::to_bits);
        bits(self.closed_val) == bits(self.stored_val)
    }
}

/// Reloads a run directory, recomputes validation metrics under the
/// training-time protocol and evaluates in `world` (or the stored world).
pub fn reevaluate(dir: &Path, world: Option<World>) -> Result<Reevaluation> {
    let (mut cfg, mut ds, model) = load_run(dir)?;
    let stored = read_summary_csv(&fs::read_to_string(dir.join(files::VAL_SUMMARY))?)?;
    let stored_val = stored
        .first()
        .ok_or_else(|| Error::Integrity(format!("{} holds no rows", files::VAL_SUMMARY)))?
        .summary;
    cache_layers(&mut ds, &model, &mut None)?;
    let closed_val = crate::training::evaluate_split(&model, &ds.val, &ds.space, cfg.train.beta, cfg.train.eval_batch)?
        .curve
        .summary;
    if let Some(w) = world {
        cfg.eval.world = w;
    }
    let eval = evaluate(&model, &ds, &cfg)?;
    Ok(Reevaluation { cfg, closed_val, stored_val, eval })
}

/// One trained (variant, seed) cell of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub val: CurveSummary,
    pub test: CurveSummary,
    pub seconds: f64,
}

/// Trains every variant on every seed. Runs are ordered by seed, then
/// variant; each seed's dataset and encoder cache are shared by its variants.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let base = RunConfig { seed, ..cfg.clone() };
        let mut ds = load_dataset(&base)?;
        let mut cached_for = None;
        for &variant in variants {
            let mut run = base.clone();
            run.model.variant = variant;
            let out = train_on(&run, &mut ds, &mut cached_for)?;
            rows.push(AblationRow {
                variant,
                seed,
                val: out.fit.best_val,
                test: out.eval.test.curve.summary,
                seconds: out.seconds,
            });
        }
    }
    Ok(rows)
}

/// Test AUC per aggregation window size `n` (with `m = n`).
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub n: usize,
    pub seed: u64,
    pub test: CurveSummary,
}

pub fn run_layer_sweep(cfg: &RunConfig, n_values: &[usize], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let blocks = cfg.encoder.blocks;
    if let Some(&n) = n_values.iter().find(|&&n| n == 0 || 2 * n > blocks) {
        return Err(Error::Config(format!("layer count {n} needs 1 <= 2n <= {blocks}")));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let base = RunConfig { seed, ..cfg.clone() };
        let mut ds = load_dataset(&base)?;
        let mut cached_for = None;
        for &n in n_values {
            let mut run = base.clone();
            run.aggregation.n_low = n;
            run.aggregation.m_high = n;
            let out = train_on(&run, &mut ds, &mut cached_for)?;
            rows.push(SweepRow { n, seed, test: out.eval.test.curve.summary });
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, dataset: &str, world: World, rows: &[AblationRow]) -> Result<()> {
    let rows: Vec<SummaryRow> = rows
        .iter()
        .map(|r| SummaryRow { dataset: format!("{dataset}/{}", r.variant), world, seed: r.seed, summary: r.test })
        .collect();
    write_summary_csv(fs::File::create(path)?, &rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("n,seed,S,U,HM,AUC\n");
    for r in rows {
        let s = r.test;
        out.push_str(&format!("{},{},{},{},{},{}\n", r.n, r.seed, s.seen, s.unseen, s.hm, s.auc));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(dataset, world) aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub dataset: String,
    pub world: World,
    pub seeds: usize,
    /// Mean and standard deviation of S, U, HM and AUC.
    pub stats: [(f64, f64); 4],
}

/// Groups summary rows by dataset and world, in first-appearance order.
pub fn merge_summaries(rows: &[SummaryRow]) -> Vec<ReportRow> {
    let mut keys: Vec<(String, World)> = Vec::new();
    for r in rows {
        let k = (r.dataset.clone(), r.world);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(dataset, world)| {
            let group: Vec<CurveSummary> =
                rows.iter().filter(|r| r.dataset == dataset && r.world == world).map(|r| r.summary).collect();
            let col = |f: fn(&CurveSummary) -> f64| mean_std(&group.iter().map(f).collect::<Vec<_>>());
            ReportRow {
                stats: [col(|s| s.seen), col(|s| s.unseen), col(|s| s.hm), col(|s| s.auc)],
                seeds: group.len(),
                dataset,
                world,
            }
        })
        .collect()
}

/// Markdown table of percentages, `mean ± std`.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("| dataset | world | seeds | S | U | HM | AUC |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} | {} |", r.dataset, r.world, r.seeds));
        for (m, s) in r.stats {
            out.push_str(&format!(" {:.2} ± {:.2} |", 100.0 * m, 100.0 * s));
        }
        out.push('\n');
    }
    out
}
