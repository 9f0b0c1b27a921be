//! The experiment kinds and the run driver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, ExperimentKind};
use super::manifest::{sha256_hex, write_atomic, FileEntry, RunManifest, ARTIFACT_VERSION};
use crate::aggregator::{replay_selection, run_mt_assl, write_trace_csv, ReplayTables};
use crate::data::dataset::{mix_seed, Split, SyntheticDataset, NUM_CLASSES};
use crate::data::tasks::ProxyTaskSpec;
use crate::data::SplitSizes;
use crate::error::{Error, Result};
use crate::lcka::lcka;
use crate::trainer::{
    evaluate_acc, extract_features, finetune_target, finetune_target_on, pretrain_proxy, train_multitask,
    train_self_aggregative, write_metrics_csv, MetricRow, TrainedModel, TrainerConfig,
};

/// The Self-ASSL reference trains with the run's seed plus this offset, so
/// it never shares an initialization with the runs compared against it.
pub const REFERENCE_SEED_OFFSET: u64 = 1000;
const STREAM_SUBSAMPLE: u64 = 0x5AB5;

/// Collects output files, metrics and timings for one run.
pub struct RunContext {
    out: PathBuf,
    files: BTreeMap<String, FileEntry>,
    metrics: BTreeMap<String, f64>,
    timings: BTreeMap<String, f64>,
}

impl RunContext {
    pub fn new(out: &Path) -> Self {
        Self {
            out: out.to_path_buf(),
            files: BTreeMap::new(),
            metrics: BTreeMap::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// Writes `bytes` under the output directory and records its hash;
    /// rewriting a path replaces its entry.
    pub fn write_file(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out.join(rel), bytes)?;
        self.files.insert(
            rel.to_string(),
            FileEntry {
                path: rel.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.metrics.insert(key.into(), value);
    }

    pub fn metrics(&self) -> &BTreeMap<String, f64> {
        &self.metrics
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self);
        self.timings.insert(label.to_string(), t.elapsed().as_secs_f64());
        r
    }

    fn write_csv<R: Serialize>(&mut self, rel: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::io(rel, e.into_error()))?;
        self.write_file(rel, &bytes)
    }

    fn write_metrics(&mut self, rel: &str, rows: &[MetricRow]) -> Result<()> {
        let mut buf = Vec::new();
        write_metrics_csv(rows, &mut buf)?;
        self.write_file(rel, &buf)
    }

    fn write_model(&mut self, rel: &str, model: &TrainedModel) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        model.save(&path)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.write_file(rel, &bytes)
    }

    pub fn into_manifest(self, kind: ExperimentKind, config_text: &str, outcome: &Result<()>) -> RunManifest {
        RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            kind: kind.name().into(),
            status: if outcome.is_ok() { "ok" } else { "failed" }.into(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
            config: config_text.to_string(),
            metrics: self.metrics,
            files: self.files.into_values().collect(),
            timings: self.timings,
        }
    }
}

/// Loads a cached dataset from `cache_dir`, generating and caching it when
/// absent or stale.
pub fn load_or_generate(cache_dir: &Path, n_images: usize, seed: u64) -> Result<SyntheticDataset> {
    let path = cache_dir.join(format!("dataset-{n_images}-{seed}.bin"));
    let sizes = SplitSizes::proportional(n_images);
    if let Ok(d) = SyntheticDataset::load_cache(&path) {
        if d.seed() == seed && d.sizes() == sizes {
            return Ok(d);
        }
    }
    let d = crate::data::generate_dataset(n_images, seed)?;
    write_atomic(&path, &d.encode_cache())?;
    Ok(d)
}

/// One seed's dataset and trainer settings.
pub struct SeedRun {
    pub index: usize,
    pub data: SyntheticDataset,
    pub trainer: TrainerConfig,
}

fn seed_runs<'a>(cfg: &'a ExperimentConfig, out: &Path) -> impl Iterator<Item = Result<SeedRun>> + 'a {
    let cache = out.join("cache");
    (0..cfg.experiment.n_seeds).map(move |i| {
        Ok(SeedRun {
            index: i,
            data: load_or_generate(&cache, cfg.dataset.n_images, cfg.dataset.seed + i as u64)?,
            trainer: cfg.trainer.with_seed(cfg.trainer.seed + i as u64),
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub seed: usize,
    pub method: String,
    pub acc: f64,
}

fn run_baseline(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let tasks = cfg.task_specs()?;
    let mut rows = Vec::new();
    for run in seed_runs(cfg, &ctx.out.clone()) {
        let run = run?;
        for t in &tasks {
            let ft = ctx.timed(&format!("{}_s{}", t.task_id, run.index), |_| {
                let pre = pretrain_proxy(t, &run.data, &run.trainer)?;
                finetune_target(&pre, &run.data, &run.trainer)
            })?;
            let acc = evaluate_acc(&ft, &run.data)?;
            ctx.write_metrics(&format!("metrics/{}_s{}.csv", t.task_id, run.index), ft.metrics())?;
            ctx.metric(format!("{}/acc_s{}", t.task_id, run.index), acc);
            rows.push(AccuracyRow {
                seed: run.index,
                method: t.task_id.clone(),
                acc,
            });
        }
    }
    ctx.write_csv("accuracies.csv", &rows)
}

/// One row of the pairwise integration table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub seed: usize,
    pub a1: String,
    pub a2: String,
    pub similarity: f64,
    pub acc_a1: f64,
    pub acc_a2: f64,
    pub avg_acc: f64,
    pub max_acc: f64,
    pub int_acc: f64,
    pub avg_delta: f64,
    pub max_delta: f64,
}

impl PairRow {
    pub fn new(seed: usize, a1: &str, a2: &str, similarity: f64, acc_a1: f64, acc_a2: f64, int_acc: f64) -> Result<Self> {
        if a1 == a2 {
            return Err(Error::config("experiment.tasks", format!("pair ({a1}, {a2}) repeats a task")));
        }
        let avg_acc = (acc_a1 + acc_a2) / 2.0;
        let max_acc = acc_a1.max(acc_a2);
        Ok(Self {
            seed,
            a1: a1.into(),
            a2: a2.into(),
            similarity,
            acc_a1,
            acc_a2,
            avg_acc,
            max_acc,
            int_acc,
            avg_delta: int_acc - avg_acc,
            max_delta: int_acc - max_acc,
        })
    }
}

/// Singles and every unordered pair of `tasks` on one seed.
pub fn pairwise_rows(tasks: &[ProxyTaskSpec], run: &SeedRun) -> Result<Vec<PairRow>> {
    let mut snaps = BTreeMap::new();
    let mut accs = BTreeMap::new();
    for t in tasks {
        let pre = pretrain_proxy(t, &run.data, &run.trainer).map_err(|e| e.for_task(&t.task_id))?;
        let acc = evaluate_acc(&finetune_target(&pre, &run.data, &run.trainer)?, &run.data)?;
        let feats = extract_features(&pre, &run.data, Split::Probe, run.trainer.tap())?;
        snaps.insert(t.task_id.clone(), feats);
        accs.insert(t.task_id.clone(), acc);
    }
    let mut rows = Vec::new();
    for (i, a) in tasks.iter().enumerate() {
        for b in &tasks[i + 1..] {
            let joint = train_multitask(&[a.clone(), b.clone()], &run.data, &run.trainer)?;
            let int_acc = evaluate_acc(&finetune_target(&joint, &run.data, &run.trainer)?, &run.data)?;
            let sim = lcka(&snaps[&a.task_id], &snaps[&b.task_id])?;
            rows.push(PairRow::new(
                run.index,
                &a.task_id,
                &b.task_id,
                sim,
                accs[&a.task_id],
                accs[&b.task_id],
                int_acc,
            )?);
        }
    }
    Ok(rows)
}

fn run_pairwise(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let tasks = cfg.task_specs()?;
    let mut all = Vec::new();
    for run in seed_runs(cfg, &ctx.out.clone()) {
        let run = run?;
        let rows = ctx.timed(&format!("pairs_s{}", run.index), |_| pairwise_rows(&tasks, &run))?;
        for r in &rows {
            let key = format!("{}+{}", r.a1, r.a2);
            ctx.metric(format!("{key}/int_acc_s{}", r.seed), r.int_acc);
            ctx.metric(format!("{key}/similarity_s{}", r.seed), r.similarity);
            ctx.metric(format!("{}/acc_s{}", r.a1, r.seed), r.acc_a1);
            ctx.metric(format!("{}/acc_s{}", r.a2, r.seed), r.acc_a2);
        }
        all.extend(rows);
    }
    ctx.write_csv("pairwise.csv", &all)
}

fn trace_bytes(trace: &[crate::aggregator::IterationRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    Ok(buf)
}

fn run_mt(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let tasks = cfg.task_specs()?;
    for run in seed_runs(cfg, &ctx.out.clone()) {
        let run = run?;
        let trace_rel = format!("trace_s{}.csv", run.index);
        let outcome = ctx.timed(&format!("mt_assl_s{}", run.index), |ctx| {
            run_mt_assl(
                &tasks,
                &run.data,
                &run.trainer,
                cfg.experiment.similarity_source,
                &mut |state| ctx.write_file(&trace_rel, &trace_bytes(&state.trace)?),
            )
        })?;
        let s = run.index;
        ctx.metric(format!("mt_assl/best_acc_s{s}"), outcome.state.best_acc);
        ctx.metric(format!("mt_assl/pool_size_s{s}"), outcome.state.pool_a.len() as f64);
        for (t, acc) in &outcome.initial_accs {
            ctx.metric(format!("{t}/acc_s{s}"), *acc);
        }
        ctx.write_metrics(&format!("metrics/mt_assl_s{s}.csv"), outcome.final_model.metrics())?;
        ctx.write_model(&format!("models/mt_assl_s{s}.ckpt"), &outcome.final_model)?;
    }
    Ok(())
}

/// Self-aggregative training against a frozen reference, next to the same
/// run with the complement switched off.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfAsslRow {
    pub seed: usize,
    pub task: String,
    pub complement_weight: f64,
    pub similarity: f64,
    pub acc: f64,
}

pub struct SelfAsslComparison {
    pub rows: Vec<SelfAsslRow>,
    pub reference_hash_before: String,
    pub reference_hash_after: String,
    pub models: Vec<TrainedModel>,
}

/// Trains a reference on `task` with a derived seed, freezes it, then trains
/// fresh backbones at α = 0 and at the configured α.
pub fn self_assl_comparison(task: &ProxyTaskSpec, run: &SeedRun) -> Result<SelfAsslComparison> {
    let ref_cfg = run.trainer.with_seed(run.trainer.seed + REFERENCE_SEED_OFFSET);
    let reference = pretrain_proxy(task, &run.data, &ref_cfg)?.frozen();
    let before = reference.param_hash();
    let tap = run.trainer.tap();
    let ref_feats = extract_features(&reference, &run.data, Split::Probe, tap)?;
    let mut weights = vec![0.0];
    if run.trainer.complement_weight > 0.0 {
        weights.push(run.trainer.complement_weight);
    }
    let mut rows = Vec::new();
    let mut models = Vec::new();
    for w in weights {
        let cfg = TrainerConfig {
            complement_weight: w,
            ..run.trainer.clone()
        };
        let m = train_self_aggregative(task, &reference, &run.data, &cfg)?;
        let similarity = lcka(&extract_features(&m, &run.data, Split::Probe, tap)?, &ref_feats)?;
        let ft = finetune_target(&m, &run.data, &cfg)?;
        rows.push(SelfAsslRow {
            seed: run.index,
            task: task.task_id.clone(),
            complement_weight: w,
            similarity,
            acc: evaluate_acc(&ft, &run.data)?,
        });
        models.push(ft);
    }
    Ok(SelfAsslComparison {
        rows,
        reference_hash_after: reference.param_hash(),
        reference_hash_before: before,
        models,
    })
}

fn run_self(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let tasks = cfg.task_specs()?;
    let mut all = Vec::new();
    for run in seed_runs(cfg, &ctx.out.clone()) {
        let run = run?;
        for t in &tasks {
            let cmp = ctx.timed(&format!("{}_s{}", t.task_id, run.index), |_| self_assl_comparison(t, &run))?;
            if cmp.reference_hash_before != cmp.reference_hash_after {
                return Err(Error::Frozen(format!("reference for {} changed", t.task_id)));
            }
            for (row, model) in cmp.rows.iter().zip(&cmp.models) {
                let tag = format!("{}/a{}_s{}", t.task_id, row.complement_weight, run.index);
                ctx.metric(format!("{tag}/similarity"), row.similarity);
                ctx.metric(format!("{tag}/acc"), row.acc);
                let rel = format!("metrics/{}_a{}_s{}.csv", t.task_id, row.complement_weight, run.index);
                ctx.write_metrics(&rel, model.metrics())?;
            }
            all.extend(cmp.rows);
        }
    }
    ctx.write_csv("self_assl.csv", &all)
}

fn run_replay(cfg: &ExperimentConfig, config_dir: &Path, ctx: &mut RunContext) -> Result<()> {
    let fixture = cfg.experiment.fixture.as_ref().expect("validated");
    let path = config_dir.join(fixture);
    let tables = ReplayTables::load(&path)?;
    let state = ctx.timed("replay", |_| replay_selection(&tables))?;
    ctx.write_file("trace.csv", &trace_bytes(&state.trace)?)?;
    ctx.metric("replay/best_acc", state.best_acc);
    ctx.metric("replay/iterations", state.trace.len() as f64);
    ctx.metric("replay/pool_size", state.pool_a.len() as f64);
    Ok(())
}

/// Class-balanced subsample: `floor(fraction · count)` indices of every
/// class, chosen by a seeded shuffle and returned in ascending order.
pub fn balanced_subsample(data: &SyntheticDataset, indices: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("experiment.label_fractions", format!("{fraction} is outside (0, 1]")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); NUM_CLASSES];
    for &i in indices {
        by_class[data.target_label(i)].push(i);
    }
    let mut out = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        let keep = (fraction * members.len() as f64).floor() as usize;
        if keep == 0 {
            return Err(Error::config(
                "experiment.label_fractions",
                format!("fraction {fraction} leaves class {c} without samples"),
            ));
        }
        members.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, &[STREAM_SUBSAMPLE, c as u64])));
        out.extend_from_slice(&members[..keep]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub method: String,
    pub seed: usize,
    pub acc: f64,
}

fn run_sweep(cfg: &ExperimentConfig, ctx: &mut RunContext) -> Result<()> {
    let tasks = cfg.task_specs()?;
    let method = cfg.experiment.tasks.join("+");
    let mut rows = Vec::new();
    for run in seed_runs(cfg, &ctx.out.clone()) {
        let run = run?;
        let train = run.data.indices(Split::Train);
        let pre = ctx.timed(&format!("pretrain_s{}", run.index), |_| {
            train_multitask(&tasks, &run.data, &run.trainer)
        })?;
        for &f in &cfg.experiment.label_fractions {
            let subset = balanced_subsample(&run.data, &train, f, run.trainer.seed)?;
            let ft = finetune_target_on(&pre, &run.data, &subset, &run.trainer)?;
            let acc = evaluate_acc(&ft, &run.data)?;
            ctx.metric(format!("{method}/acc_f{f}_s{}", run.index), acc);
            rows.push(SweepRow {
                fraction: f,
                method: method.clone(),
                seed: run.index,
                acc,
            });
        }
    }
    ctx.write_csv("label_sweep.csv", &rows)
}

fn dispatch(cfg: &ExperimentConfig, config_dir: &Path, ctx: &mut RunContext) -> Result<()> {
    match cfg.experiment.kind {
        ExperimentKind::Baseline => run_baseline(cfg, ctx),
        ExperimentKind::Pairwise => run_pairwise(cfg, ctx),
        ExperimentKind::MtAssl => run_mt(cfg, ctx),
        ExperimentKind::SelfAssl => run_self(cfg, ctx),
        ExperimentKind::Replay => run_replay(cfg, config_dir, ctx),
        ExperimentKind::LabelSweep => run_sweep(cfg, ctx),
    }
}

/// Runs a parsed configuration into `out`. The manifest is written last,
/// also when the run fails part-way.
pub fn run_config(cfg: &ExperimentConfig, config_text: &str, config_dir: &Path, out: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut ctx = RunContext::new(out);
    let start = Instant::now();
    let outcome = dispatch(cfg, config_dir, &mut ctx);
    ctx.timings.insert("total".into(), start.elapsed().as_secs_f64());
    let manifest = ctx.into_manifest(cfg.experiment.kind, config_text, &outcome);
    manifest.write(out)?;
    outcome.map(|_| manifest)
}

/// Loads, validates and runs a configuration file. `root_override` replaces
/// the working directory as the base of the output directory.
pub fn run_experiment(config_path: &Path, root_override: Option<&Path>) -> Result<RunManifest> {
    let (cfg, text) = ExperimentConfig::load(config_path)?;
    let config_dir = config_path.parent().unwrap_or(Path::new("."));
    run_config(&cfg, &text, config_dir, &cfg.output_dir(root_override))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn pair_row_arithmetic_and_self_pair() {
        let r = PairRow::new(0, "a", "b", 0.3, 0.61, 0.7, 0.75).unwrap();
        assert!((r.avg_delta - (0.75 - (0.61 + 0.7) / 2.0)).abs() < 1e-12);
        assert!((r.max_delta - 0.05).abs() < 1e-12);
        assert!(PairRow::new(0, "a", "a", 0.3, 0.6, 0.6, 0.6).is_err());
    }

    #[test]
    fn subsample_balanced_subset() {
        let d = generate_dataset(2896, 0).unwrap();
        let train = d.indices(Split::Train);
        assert_eq!(train.len(), 320);
        let half = balanced_subsample(&d, &train, 0.5, 3).unwrap();
        let mut counts = [0; NUM_CLASSES];
        half.iter().for_each(|&i| counts[d.target_label(i)] += 1);
        assert!(counts.iter().all(|&c| c == 10));
        assert!(half.iter().all(|i| train.contains(i)));
        assert_eq!(balanced_subsample(&d, &train, 1.0, 3).unwrap(), train);
        assert!(balanced_subsample(&d, &train, 0.01, 3).is_err());
    }

    #[test]
    fn dataset_cache_reused() {
        let dir = tempfile::tempdir().unwrap();
        let a = load_or_generate(dir.path(), 128, 4).unwrap();
        assert!(dir.path().join("dataset-128-4.bin").exists());
        let b = load_or_generate(dir.path(), 128, 4).unwrap();
        assert_eq!(a, b);
    }
}
