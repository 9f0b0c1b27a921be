//! Greedy multi-task aggregation: start from the best single task, keep
//! adding the candidate least similar to the current aggregate, stop at the
//! first addition that lowers target accuracy.
//!
//! The same loop drives real training ([`run_mt_assl`]) and table replay
//! ([`replay_selection`]); only the source of similarities and accuracies
//! differs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::dataset::{Split, SyntheticDataset};
use crate::data::tasks::ProxyTaskSpec;
use crate::error::{Error, Result};
use crate::lcka::{lcka, FeatureMatrix};
use crate::trainer::{evaluate_acc, extract_features, finetune_target, pretrain_proxy, train_multitask, TrainedModel, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Aggregate the candidates were compared against (empty on the first
    /// iteration).
    pub pool_a: Vec<String>,
    pub similarities: BTreeMap<String, f64>,
    pub selected: String,
    pub acc: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub candidates: Vec<String>,
    pub pool_a: Vec<String>,
    pub pool_p: Vec<String>,
    pub rejected: Vec<String>,
    pub best_acc: f64,
    pub trace: Vec<IterationRecord>,
}

impl AggregationState {
    /// Checks that selected, remaining and rejected tasks partition the
    /// candidate set and that no task was selected twice.
    pub fn check_partition(&self) -> Result<()> {
        let all: BTreeSet<&String> = self.candidates.iter().collect();
        let mut seen = BTreeSet::new();
        for t in self.pool_a.iter().chain(&self.pool_p).chain(&self.rejected) {
            if !seen.insert(t) {
                return Err(Error::Aggregation(format!("task `{t}` appears twice")));
            }
        }
        if seen != all {
            return Err(Error::Aggregation("pools do not cover the candidate set".into()));
        }
        let mut selected = BTreeSet::new();
        if let Some(r) = self.trace.iter().find(|r| !selected.insert(&r.selected)) {
            return Err(Error::Aggregation(format!("task `{}` selected twice", r.selected)));
        }
        Ok(())
    }
}

/// Supplies accuracies and similarities to the greedy loop.
pub trait AggregationBackend {
    /// Target accuracy of every candidate trained alone.
    fn initial_accs(&mut self, candidates: &[String]) -> Result<BTreeMap<String, f64>>;
    /// Similarity between the aggregate `pool_a` and each candidate.
    fn similarities(&mut self, pool_a: &[String], candidates: &[String]) -> Result<BTreeMap<String, f64>>;
    /// Accuracy after adding `candidate` to `pool_a`.
    fn integrate(&mut self, pool_a: &[String], candidate: &str) -> Result<f64>;
    /// Called when the last integration is kept.
    fn accept(&mut self) {}
}

/// Largest value; ties go to the lexicographically smallest key.
pub fn argmax_by_key(values: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (k, &v) in values {
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Smallest value; ties go to the lexicographically smallest key.
pub fn argmin_by_key(values: &BTreeMap<String, f64>) -> Option<&str> {
    let mut best: Option<(&str, f64)> = None;
    for (k, &v) in values {
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

fn check_values(values: &BTreeMap<String, f64>, what: &str) -> Result<()> {
    match values.iter().find(|(_, v)| !v.is_finite()) {
        Some((k, _)) => Err(Error::NonFinite {
            what: what.into(),
            location: format!("task {k}"),
        }),
        None => Ok(()),
    }
}

/// Picks the candidate least similar to `pool_a`.
pub fn select_next(
    backend: &mut dyn AggregationBackend,
    pool_a: &[String],
    pool_p: &[String],
) -> Result<(String, BTreeMap<String, f64>)> {
    if pool_p.is_empty() {
        return Err(Error::Aggregation("no candidates left".into()));
    }
    let sims = backend.similarities(pool_a, pool_p)?;
    check_values(&sims, "similarity")?;
    for p in pool_p {
        if !sims.contains_key(p) {
            return Err(Error::MissingTableEntry {
                task: p.clone(),
                pool: pool_a.join("+"),
            });
        }
    }
    let restricted: BTreeMap<String, f64> = pool_p.iter().map(|p| (p.clone(), sims[p])).collect();
    let chosen = argmin_by_key(&restricted).expect("nonempty").to_string();
    Ok((chosen, restricted))
}

/// The greedy loop. `on_record` runs after each iteration so callers can
/// persist the partial trace before a later failure.
pub fn run_greedy(
    candidates: &[String],
    backend: &mut dyn AggregationBackend,
    on_record: &mut dyn FnMut(&AggregationState) -> Result<()>,
) -> Result<AggregationState> {
    let unique: BTreeSet<&String> = candidates.iter().collect();
    if candidates.is_empty() || unique.len() != candidates.len() {
        return Err(Error::config("tasks", "candidates must be nonempty and distinct"));
    }
    let accs = backend.initial_accs(candidates)?;
    check_values(&accs, "accuracy")?;
    let restricted: BTreeMap<String, f64> = candidates
        .iter()
        .map(|c| {
            accs.get(c).map(|&a| (c.clone(), a)).ok_or_else(|| Error::MissingTableEntry {
                task: c.clone(),
                pool: String::new(),
            })
        })
        .collect::<Result<_>>()?;
    let first = argmax_by_key(&restricted).expect("nonempty").to_string();
    let first_acc = restricted[&first];
    let mut pool_p: Vec<String> = candidates.iter().filter(|c| **c != first).cloned().collect();
    pool_p.sort();
    let mut state = AggregationState {
        candidates: candidates.to_vec(),
        pool_a: vec![first.clone()],
        pool_p,
        rejected: vec![],
        best_acc: first_acc,
        trace: vec![IterationRecord {
            iteration: 1,
            pool_a: vec![],
            similarities: BTreeMap::new(),
            selected: first,
            acc: first_acc,
            accepted: true,
        }],
    };
    on_record(&state)?;

    while !state.pool_p.is_empty() {
        let (chosen, sims) = select_next(backend, &state.pool_a, &state.pool_p)?;
        let acc = backend.integrate(&state.pool_a, &chosen)?;
        if !acc.is_finite() {
            return Err(Error::NonFinite {
                what: "accuracy".into(),
                location: format!("integration of {chosen}"),
            });
        }
        state.pool_p.retain(|p| *p != chosen);
        let accepted = acc >= state.best_acc;
        state.trace.push(IterationRecord {
            iteration: state.trace.len() + 1,
            pool_a: state.pool_a.clone(),
            similarities: sims,
            selected: chosen.clone(),
            acc,
            accepted,
        });
        if accepted {
            state.pool_a.push(chosen);
            state.best_acc = acc;
            backend.accept();
        } else {
            state.rejected.push(chosen);
        }
        on_record(&state)?;
        if !accepted {
            break;
        }
    }
    Ok(state)
}

/// Published per-iteration values: single-task accuracies and, for each
/// aggregate, the similarity and integrated accuracy of every candidate.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayTables {
    pub initial: BTreeMap<String, f64>,
    pub steps: BTreeMap<BTreeSet<String>, BTreeMap<String, (f64, f64)>>,
    /// Candidates in first-appearance order.
    pub order: Vec<String>,
}

impl ReplayTables {
    /// Reads `iteration,pool_a,candidate,similarity,acc` rows. First-iteration
    /// rows leave `pool_a` and `similarity` empty; pools are joined by `+`.
    pub fn from_csv(r: impl Read, origin: &Path) -> Result<Self> {
        let bad = |line: usize, m: String| Error::format(origin, format!("row {line}: {m}"));
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let expected = ["iteration", "pool_a", "candidate", "similarity", "acc"];
        if headers.iter().ne(expected.iter().copied()) {
            return Err(Error::format(origin, format!("expected header {}", expected.join(","))));
        }
        let mut t = ReplayTables::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let num = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| bad(line, format!("bad {what} `{s}`")))
            };
            let iteration: usize = rec[0].parse().map_err(|_| bad(line, format!("bad iteration `{}`", &rec[0])))?;
            let candidate = rec[2].to_string();
            if candidate.is_empty() {
                return Err(bad(line, "empty candidate".into()));
            }
            let acc = num(&rec[4], "acc")?;
            if !t.order.contains(&candidate) {
                t.order.push(candidate.clone());
            }
            if iteration == 1 {
                if !rec[1].is_empty() || !rec[3].is_empty() {
                    return Err(bad(line, "first iteration takes no pool or similarity".into()));
                }
                if t.initial.insert(candidate.clone(), acc).is_some() {
                    return Err(bad(line, format!("duplicate entry for {candidate}")));
                }
            } else {
                let pool: BTreeSet<String> = rec[1].split('+').map(str::to_string).collect();
                if rec[1].is_empty() || pool.contains(&candidate) {
                    return Err(bad(line, "pool must be nonempty and exclude the candidate".into()));
                }
                let sim = num(&rec[3], "similarity")?;
                let entry = t.steps.entry(pool).or_default();
                if entry.insert(candidate.clone(), (sim, acc)).is_some() {
                    return Err(bad(line, format!("duplicate entry for {candidate}")));
                }
            }
        }
        if t.initial.is_empty() {
            return Err(Error::format(origin, "no first-iteration rows"));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(f, path)
    }

    /// Candidates listed in the first iteration, in file order.
    pub fn candidates(&self) -> Vec<String> {
        self.order.iter().filter(|c| self.initial.contains_key(*c)).cloned().collect()
    }

    fn step(&self, pool_a: &[String]) -> Result<&BTreeMap<String, (f64, f64)>> {
        let key: BTreeSet<String> = pool_a.iter().cloned().collect();
        self.steps.get(&key).ok_or_else(|| Error::MissingTableEntry {
            task: "*".into(),
            pool: pool_a.join("+"),
        })
    }
}

impl AggregationBackend for ReplayTables {
    fn initial_accs(&mut self, _: &[String]) -> Result<BTreeMap<String, f64>> {
        Ok(self.initial.clone())
    }

    fn similarities(&mut self, pool_a: &[String], candidates: &[String]) -> Result<BTreeMap<String, f64>> {
        let step = self.step(pool_a)?;
        candidates
            .iter()
            .map(|c| {
                step.get(c).map(|&(s, _)| (c.clone(), s)).ok_or_else(|| Error::MissingTableEntry {
                    task: c.clone(),
                    pool: pool_a.join("+"),
                })
            })
            .collect()
    }

    fn integrate(&mut self, pool_a: &[String], candidate: &str) -> Result<f64> {
        self.step(pool_a)?
            .get(candidate)
            .map(|&(_, a)| a)
            .ok_or_else(|| Error::MissingTableEntry {
                task: candidate.into(),
                pool: pool_a.join("+"),
            })
    }
}

/// Runs the greedy selection over published tables instead of training.
pub fn replay_selection(tables: &ReplayTables) -> Result<AggregationState> {
    let mut backend = tables.clone();
    run_greedy(&tables.candidates(), &mut backend, &mut |_| Ok(()))
}

pub fn write_trace_csv(trace: &[IterationRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "pool_a", "similarities", "selected", "acc", "accepted"])?;
    for r in trace {
        let sims: Vec<String> = r.similarities.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        out.write_record([
            r.iteration.to_string(),
            r.pool_a.join("+"),
            sims.join(";"),
            r.selected.clone(),
            r.acc.to_string(),
            r.accepted.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("trace", e))?;
    Ok(())
}

/// Which backbone stands for the aggregate when measuring similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySource {
    /// The jointly pretrained backbone, before target fine-tuning.
    #[default]
    Pretrained,
    /// The fine-tuned backbone, as a literal reading of the loop.
    FineTuned,
}

/// Per-task results of the first stage.
#[derive(Debug, Clone)]
pub struct InitialRanking {
    pub best: String,
    /// Frozen proxy-pretrained backbones, before fine-tuning.
    pub snapshots: BTreeMap<String, TrainedModel>,
    pub finetuned: BTreeMap<String, TrainedModel>,
    pub accs: BTreeMap<String, f64>,
}

/// Pretrains, fine-tunes and evaluates every task on its own.
pub fn initial_ranking(tasks: &[ProxyTaskSpec], data: &SyntheticDataset, cfg: &TrainerConfig) -> Result<InitialRanking> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task is required"));
    }
    let mut snapshots = BTreeMap::new();
    let mut finetuned = BTreeMap::new();
    let mut accs = BTreeMap::new();
    for t in tasks {
        let run = || -> Result<(TrainedModel, TrainedModel, f64)> {
            let pre = pretrain_proxy(t, data, cfg)?;
            let ft = finetune_target(&pre, data, cfg)?;
            let acc = evaluate_acc(&ft, data)?;
            Ok((pre.frozen(), ft, acc))
        };
        let (pre, ft, acc) = run().map_err(|e| e.for_task(&t.task_id))?;
        snapshots.insert(t.task_id.clone(), pre);
        finetuned.insert(t.task_id.clone(), ft);
        accs.insert(t.task_id.clone(), acc);
    }
    let best = argmax_by_key(&accs).expect("nonempty").to_string();
    Ok(InitialRanking {
        best,
        snapshots,
        finetuned,
        accs,
    })
}

/// Training-backed source of similarities and accuracies.
pub struct TrainingBackend<'a> {
    data: &'a SyntheticDataset,
    cfg: TrainerConfig,
    source: SimilaritySource,
    tasks: BTreeMap<String, ProxyTaskSpec>,
    ranking: Option<InitialRanking>,
    snapshot_features: BTreeMap<String, FeatureMatrix>,
    /// Current aggregate: (pretrained, fine-tuned).
    current: Option<(TrainedModel, TrainedModel)>,
    pending: Option<(TrainedModel, TrainedModel)>,
}

impl<'a> TrainingBackend<'a> {
    pub fn new(tasks: &[ProxyTaskSpec], data: &'a SyntheticDataset, cfg: &TrainerConfig, source: SimilaritySource) -> Self {
        Self {
            data,
            cfg: cfg.clone(),
            source,
            tasks: tasks.iter().map(|t| (t.task_id.clone(), t.clone())).collect(),
            ranking: None,
            snapshot_features: BTreeMap::new(),
            current: None,
            pending: None,
        }
    }

    pub fn ranking(&self) -> Option<&InitialRanking> {
        self.ranking.as_ref()
    }

    /// Fine-tuned model of the last accepted aggregate.
    pub fn final_model(&self) -> Option<&TrainedModel> {
        self.current.as_ref().map(|(_, ft)| ft)
    }

    fn spec(&self, id: &str) -> Result<&ProxyTaskSpec> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::config("tasks", format!("unknown task `{id}`")))
    }
}

impl AggregationBackend for TrainingBackend<'_> {
    fn initial_accs(&mut self, candidates: &[String]) -> Result<BTreeMap<String, f64>> {
        let specs: Vec<ProxyTaskSpec> = candidates.iter().map(|c| self.spec(c).cloned()).collect::<Result<_>>()?;
        let ranking = initial_ranking(&specs, self.data, &self.cfg)?;
        let tap = self.cfg.tap();
        for (id, snap) in &ranking.snapshots {
            let f = extract_features(snap, self.data, Split::Probe, tap).map_err(|e| e.for_task(id))?;
            self.snapshot_features.insert(id.clone(), f);
        }
        let best = &ranking.best;
        self.current = Some((ranking.snapshots[best].clone(), ranking.finetuned[best].clone()));
        let accs = ranking.accs.clone();
        self.ranking = Some(ranking);
        Ok(accs)
    }

    fn similarities(&mut self, _pool_a: &[String], candidates: &[String]) -> Result<BTreeMap<String, f64>> {
        let (pre, ft) = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Aggregation("no aggregate yet".into()))?;
        let model = match self.source {
            SimilaritySource::Pretrained => pre,
            SimilaritySource::FineTuned => ft,
        };
        let mine = extract_features(model, self.data, Split::Probe, self.cfg.tap())?;
        candidates
            .iter()
            .map(|c| {
                let theirs = self
                    .snapshot_features
                    .get(c)
                    .ok_or_else(|| Error::Aggregation(format!("no snapshot for `{c}`")))?;
                Ok((c.clone(), lcka(&mine, theirs).map_err(|e| e.for_task(c))?))
            })
            .collect()
    }

    fn integrate(&mut self, pool_a: &[String], candidate: &str) -> Result<f64> {
        let mut specs: Vec<ProxyTaskSpec> = pool_a.iter().map(|c| self.spec(c).cloned()).collect::<Result<_>>()?;
        specs.push(self.spec(candidate)?.clone());
        let pre = train_multitask(&specs, self.data, &self.cfg)?;
        let ft = finetune_target(&pre, self.data, &self.cfg)?;
        let acc = evaluate_acc(&ft, self.data)?;
        self.pending = Some((pre.frozen(), ft));
        Ok(acc)
    }

    fn accept(&mut self) {
        if let Some(p) = self.pending.take() {
            self.current = Some(p);
        }
    }
}

/// Result of a full training-backed aggregation run.
pub struct MtAsslOutcome {
    pub state: AggregationState,
    pub final_model: TrainedModel,
    pub initial_accs: BTreeMap<String, f64>,
}

/// Greedy aggregation with real training at every step.
pub fn run_mt_assl(
    tasks: &[ProxyTaskSpec],
    data: &SyntheticDataset,
    cfg: &TrainerConfig,
    source: SimilaritySource,
    on_record: &mut dyn FnMut(&AggregationState) -> Result<()>,
) -> Result<MtAsslOutcome> {
    let ids: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
    let mut backend = TrainingBackend::new(tasks, data, cfg, source);
    let state = run_greedy(&ids, &mut backend, on_record)?;
    let final_model = backend.final_model().cloned().expect("set by the first stage");
    let initial_accs = backend.ranking().map(|r| r.accs.clone()).unwrap_or_default();
    Ok(MtAsslOutcome {
        state,
        final_model,
        initial_accs,
    })
}
