//! Training regimes: proxy pretraining, joint multi-task training, target
//! fine-tuning with accuracy evaluation, and self-aggregative training
//! against a frozen reference.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{mix_seed, Split, SyntheticDataset, INPUT_DIM, NUM_CLASSES};
use crate::data::tasks::{flatten, labeled_batches, ntxent_loss, Batch, LossKind, ProxyTaskSpec, PseudoLabels};
use crate::error::{Error, Result};
use crate::lcka::{lcka_loss, FeatureMatrix};
use crate::tensor::{adam_step, checkpoint, hash_params, AdamState, Head, MlpBackbone, ParamGrads, Tape, Tensor, Var};

pub const TARGET_HEAD: &str = "target";

const STREAM_INIT: u64 = 0x1A17;
const STREAM_HEAD: u64 = 0x4EAD;
const STREAM_ORDER: u64 = 0x0DE7;
const STREAM_BATCH: u64 = 0xBA7C;
const STREAM_TARGET: u64 = 0x7A76;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Backbone and target head are both updated.
    #[default]
    Full,
    /// Only the target head is trained; for analysis.
    LinearProbe,
}

/// How the similarity to the frozen reference enters the self-aggregative
/// objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComplementObjective {
    /// Adds `+S`, so training lowers the similarity to the reference.
    #[default]
    Dissimilar,
    /// Adds `lcka_loss = −S` as written in the objective, which raises it.
    Literal,
}

impl ComplementObjective {
    /// Factor applied to `lcka_loss` (which equals `−S`).
    pub fn loss_sign(self) -> f64 {
        match self {
            ComplementObjective::Dissimilar => -1.0,
            ComplementObjective::Literal => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub epochs_proxy: usize,
    pub epochs_finetune: usize,
    pub epochs_selfagg: usize,
    pub batch_size: usize,
    pub lr_proxy: f64,
    pub lr_finetune: f64,
    pub complement_weight: f64,
    pub complement_objective: ComplementObjective,
    /// Backbone layer used for features; `None` means the last layer.
    pub feature_tap: Option<usize>,
    pub seed: u64,
    pub widths: Vec<usize>,
    pub finetune_mode: FinetuneMode,
    /// Head-only epochs before fine-tuning proper, so that a random target
    /// head does not scramble pretrained features.
    pub head_warmup_epochs: usize,
    pub lr_head_warmup: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            epochs_proxy: 3,
            epochs_finetune: 20,
            epochs_selfagg: 5,
            batch_size: 32,
            lr_proxy: 1e-3,
            lr_finetune: 1e-4,
            complement_weight: 1.0,
            complement_objective: ComplementObjective::Dissimilar,
            feature_tap: None,
            seed: 0,
            widths: vec![INPUT_DIM, 128, 64, 32],
            finetune_mode: FinetuneMode::Full,
            head_warmup_epochs: 30,
            lr_head_warmup: 1e-2,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs_proxy", self.epochs_proxy),
            ("epochs_finetune", self.epochs_finetune),
            ("epochs_selfagg", self.epochs_selfagg),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.batch_size < 8 {
            return Err(Error::config("batch_size", format!("must be at least 8, got {}", self.batch_size)));
        }
        let lrs = [
            ("lr_proxy", self.lr_proxy),
            ("lr_finetune", self.lr_finetune),
            ("lr_head_warmup", self.lr_head_warmup),
        ];
        for (field, v) in lrs {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.complement_weight >= 0.0 && self.complement_weight.is_finite()) {
            return Err(Error::config("complement_weight", "must be nonnegative"));
        }
        if self.widths.len() < 2 || self.widths[0] != INPUT_DIM || self.widths.contains(&0) {
            return Err(Error::config(
                "widths",
                format!("must start at {INPUT_DIM} and list at least one positive layer width"),
            ));
        }
        if let Some(t) = self.feature_tap {
            if t + 1 >= self.widths.len() {
                return Err(Error::config("feature_tap", format!("layer {t} does not exist")));
            }
        }
        Ok(())
    }

    pub fn tap(&self) -> usize {
        self.feature_tap.unwrap_or(self.widths.len() - 2)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub regime: String,
    pub tasks: Vec<String>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub complement_weight: Option<f64>,
    /// Optimizer steps taken per task.
    pub steps: BTreeMap<String, u64>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub task_id: String,
    pub loss_component: String,
    pub value: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "task_id", "loss_component", "value"])?;
    for r in rows {
        out.write_record([
            r.epoch.to_string(),
            r.task_id.clone(),
            r.loss_component.clone(),
            r.value.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("metrics", e))?;
    Ok(())
}

/// Backbone plus named heads. Once frozen, parameters can no longer change
/// and every read re-checks the hash taken at freeze time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    backbone: MlpBackbone,
    heads: BTreeMap<String, Head>,
    provenance: Vec<ProvenanceRecord>,
    metrics: Vec<MetricRow>,
    frozen_hash: Option<String>,
}

impl TrainedModel {
    /// Untrained backbone from the config seed, no heads.
    pub fn init(cfg: &TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[STREAM_INIT]));
        Ok(Self::from_parts(MlpBackbone::new(&cfg.widths, &mut rng)?, BTreeMap::new()))
    }

    pub fn from_parts(backbone: MlpBackbone, heads: BTreeMap<String, Head>) -> Self {
        Self {
            backbone,
            heads,
            provenance: vec![],
            metrics: vec![],
            frozen_hash: None,
        }
    }

    pub fn param_hash(&self) -> String {
        let mut named = self.backbone.named_params("backbone");
        for (id, h) in &self.heads {
            named.extend(h.named_params(&format!("head.{id}")));
        }
        hash_params(named)
    }

    pub fn freeze(&mut self) {
        if self.frozen_hash.is_none() {
            self.frozen_hash = Some(self.param_hash());
        }
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_hash.is_some()
    }

    pub fn frozen_hash(&self) -> Option<&str> {
        self.frozen_hash.as_deref()
    }

    pub fn verify_intact(&self) -> Result<()> {
        match &self.frozen_hash {
            Some(h) if *h != self.param_hash() => Err(Error::Frozen("parameter hash changed after freezing".into())),
            _ => Ok(()),
        }
    }

    pub fn backbone(&self) -> Result<&MlpBackbone> {
        self.verify_intact()?;
        Ok(&self.backbone)
    }

    pub fn head(&self, task_id: &str) -> Result<&Head> {
        self.verify_intact()?;
        self.heads
            .get(task_id)
            .ok_or_else(|| Error::Model(format!("no head for `{task_id}`")))
    }

    pub fn head_ids(&self) -> Vec<&str> {
        self.heads.keys().map(String::as_str).collect()
    }

    pub fn provenance(&self) -> &[ProvenanceRecord] {
        &self.provenance
    }

    pub fn metrics(&self) -> &[MetricRow] {
        &self.metrics
    }

    pub fn with_head(mut self, task_id: &str, head: Head) -> Result<Self> {
        self.ensure_mutable()?;
        self.heads.insert(task_id.to_string(), head);
        Ok(self)
    }

    fn ensure_mutable(&self) -> Result<()> {
        if self.is_frozen() {
            return Err(Error::Frozen("model is frozen".into()));
        }
        Ok(())
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut named = self.backbone.named_params("backbone");
        for (id, h) in &self.heads {
            named.extend(h.named_params(&format!("head.{id}")));
        }
        named
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.verify_intact()?;
        let named = self.named_tensors();
        checkpoint::save(path, named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::load(path)?;
        let bad = |m: String| Error::format(path, m);
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        let mut head_parts: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for (name, t) in entries {
            let parts: Vec<&str> = name.split('.').collect();
            match parts.as_slice() {
                ["backbone", i, kind] => {
                    let i: usize = i.parse().map_err(|_| bad(format!("bad layer index in {name}")))?;
                    match *kind {
                        "weight" => weights.insert(i, t),
                        "bias" => biases.insert(i, t),
                        _ => return Err(bad(format!("unknown tensor {name}"))),
                    };
                }
                ["head", id @ .., kind] if !id.is_empty() => {
                    let e = head_parts.entry(id.join(".")).or_default();
                    match *kind {
                        "weight" => e.0 = Some(t),
                        "bias" => e.1 = Some(t),
                        _ => return Err(bad(format!("unknown tensor {name}"))),
                    }
                }
                _ => return Err(bad(format!("unknown tensor {name}"))),
            }
        }
        if weights.keys().copied().ne(0..weights.len()) || biases.keys().copied().ne(0..weights.len()) {
            return Err(bad("backbone layers are not contiguous".into()));
        }
        let backbone = MlpBackbone::from_parts(weights.into_values().collect(), biases.into_values().collect())?;
        let mut heads = BTreeMap::new();
        for (id, (w, b)) in head_parts {
            match (w, b) {
                (Some(w), Some(b)) => heads.insert(id, Head::from_parts(w, b)?),
                _ => return Err(bad(format!("head {id} is incomplete"))),
            };
        }
        Ok(Self::from_parts(backbone, heads))
    }
}

/// Builds the task loss of `batch` on top of taped backbone features.
fn task_loss_on_tape(
    tape: &mut Tape,
    task: &ProxyTaskSpec,
    head: &Head,
    head_vars: &ParamGrads,
    features: Var,
    batch: &Batch,
) -> Result<Var> {
    let out = head.forward_on_tape(tape, head_vars, features)?;
    match (&batch.labels, task.loss_kind) {
        (PseudoLabels::Classes(l), LossKind::Classification) => tape.softmax_cross_entropy(out, l),
        (PseudoLabels::Target(t), LossKind::Reconstruction) => tape.mse_loss(out, t),
        (PseudoLabels::Pairs(p), LossKind::Contrastive) => ntxent_loss(tape, out, p, task.temperature),
        _ => Err(Error::Model(format!("labels do not fit the loss of `{}`", task.task_id))),
    }
}

/// A recorded training objective ready for a backward pass.
pub struct StepGraph {
    pub tape: Tape,
    pub backbone_vars: ParamGrads,
    pub head_vars: ParamGrads,
    pub total: Var,
    pub task_loss: Var,
    pub complement_loss: Option<Var>,
}

/// Records `L_task + w·lcka_loss` for one batch, `w` being the signed
/// complement weight. The complement term compares the new backbone's tapped
/// features with the reference's features of the same batch, which enter the
/// tape as constants.
pub fn build_step_graph(
    model: &TrainedModel,
    task: &ProxyTaskSpec,
    batch: &Batch,
    complement: Option<(&MlpBackbone, usize, f64)>,
) -> Result<StepGraph> {
    let head = model.head(&task.task_id)?;
    let mut tape = Tape::new();
    let backbone_vars = model.backbone.bind(&mut tape);
    let head_vars = head.bind(&mut tape);
    let x = tape.constant(batch.inputs.detach());
    let acts = model.backbone.forward_on_tape(&mut tape, &backbone_vars, x)?;
    let features = *acts.last().expect("at least one layer");
    let task_loss = task_loss_on_tape(&mut tape, task, head, &head_vars, features, batch)?;
    let (total, complement_loss) = match complement {
        Some((reference, tap, weight)) if weight != 0.0 => {
            let ref_feats = FeatureMatrix::from_tensor(&reference.forward_tap(&batch.inputs, tap)?, "reference")?;
            let com = lcka_loss(&mut tape, acts[tap], &ref_feats)?;
            let weighted = tape.scale(com, weight)?;
            (tape.add(task_loss, weighted)?, Some(com))
        }
        _ => (task_loss, None),
    };
    Ok(StepGraph {
        tape,
        backbone_vars,
        head_vars,
        total,
        task_loss,
        complement_loss,
    })
}

struct Optimizers {
    backbone: AdamState,
    heads: BTreeMap<String, AdamState>,
}

impl Optimizers {
    fn new() -> Self {
        Self {
            backbone: AdamState::default(),
            heads: BTreeMap::new(),
        }
    }
}

struct StepLosses {
    task: f64,
    complement: Option<f64>,
}

fn train_step(
    model: &mut TrainedModel,
    task: &ProxyTaskSpec,
    batch: &Batch,
    lr: f64,
    opt: &mut Optimizers,
    update_backbone: bool,
    complement: Option<(&MlpBackbone, usize, f64)>,
    location: impl Fn() -> String,
) -> Result<StepLosses> {
    let mut g = build_step_graph(model, task, batch, complement)?;
    let total = g.tape.value(g.total)?.item();
    if !total.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            location: location(),
        });
    }
    let losses = StepLosses {
        task: g.tape.value(g.task_loss)?.item(),
        complement: g.complement_loss.map(|v| g.tape.value(v).map(Tensor::item)).transpose()?,
    };
    let grads = g.tape.backward(g.total)?;
    if update_backbone {
        model.backbone.absorb(&g.backbone_vars, &grads)?;
        adam_step(&mut model.backbone.params_mut(), &mut opt.backbone, lr)?;
    }
    let head = model.heads.get_mut(&task.task_id).expect("head bound above");
    head.absorb(&g.head_vars, &grads)?;
    let state = opt.heads.entry(task.task_id.clone()).or_default();
    adam_step(&mut head.params_mut(), state, lr)?;
    Ok(losses)
}

/// Minibatches of one epoch: a seeded shuffle cut into full batches. A split
/// smaller than one batch is used whole.
fn epoch_chunks(indices: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if order.len() < batch_size {
        return vec![order];
    }
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

/// Pseudo-labelled batch for `task` over the given dataset indices.
pub fn proxy_batch(data: &SyntheticDataset, task: &ProxyTaskSpec, indices: &[usize], seed: u64) -> Result<Batch> {
    if let Some(&i) = indices.iter().find(|&&i| data.split_of(i) == Split::Probe) {
        return Err(Error::WrongSplit(format!("probe image {i} in a training batch")));
    }
    let imgs: Vec<_> = indices.iter().map(|&i| data.image(i)).collect();
    let mut batch = task.make_batch(&imgs, seed).map_err(|e| e.for_task(&task.task_id))?;
    batch.sources = indices.to_vec();
    Ok(batch)
}

fn add_heads(model: &mut TrainedModel, tasks: &[ProxyTaskSpec], cfg: &TrainerConfig) -> Result<()> {
    let width = model.backbone.feature_width();
    for t in tasks {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[STREAM_HEAD, t.rng_stream_id]));
        model
            .heads
            .insert(t.task_id.clone(), Head::new(width, t.head_output_width, &mut rng)?);
    }
    Ok(())
}

fn check_tasks(tasks: &[ProxyTaskSpec]) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task is required"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in tasks {
        if !seen.insert(&t.task_id) {
            return Err(Error::config("tasks", format!("duplicate task `{}`", t.task_id)));
        }
    }
    Ok(())
}

/// Shared loop behind proxy, multi-task and self-aggregative training. Each
/// epoch, every task shuffles the pretrain split independently; batch `b`
/// of every task is visited in task order before batch `b + 1`.
fn proxy_loop(
    model: &mut TrainedModel,
    tasks: &[ProxyTaskSpec],
    data: &SyntheticDataset,
    cfg: &TrainerConfig,
    epochs: usize,
    complement: Option<(&MlpBackbone, usize, f64)>,
) -> Result<BTreeMap<String, u64>> {
    let pool = data.indices(Split::Pretrain);
    if pool.is_empty() {
        return Err(Error::WrongSplit("pretrain split is empty".into()));
    }
    let mut opt = Optimizers::new();
    let mut steps: BTreeMap<String, u64> = tasks.iter().map(|t| (t.task_id.clone(), 0)).collect();
    for epoch in 0..epochs {
        let chunks: Vec<Vec<Vec<usize>>> = tasks
            .iter()
            .map(|t| {
                let s = mix_seed(cfg.seed, &[STREAM_ORDER, t.rng_stream_id, epoch as u64]);
                epoch_chunks(&pool, cfg.batch_size, s)
            })
            .collect();
        let mut sums = vec![(0.0, 0.0); tasks.len()];
        let n_batches = chunks[0].len();
        for b in 0..n_batches {
            for (k, task) in tasks.iter().enumerate() {
                let seed = mix_seed(cfg.seed, &[STREAM_BATCH, task.rng_stream_id, epoch as u64, b as u64]);
                let batch = proxy_batch(data, task, &chunks[k][b], seed)?;
                let losses = train_step(model, task, &batch, cfg.lr_proxy, &mut opt, true, complement, || {
                    format!("task {}, epoch {epoch}, batch {b}", task.task_id)
                })
                .map_err(|e| e.for_task(&task.task_id))?;
                sums[k].0 += losses.task;
                sums[k].1 -= losses.complement.unwrap_or(0.0);
                *steps.get_mut(&task.task_id).unwrap() += 1;
            }
        }
        for (k, task) in tasks.iter().enumerate() {
            let mut push = |component: &str, v: f64| {
                model.metrics.push(MetricRow {
                    epoch,
                    task_id: task.task_id.clone(),
                    loss_component: component.into(),
                    value: v / n_batches as f64,
                })
            };
            push("self", sums[k].0);
            if complement.is_some() {
                push("similarity", sums[k].1);
            }
        }
    }
    Ok(steps)
}

/// Trains a fresh backbone and one head on a single pretext task.
pub fn pretrain_proxy(task: &ProxyTaskSpec, data: &SyntheticDataset, cfg: &TrainerConfig) -> Result<TrainedModel> {
    train_multitask(std::slice::from_ref(task), data, cfg)
}

/// Joint training of one shared backbone with one head per task, in a
/// round-robin schedule with uniform loss weights.
pub fn train_multitask(tasks: &[ProxyTaskSpec], data: &SyntheticDataset, cfg: &TrainerConfig) -> Result<TrainedModel> {
    check_tasks(tasks)?;
    let mut model = TrainedModel::init(cfg)?;
    add_heads(&mut model, tasks, cfg)?;
    let steps = proxy_loop(&mut model, tasks, data, cfg, cfg.epochs_proxy, None)?;
    model.provenance.push(ProvenanceRecord {
        regime: if tasks.len() == 1 { "proxy" } else { "multitask" }.into(),
        tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
        seed: cfg.seed,
        epochs: cfg.epochs_proxy,
        lr: cfg.lr_proxy,
        complement_weight: None,
        steps,
        note: "round-robin, uniform weights".into(),
    });
    Ok(model)
}

/// Sum of the task losses at the current parameters, one batch per task,
/// recorded on a single tape.
pub fn joint_loss(model: &TrainedModel, tasks: &[ProxyTaskSpec], batches: &[Batch]) -> Result<f64> {
    if tasks.len() != batches.len() || tasks.is_empty() {
        return Err(Error::config("tasks", "need one batch per task"));
    }
    let backbone = model.backbone()?;
    let mut tape = Tape::new();
    let bv = backbone.bind(&mut tape);
    let mut total: Option<Var> = None;
    for (task, batch) in tasks.iter().zip(batches) {
        let head = model.head(&task.task_id)?;
        let hv = head.bind(&mut tape);
        let x = tape.constant(batch.inputs.detach());
        let feats = *backbone.forward_on_tape(&mut tape, &bv, x)?.last().unwrap();
        let l = task_loss_on_tape(&mut tape, task, head, &hv, feats, batch)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    Ok(tape.value(total.unwrap())?.item())
}

/// Loss of one task on one batch at the current parameters.
pub fn task_loss(model: &TrainedModel, task: &ProxyTaskSpec, batch: &Batch) -> Result<f64> {
    let g = build_step_graph(model, task, batch, None)?;
    Ok(g.tape.value(g.task_loss)?.item())
}

/// Fine-tunes on the whole labelled train split with a fresh 16-way head.
pub fn finetune_target(model: &TrainedModel, data: &SyntheticDataset, cfg: &TrainerConfig) -> Result<TrainedModel> {
    finetune_target_on(model, data, &data.indices(Split::Train), cfg)
}

/// Fine-tunes on the given labelled indices. Proxy heads are carried along
/// unchanged.
pub fn finetune_target_on(
    model: &TrainedModel,
    data: &SyntheticDataset,
    indices: &[usize],
    cfg: &TrainerConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    model.ensure_mutable()?;
    if indices.is_empty() {
        return Err(Error::WrongSplit("no labelled training samples".into()));
    }
    let mut out = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[STREAM_TARGET]));
    out.heads.insert(
        TARGET_HEAD.into(),
        Head::new(out.backbone.feature_width(), NUM_CLASSES, &mut rng)?,
    );
    let target = target_spec();
    let warmup = cfg.head_warmup_epochs;
    let mut opt = Optimizers::new();
    let mut steps = 0;
    for epoch in 0..warmup + cfg.epochs_finetune {
        if epoch == warmup {
            opt = Optimizers::new();
        }
        let (lr, update_backbone) = if epoch < warmup {
            (cfg.lr_head_warmup, false)
        } else {
            (cfg.lr_finetune, cfg.finetune_mode == FinetuneMode::Full)
        };
        let seed = mix_seed(cfg.seed, &[STREAM_TARGET, epoch as u64]);
        let batches = labeled_batches(data, indices, cfg.batch_size, seed)?;
        let mut sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let l = train_step(&mut out, &target, batch, lr, &mut opt, update_backbone, None, || {
                format!("target, epoch {epoch}, batch {b}")
            })?;
            sum += l.task;
            steps += 1;
        }
        out.metrics.push(MetricRow {
            epoch,
            task_id: TARGET_HEAD.into(),
            loss_component: "target".into(),
            value: sum / batches.len() as f64,
        });
    }
    out.provenance.push(ProvenanceRecord {
        regime: "finetune".into(),
        tasks: vec![TARGET_HEAD.into()],
        seed: cfg.seed,
        epochs: warmup + cfg.epochs_finetune,
        lr: cfg.lr_finetune,
        complement_weight: None,
        steps: BTreeMap::from([(TARGET_HEAD.to_string(), steps)]),
        note: format!(
            "{:?} on {} samples after {warmup} head-only epochs",
            cfg.finetune_mode,
            indices.len()
        ),
    });
    Ok(out)
}

fn target_spec() -> ProxyTaskSpec {
    let mut spec = ProxyTaskSpec::new(crate::data::TaskKind::Rotation);
    spec.task_id = TARGET_HEAD.into();
    spec.head_output_width = NUM_CLASSES;
    spec.pseudo_label_space = "shape/color class".into();
    spec
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Target accuracy on the labelled test split.
pub fn evaluate_acc(model: &TrainedModel, data: &SyntheticDataset) -> Result<f64> {
    evaluate_on(model, data, &data.indices(Split::Test))
}

pub fn evaluate_on(model: &TrainedModel, data: &SyntheticDataset, indices: &[usize]) -> Result<f64> {
    let head = model.head(TARGET_HEAD)?;
    let backbone = model.backbone()?;
    if indices.is_empty() {
        return Err(Error::WrongSplit("no evaluation samples".into()));
    }
    if let Some(&i) = indices.iter().find(|&&i| !data.split_of(i).is_labeled()) {
        return Err(Error::WrongSplit(format!("sample {i} is unlabelled")));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(256) {
        let imgs: Vec<_> = chunk.iter().map(|&i| data.image(i)).collect();
        let logits = head.forward(&backbone.forward(&flatten(&imgs)?)?)?;
        for (r, &i) in chunk.iter().enumerate() {
            if argmax(logits.row(r)) == data.target_label(i) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Activations of layer `tap` for every image of `split`, in split order.
pub fn extract_features(model: &TrainedModel, data: &SyntheticDataset, split: Split, tap: usize) -> Result<FeatureMatrix> {
    let backbone = model.backbone()?;
    backbone.tap_width(tap)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::WrongSplit(format!("{} is empty", split.name())));
    }
    let imgs: Vec<_> = idx.iter().map(|&i| data.image(i)).collect();
    let feats = backbone.forward_tap(&flatten(&imgs)?, tap)?;
    FeatureMatrix::from_tensor(&feats, format!("{}@{tap}", split.name()))
}

/// Trains a fresh backbone on `task` while pushing its tapped features away
/// from those of a frozen reference: `L_task + α·(−S)`.
pub fn train_self_aggregative(
    task: &ProxyTaskSpec,
    reference: &TrainedModel,
    data: &SyntheticDataset,
    cfg: &TrainerConfig,
) -> Result<TrainedModel> {
    if !reference.is_frozen() {
        return Err(Error::Frozen("reference model must be frozen".into()));
    }
    let ref_backbone = reference.backbone()?;
    let before = reference.param_hash();
    let tap = cfg.tap();
    let mut model = TrainedModel::init(cfg)?;
    let (mine, theirs) = (model.backbone.tap_width(tap)?, ref_backbone.tap_width(tap)?);
    if mine != theirs {
        return Err(Error::Model(format!(
            "feature width {mine} does not match reference width {theirs} at layer {tap}"
        )));
    }
    add_heads(&mut model, std::slice::from_ref(task), cfg)?;
    let alpha = cfg.complement_weight;
    let steps = proxy_loop(
        &mut model,
        std::slice::from_ref(task),
        data,
        cfg,
        cfg.epochs_selfagg,
        (alpha > 0.0).then_some((ref_backbone, tap, alpha * cfg.complement_objective.loss_sign())),
    )?;
    if reference.param_hash() != before {
        return Err(Error::Frozen("reference parameters changed during training".into()));
    }
    model.provenance.push(ProvenanceRecord {
        regime: "self_aggregative".into(),
        tasks: vec![task.task_id.clone()],
        seed: cfg.seed,
        epochs: cfg.epochs_selfagg,
        lr: cfg.lr_proxy,
        complement_weight: Some(alpha),
        steps,
        note: format!(
            "fresh init, {:?} complement, reference {before}, layer {tap}",
            cfg.complement_objective
        ),
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, TaskKind};

    fn small_cfg() -> TrainerConfig {
        TrainerConfig {
            epochs_proxy: 1,
            epochs_finetune: 1,
            epochs_selfagg: 1,
            batch_size: 16,
            head_warmup_epochs: 1,
            widths: vec![INPUT_DIM, 16, 8],
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainerConfig::default().validate().is_ok());
        let bad = TrainerConfig { epochs_proxy: 0, ..TrainerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "epochs_proxy"));
        let bad = TrainerConfig { lr_finetune: 0.0, ..TrainerConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainerConfig { feature_tap: Some(3), ..TrainerConfig::default() };
        assert!(bad.validate().is_err());
        assert_eq!(TrainerConfig::default().tap(), 2);
    }

    #[test]
    fn argmax_lowest_index_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }

    #[test]
    fn pretrain_deterministic_and_head_width() {
        let data = generate_dataset(128, 1).unwrap();
        let task = ProxyTaskSpec::new(TaskKind::Rotation);
        let a = pretrain_proxy(&task, &data, &small_cfg()).unwrap();
        let b = pretrain_proxy(&task, &data, &small_cfg()).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(a.head("rotation").unwrap().output_width(), 4);
        assert!(a.metrics().iter().all(|m| m.value.is_finite()));
    }

    #[test]
    fn frozen_model_rejects_mutation() {
        let data = generate_dataset(128, 1).unwrap();
        let m = TrainedModel::init(&small_cfg()).unwrap().frozen();
        assert!(matches!(finetune_target(&m, &data, &small_cfg()), Err(Error::Frozen(_))));
        assert!(m.verify_intact().is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = generate_dataset(128, 2).unwrap();
        let m = pretrain_proxy(&ProxyTaskSpec::new(TaskKind::Jigsaw), &data, &small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = TrainedModel::load(&p).unwrap();
        assert_eq!(back.param_hash(), m.param_hash());
    }

    #[test]
    fn self_aggregative_requires_frozen_reference() {
        let data = generate_dataset(128, 3).unwrap();
        let task = ProxyTaskSpec::new(TaskKind::Rotation);
        let r = TrainedModel::init(&small_cfg()).unwrap();
        assert!(matches!(
            train_self_aggregative(&task, &r, &data, &small_cfg()),
            Err(Error::Frozen(_))
        ));
        let wide = TrainerConfig { widths: vec![INPUT_DIM, 16, 4], ..small_cfg() };
        let r = TrainedModel::init(&wide).unwrap().frozen();
        assert!(matches!(
            train_self_aggregative(&task, &r, &data, &small_cfg()),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn duplicate_tasks_rejected() {
        let data = generate_dataset(128, 3).unwrap();
        let t = ProxyTaskSpec::new(TaskKind::Rotation);
        assert!(train_multitask(&[t.clone(), t], &data, &small_cfg()).is_err());
    }
}
