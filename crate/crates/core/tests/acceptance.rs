//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use aggssl::aggregator::{replay_selection, run_mt_assl, AggregationState, ReplayTables, SimilaritySource};
use aggssl::data::dataset::Split;
use aggssl::data::tasks::{ProxyTaskSpec, TaskKind};
use aggssl::data::generate_dataset;
use aggssl::harness::experiments::{pairwise_rows, self_assl_comparison, SeedRun};
use aggssl::harness::run_experiment;
use aggssl::lcka::{gram, gram_alignment, lcka, FeatureMatrix};
use aggssl::tensor::Head;
use aggssl::trainer::{
    build_step_graph, evaluate_acc, finetune_target, pretrain_proxy, proxy_batch, train_self_aggregative, TrainedModel,
    TrainerConfig,
};
use common::*;
use rand::SeedableRng;

const SEEDS: std::ops::Range<u64> = 0..5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fixture(name: &str) -> ReplayTables {
    ReplayTables::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)).unwrap()
}

/// Accepted aggregates in order, then the rejected task if the run stopped
/// on a rejection.
fn sequence(s: &AggregationState) -> (Vec<Vec<String>>, Option<String>) {
    let mut pools = Vec::new();
    let mut rejected = None;
    for r in &s.trace {
        if r.accepted {
            let mut p = r.pool_a.clone();
            p.push(r.selected.clone());
            pools.push(p);
        } else {
            rejected = Some(r.selected.clone());
        }
    }
    (pools, rejected)
}

fn replay_criterion(name: &str, pools: &[&[&str]], reject: &str, best: f64) -> Outcome {
    let t = Instant::now();
    let s = replay_selection(&fixture(name)).unwrap();
    let elapsed = t.elapsed();
    let (got, rejected) = sequence(&s);
    let want: Vec<Vec<String>> = pools.iter().map(|p| p.iter().map(|s| s.to_string()).collect()).collect();
    let stopped = s.trace.last().is_some_and(|r| !r.accepted);
    let pass = got == want && rejected.as_deref() == Some(reject) && stopped && s.best_acc == best && elapsed < Duration::from_secs(1);
    outcome(pass, format!("{got:?} then reject {rejected:?}, best_acc {}, {elapsed:?}", s.best_acc))
}

fn c1() -> Outcome {
    replay_criterion(
        "stl10_trace.csv",
        &[&["SimCLR"], &["SimCLR", "2D Rot"], &["SimCLR", "2D Rot", "SRC"]],
        "Inpaint",
        79.43,
    )
}

fn c2() -> Outcome {
    replay_criterion("brain_ct_trace.csv", &[&["SC-ASSL"], &["SC-ASSL", "Cube"]], "3D Rot", 90.20)
}

fn c3() -> Outcome {
    let t = Instant::now();
    let e = lcka_invariants(200, 3);
    let elapsed = t.elapsed();
    let pass = e.below_zero < 1e-9
        && e.above_one < 1e-9
        && e.out_of_range == 0
        && e.symmetry < 1e-12
        && e.self_similarity < 1e-10
        && e.orthogonal < 1e-8
        && e.scaling < 1e-10
        && e.mean_shift < 1e-10
        && elapsed < Duration::from_secs(10);
    outcome(pass, format!("{e:?}, {elapsed:?}"))
}

fn c4() -> Outcome {
    let t = Instant::now();
    let dual = dual_form_gap(100);
    let centering = centering_gap(50);
    let elapsed = t.elapsed();
    let pass = dual < 1e-8 && centering < 1e-10 && elapsed < Duration::from_secs(5);
    outcome(pass, format!("gram vs feature form {dual:.2e}, one-sided vs double centering {centering:.2e}, {elapsed:?}"))
}

fn c5() -> Outcome {
    let t = Instant::now();
    let errs = [
        ("cross-entropy", worst_case(ce_case)),
        ("mse", worst_case(mse_case)),
        ("nt-xent", worst_case(ntxent_case)),
        ("lcka_loss", worst_case(lcka_loss_case)),
    ];
    let elapsed = t.elapsed();
    let pass = errs.iter().all(|(_, e)| *e < GRAD_REL_TOL) && elapsed < Duration::from_secs(30);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    outcome(pass, format!("worst relative error over {GRAD_CONFIGS} configs: {}, {elapsed:?}", detail.join(", ")))
}

fn c6() -> Outcome {
    let (x, y) = fixed_example();
    let oracle = oracle_lcka(&x, &y);
    let fx = FeatureMatrix::new(4, 2, x.concat(), "x").unwrap();
    let fy = FeatureMatrix::new(4, 2, y.concat(), "y").unwrap();
    let direct = gram_alignment(&gram(&fx), &gram(&fy), 4, ["x", "y"]).unwrap();
    let twice = |m: &Mat| m.iter().chain(m).cloned().collect::<Mat>();
    let public = lcka(&features(&twice(&x), "x"), &features(&twice(&y), "y")).unwrap();
    let pass = (oracle - FIXED_EXAMPLE_LCKA).abs() < 1e-15
        && (direct - FIXED_EXAMPLE_LCKA).abs() < 1e-10
        && (public - FIXED_EXAMPLE_LCKA).abs() < 1e-10;
    outcome(pass, format!("frozen {FIXED_EXAMPLE_LCKA}, oracle {oracle}, implementation {direct}, duplicated-sample lcka {public}"))
}

fn seed_run(seed: u64, trainer: &TrainerConfig) -> SeedRun {
    SeedRun {
        index: seed as usize,
        data: generate_dataset(2896, seed).unwrap(),
        trainer: trainer.with_seed(seed),
    }
}

fn c7() -> Outcome {
    let t = Instant::now();
    let tasks = [ProxyTaskSpec::new(TaskKind::Rotation), ProxyTaskSpec::new(TaskKind::Color)];
    let mut deltas = Vec::new();
    for seed in SEEDS {
        let rows = pairwise_rows(&tasks, &seed_run(seed, &TrainerConfig::default())).unwrap();
        deltas.push(100.0 * rows[0].max_delta);
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    let elapsed = t.elapsed();
    let pass = mean >= 2.0 && elapsed < Duration::from_secs(600);
    let per_seed: Vec<String> = deltas.iter().map(|d| format!("{d:+.2}")).collect();
    outcome(pass, format!("Int - Max = {mean:+.2} points (per seed {}), {elapsed:?}", per_seed.join(" ")))
}

fn self_assl_config() -> TrainerConfig {
    TrainerConfig {
        epochs_proxy: 5,
        epochs_selfagg: 5,
        complement_weight: 1.0,
        ..TrainerConfig::default()
    }
}

/// Criterion 8 results kept for the frozen-reference check.
struct SelfAsslRuns {
    hashes_equal: bool,
    runs: usize,
    outcome: Outcome,
}

fn c8() -> SelfAsslRuns {
    let t = Instant::now();
    let task = ProxyTaskSpec::new(TaskKind::Jigsaw);
    let (mut s0, mut s1, mut a0, mut a1) = (0.0, 0.0, 0.0, 0.0);
    let mut hashes_equal = true;
    let mut runs = 0;
    for seed in SEEDS {
        let cmp = self_assl_comparison(&task, &seed_run(seed, &self_assl_config())).unwrap();
        hashes_equal &= cmp.reference_hash_before == cmp.reference_hash_after;
        runs += cmp.rows.len();
        let (off, on) = (&cmp.rows[0], &cmp.rows[1]);
        assert_eq!((off.complement_weight, on.complement_weight), (0.0, 1.0));
        s0 += off.similarity;
        s1 += on.similarity;
        a0 += off.acc;
        a1 += on.acc;
    }
    let n = SEEDS.count() as f64;
    let (s0, s1, a0, a1) = (s0 / n, s1 / n, a0 / n, a1 / n);
    let elapsed = t.elapsed();
    let pass = s1 <= s0 - 0.05 && 100.0 * a1 >= 100.0 * a0 - 0.5 && elapsed < Duration::from_secs(600);
    SelfAsslRuns {
        hashes_equal,
        runs,
        outcome: outcome(
            pass,
            format!(
                "jigsaw: S {s0:.4} (alpha 0) vs {s1:.4} (alpha 1); acc {:.2} vs {:.2} points, {elapsed:?}",
                100.0 * a0,
                100.0 * a1
            ),
        ),
    }
}

fn c9(runs: &SelfAsslRuns) -> Outcome {
    let data = generate_dataset(256, 9).unwrap();
    let cfg = TrainerConfig {
        epochs_proxy: 1,
        epochs_selfagg: 1,
        batch_size: 16,
        ..TrainerConfig::default()
    };
    let task = ProxyTaskSpec::new(TaskKind::Rotation);
    let reference = pretrain_proxy(&task, &data, &cfg.with_seed(5)).unwrap().frozen();
    let before = reference.param_hash();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let model = TrainedModel::init(&cfg)
        .unwrap()
        .with_head("rotation", Head::new(32, 4, &mut rng).unwrap())
        .unwrap();
    let idx = data.indices(Split::Pretrain)[..16].to_vec();
    let batch = proxy_batch(&data, &task, &idx, 0).unwrap();
    let ref_backbone = reference.backbone().unwrap();
    let mut g = build_step_graph(&model, &task, &batch, Some((ref_backbone, 2, -1.0))).unwrap();
    let own: HashSet<_> = g.backbone_vars.vars().iter().chain(g.head_vars.vars()).copied().collect();
    let trainable: HashSet<_> = g
        .tape
        .vars()
        .into_iter()
        .filter(|&v| g.tape.is_leaf(v).unwrap() && g.tape.requires_grad(v).unwrap())
        .collect();
    let ref_values: Vec<Vec<f64>> = ref_backbone.params().iter().map(|p| p.data().to_vec()).collect();
    let ref_on_tape = g
        .tape
        .vars()
        .into_iter()
        .any(|v| ref_values.contains(&g.tape.value(v).unwrap().data().to_vec()));
    let grads = g.tape.backward(g.total).unwrap();
    let isolated = trainable == own && grads.num_leaves() == own.len() && !ref_on_tape;
    let trained = train_self_aggregative(&task, &reference, &data, &cfg).is_ok();
    let intact = reference.param_hash() == before && reference.verify_intact().is_ok();
    let pass = isolated && trained && intact && runs.hashes_equal;
    outcome(
        pass,
        format!(
            "tape: {} trainable leaves, all owned by the new model: {isolated}; reference hash stable here: {intact}, across {} acceptance runs: {}",
            trainable.len(),
            runs.runs,
            runs.hashes_equal
        ),
    )
}

fn c10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let quick = "[dataset]\nn_images = 256\nseed = 1\n\n[trainer]\nepochs_proxy = 1\nepochs_finetune = 2\nepochs_selfagg = 1\nhead_warmup_epochs = 1\nbatch_size = 16\n";
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let configs = [
        ("baseline", "kind = \"baseline\"\ntasks = [\"rotation\", \"contrastive\"]".to_string()),
        ("pairwise", "kind = \"pairwise\"\ntasks = [\"rotation\", \"color\"]".to_string()),
        ("mt_assl", "kind = \"mt_assl\"\ntasks = [\"rotation\", \"color\", \"inpaint\"]".to_string()),
        ("self_assl", "kind = \"self_assl\"\ntasks = [\"jigsaw\"]".to_string()),
        ("label_sweep", "kind = \"label_sweep\"\ntasks = [\"color\"]\nlabel_fractions = [1.0]".to_string()),
        ("replay", format!("kind = \"replay\"\nfixture = {:?}", fixtures.join("stl10_trace.csv").display().to_string())),
    ];
    let mut mismatched = Vec::new();
    let mut files = 0;
    for (name, body) in &configs {
        let path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&path, format!("[experiment]\noutput_dir = \"{name}\"\n{body}\n{quick}")).unwrap();
        let a = run_experiment(&path, Some(&dir.path().join("a"))).unwrap();
        let b = run_experiment(&path, Some(&dir.path().join("b"))).unwrap();
        files += a.files.len();
        if a.files != b.files || a.metrics != b.metrics {
            mismatched.push(*name);
        }
    }
    outcome(mismatched.is_empty(), format!("{} kinds, {files} files hash-compared, mismatches: {mismatched:?}", configs.len()))
}

fn c11() -> Outcome {
    let data = generate_dataset(256, 11).unwrap();
    let cfg = TrainerConfig {
        epochs_proxy: 1,
        epochs_finetune: 2,
        head_warmup_epochs: 1,
        batch_size: 16,
        ..TrainerConfig::default()
    };
    let tasks: Vec<ProxyTaskSpec> = ProxyTaskSpec::all();
    let mut partition_ok = true;
    let mut records = 0;
    let out = run_mt_assl(&tasks, &data, &cfg, SimilaritySource::Pretrained, &mut |s| {
        partition_ok &= s.check_partition().is_ok() && s.trace.len() <= tasks.len();
        records += 1;
        Ok(())
    })
    .unwrap();
    let bounded = out.state.trace.len() <= tasks.len() && records == out.state.trace.len();

    let single = [ProxyTaskSpec::new(TaskKind::Color)];
    let one = run_mt_assl(&single, &data, &cfg, SimilaritySource::Pretrained, &mut |_| Ok(())).unwrap();
    let baseline = evaluate_acc(&finetune_target(&pretrain_proxy(&single[0], &data, &cfg).unwrap(), &data, &cfg).unwrap(), &data).unwrap();
    let degenerate = one.state.pool_a == ["color"] && one.state.trace.len() == 1 && one.state.best_acc == baseline;
    outcome(
        bounded && partition_ok && degenerate,
        format!(
            "{} iterations for {} tasks, partition held at every step: {partition_ok}; single task acc {} vs baseline {baseline}",
            out.state.trace.len(),
            tasks.len(),
            one.state.best_acc
        ),
    )
}

fn report(n: usize, title: &str, o: &Outcome) -> bool {
    println!("criterion {n:>2} [{}] {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let mut all = true;
    all &= report(1, "replay, STL10 trace", &c1());
    all &= report(2, "replay, brain CT trace", &c2());
    all &= report(3, "LCKA invariants", &c3());
    all &= report(4, "dual-form and centering equivalence", &c4());
    all &= report(5, "gradient correctness", &c5());
    all &= report(6, "fixed-value LCKA oracle", &c6());
    all &= report(7, "MT-ASSL beats best single task", &c7());
    let runs = c8();
    all &= report(8, "Self-ASSL complementarity", &runs.outcome);
    all &= report(9, "frozen reference", &c9(&runs));
    all &= report(10, "determinism", &c10());
    all &= report(11, "aggregation structure", &c11());
    if !all {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
