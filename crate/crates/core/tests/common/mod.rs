//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use aggssl::lcka::FeatureMatrix;
use aggssl::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// Value of the 4×2 fixed example, computed once with the direct formula
/// below and frozen: 13·√1538 / 769.
pub const FIXED_EXAMPLE_LCKA: f64 = 0.662_971_990_025_119_7;

pub fn fixed_example() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]];
    let y = vec![vec![2.0, 1.0], vec![0.0, 3.0], vec![1.0, 1.0], vec![-1.0, 0.0]];
    (x, y)
}

pub type Mat = Vec<Vec<f64>>;

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `I − 11ᵀ/n`, built explicitly.
pub fn centering(n: usize) -> Mat {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j)) - 1.0 / n as f64).collect())
        .collect()
}

pub fn frob(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x * y).sum::<f64>()).sum()
}

pub fn trace(a: &Mat) -> f64 {
    (0..a.len()).map(|i| a[i][i]).sum()
}

/// Linear CKA straight from the definition: explicit `H`, dense products,
/// no shortcuts shared with the library.
pub fn oracle_lcka(x: &Mat, y: &Mat) -> f64 {
    let h = centering(x.len());
    let k = mat_mul(&mat_mul(&h, &mat_mul(x, &transpose(x))), &h);
    let l = mat_mul(&mat_mul(&h, &mat_mul(y, &transpose(y))), &h);
    frob(&k, &l) / (frob(&k, &k).sqrt() * frob(&l, &l).sqrt())
}

pub fn random_mat(rng: &mut impl Rng, n: usize, d: usize) -> Mat {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn features(m: &Mat, tag: &str) -> FeatureMatrix {
    FeatureMatrix::from_rows(m, tag).unwrap()
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(rng: &mut impl Rng, d: usize) -> Mat {
    let mut q: Mat = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    q
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;
pub const GRAD_CONFIGS: u64 = 20;

use aggssl::data::tasks::ntxent_loss;
use aggssl::lcka::lcka_loss;
use aggssl::tensor::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Analytic gradient of `build` with respect to its input, next to the
/// central-difference estimate; returns their relative error.
pub fn grad_error(x: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_requires_grad(true));
    let loss = build(&mut tape, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(v).unwrap().to_vec();
    let numeric = numeric_grad(x, FD_STEP, |p| {
        let mut t = Tape::new();
        let v = t.leaf(p);
        let l = build(&mut t, v);
        t.value(l).unwrap().item()
    });
    relative_error(&analytic, &numeric)
}

fn rng_for(kind: u64, config: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(kind * 1000 + config)
}

pub fn ce_case(config: u64) -> f64 {
    let mut rng = rng_for(1, config);
    let (n, c) = (rng.gen_range(1..12), rng.gen_range(2..10));
    let logits = to_tensor(&random_mat(&mut rng, n, c));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    grad_error(&logits, |t, v| t.softmax_cross_entropy(v, &labels).unwrap())
}

pub fn mse_case(config: u64) -> f64 {
    let mut rng = rng_for(2, config);
    let (n, d) = (rng.gen_range(1..10), rng.gen_range(1..20));
    let pred = to_tensor(&random_mat(&mut rng, n, d));
    let target = to_tensor(&random_mat(&mut rng, n, d));
    grad_error(&pred, |t, v| t.mse_loss(v, &target).unwrap())
}

pub fn ntxent_case(config: u64) -> f64 {
    let mut rng = rng_for(3, config);
    let (b, d) = (rng.gen_range(2..7), rng.gen_range(2..12));
    let feats = to_tensor(&random_mat(&mut rng, 2 * b, d));
    let pairs: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    let temp = rng.gen_range(0.2..1.0);
    grad_error(&feats, |t, v| ntxent_loss(t, v, &pairs, temp).unwrap())
}

pub fn lcka_loss_case(config: u64) -> f64 {
    let mut rng = rng_for(4, config);
    let (n, d, dr) = (rng.gen_range(8..20), rng.gen_range(1..8), rng.gen_range(1..8));
    let x = to_tensor(&random_mat(&mut rng, n, d));
    let reference = features(&random_mat(&mut rng, n, dr), "reference");
    grad_error(&x, |t, v| lcka_loss(t, v, &reference).unwrap())
}

/// Largest relative error over every configuration of one loss.
pub fn worst_case(case: fn(u64) -> f64) -> f64 {
    (0..GRAD_CONFIGS).map(case).fold(0.0, f64::max)
}

use aggssl::lcka::{lcka, lcka_feature_form, lcka_unclamped};

/// Worst-case deviations over a batch of random feature pairs.
#[derive(Debug, Default)]
pub struct InvariantErrors {
    pub below_zero: f64,
    pub above_one: f64,
    pub out_of_range: usize,
    pub symmetry: f64,
    pub self_similarity: f64,
    pub orthogonal: f64,
    pub scaling: f64,
    pub mean_shift: f64,
}

pub fn lcka_invariants(count: u64, seed: u64) -> InvariantErrors {
    let mut e = InvariantErrors::default();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 100_000 + i);
        let n = rng.gen_range(8..=64);
        let (da, db) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let xa = random_mat(&mut rng, n, da);
        let xb = random_mat(&mut rng, n, db);
        let (a, b) = (features(&xa, "a"), features(&xb, "b"));
        let raw = lcka_unclamped(&a, &b).unwrap();
        e.below_zero = e.below_zero.max(-raw);
        e.above_one = e.above_one.max(raw - 1.0);
        let s = lcka(&a, &b).unwrap();
        e.out_of_range += usize::from(!(0.0..=1.0).contains(&s));
        e.symmetry = e.symmetry.max((s - lcka(&b, &a).unwrap()).abs());
        e.self_similarity = e.self_similarity.max((lcka(&a, &a).unwrap() - 1.0).abs());

        let rotated = features(&mat_mul(&xa, &random_orthogonal(&mut rng, da)), "rotated");
        e.orthogonal = e.orthogonal.max((lcka(&rotated, &b).unwrap() - s).abs());
        let c: f64 = rng.gen_range(0.01..100.0);
        let scaled: Mat = xa.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        e.scaling = e.scaling.max((lcka(&features(&scaled, "scaled"), &b).unwrap() - s).abs());
        let shift: Vec<f64> = (0..da).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let shifted: Mat = xa.iter().map(|r| r.iter().zip(&shift).map(|(v, m)| v + m).collect()).collect();
        e.mean_shift = e.mean_shift.max((lcka(&features(&shifted, "shifted"), &b).unwrap() - s).abs());
    }
    e
}

/// Largest gap between the Gram and feature forms over random pairs.
pub fn dual_form_gap(count: u64) -> f64 {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(7_000 + i);
            let (n, da, db) = (rng.gen_range(8..=64), rng.gen_range(1..=32), rng.gen_range(1..=32));
            let a = features(&random_mat(&mut rng, n, da), "a");
            let b = features(&random_mat(&mut rng, n, db), "b");
            (lcka(&a, &b).unwrap() - lcka_feature_form(&a, &b).unwrap()).abs()
        })
        .fold(0.0, f64::max)
}

fn random_symmetric(rng: &mut impl Rng, n: usize) -> Mat {
    let m = random_mat(rng, n, n);
    (0..n).map(|i| (0..n).map(|j| m[i][j] + m[j][i]).collect()).collect()
}

/// One-sided centering `tr(KH·LH)` against double centering
/// `⟨HKH, HLH⟩_F`, worst relative gap over random symmetric pairs.
pub fn centering_gap(count: u64) -> f64 {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(9_000 + i);
            let n = rng.gen_range(2..=40);
            let (k, l) = (random_symmetric(&mut rng, n), random_symmetric(&mut rng, n));
            let h = centering(n);
            let one_sided = trace(&mat_mul(&mat_mul(&k, &h), &mat_mul(&l, &h)));
            let double = frob(&mat_mul(&mat_mul(&h, &k), &h), &mat_mul(&mat_mul(&h, &l), &h));
            (one_sided - double).abs() / double.abs().max(1.0)
        })
        .fold(0.0, f64::max)
}
