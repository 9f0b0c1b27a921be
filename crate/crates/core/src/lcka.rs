//! Linear centered kernel alignment (linear CKA).
//!
//! For representations `X` (n×d₁) and `Y` (n×d₂) of the same `n` probe
//! samples, with sample Grams `K = XXᵀ`, `L = YYᵀ` and `H = I − 11ᵀ/n`:
//!
//! ```text
//! S(X, Y) = ⟨HKH, HLH⟩_F / sqrt(⟨HKH, HKH⟩_F · ⟨HLH, HLH⟩_F)
//! ```
//!
//! The same quantity has a feature-space form for column-centered `X`, `Y`:
//! `‖YᵀX‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F)`. [`lcka`] evaluates the Gram form and
//! [`lcka_feature_form`] the feature form; they are kept as independent
//! routes so each can check the other.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tape, Tensor, Var};

/// Smallest probe set accepted by the similarity routines.
pub const MIN_PROBE_SIZE: usize = 8;

/// Below this norm a centered representation counts as constant.
pub const EPS_DEN: f64 = 1e-12;

/// Activations of `n` probe samples at one layer of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    values: Vec<f64>,
    source_tag: String,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, values: Vec<f64>, source_tag: impl Into<String>) -> Result<Self> {
        let source_tag = source_tag.into();
        if n < 2 || d < 1 {
            return Err(Error::InvalidTensor(format!(
                "feature matrix {source_tag} needs n >= 2 and d >= 1, got {n}x{d}"
            )));
        }
        if values.len() != n * d {
            return Err(Error::InvalidTensor(format!(
                "feature matrix {source_tag}: {n}x{d} needs {} values, got {}",
                n * d,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "feature".into(),
                location: format!("{source_tag} row {} col {}", i / d, i % d),
            });
        }
        Ok(Self {
            n,
            d,
            values,
            source_tag,
        })
    }

    pub fn from_tensor(t: &Tensor, source_tag: impl Into<String>) -> Result<Self> {
        let (n, d) = t.require_matrix("feature matrix")?;
        Self::new(n, d, t.data().to_vec(), source_tag)
    }

    pub fn from_rows(rows: &[Vec<f64>], source_tag: impl Into<String>) -> Result<Self> {
        Self::from_tensor(&Tensor::from_rows(rows)?, source_tag)
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn d_features(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.n, self.d, self.values.clone()).expect("validated dims")
    }

    /// Writes the dump format: a `n d source_tag` header then one row per
    /// line with 17 significant digits.
    pub fn write_dump(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{} {} {}", self.n, self.d, self.source_tag)?;
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_dump(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_dump(r: impl BufRead, origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty feature dump".into()))?
            .map_err(|e| Error::io(origin, e))?;
        let mut parts = header.splitn(3, ' ');
        let mut dim = |name: &str| -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("header missing {name}")))
        };
        let n = dim("n")?;
        let d = dim("d")?;
        let tag = parts.next().unwrap_or("").to_string();
        let mut values = Vec::with_capacity(n * d);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let row = row.map_err(|e| bad(format!("row {i}: {e}")))?;
            if row.len() != d {
                return Err(bad(format!("row {i} has {} values, expected {d}", row.len())));
            }
            values.extend(row);
        }
        if values.len() != n * d {
            return Err(bad(format!("expected {n} rows, got {}", values.len() / d.max(1))));
        }
        Self::new(n, d, values, tag)
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_dump(BufReader::new(f), path)
    }
}

/// Sample-space Gram matrix `K = XXᵀ` (n×n, row-major).
pub fn gram(x: &FeatureMatrix) -> Vec<f64> {
    kernels::matmul_a_bt(&x.values, &x.values, x.n, x.d, x.n)
}

/// Double centering `HKH` of a square matrix.
pub fn center_gram(k: &[f64], n: usize) -> Result<Vec<f64>> {
    if k.len() != n * n {
        return Err(Error::ShapeMismatch {
            op: "center_gram",
            left: vec![k.len()],
            right: vec![n, n],
        });
    }
    let nf = n as f64;
    let row_means: Vec<f64> = (0..n).map(|i| kernels::sum(&k[i * n..(i + 1) * n]) / nf).collect();
    let mut col_means = vec![0.0; n];
    for i in 0..n {
        for (m, v) in col_means.iter_mut().zip(&k[i * n..(i + 1) * n]) {
            *m += v;
        }
    }
    col_means.iter_mut().for_each(|m| *m /= nf);
    let grand = kernels::sum(&row_means) / nf;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_means[i] - col_means[j] + grand;
        }
    }
    Ok(out)
}

fn check_pair(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.n != b.n {
        return Err(Error::SampleCountMismatch {
            left: a.n,
            right: b.n,
        });
    }
    if a.n < MIN_PROBE_SIZE {
        return Err(Error::ProbeTooSmall {
            n: a.n,
            min: MIN_PROBE_SIZE,
        });
    }
    Ok(())
}

/// Alignment of two raw n×n Gram matrices: both are double-centered, then
/// compared by normalized Frobenius inner product. No probe-size floor and no
/// clamping; `tags` name the inputs in degenerate-representation errors.
pub fn gram_alignment(k: &[f64], l: &[f64], n: usize, tags: [&str; 2]) -> Result<f64> {
    let kc = center_gram(k, n)?;
    let lc = center_gram(l, n)?;
    let kk = kernels::dot(&kc, &kc).sqrt();
    let ll = kernels::dot(&lc, &lc).sqrt();
    for (norm, tag) in [(kk, tags[0]), (ll, tags[1])] {
        if !(norm >= EPS_DEN) {
            return Err(Error::DegenerateRepresentation { tag: tag.to_string() });
        }
    }
    Ok(kernels::dot(&kc, &lc) / (kk * ll))
}

/// Gram-form similarity before clamping to `[0, 1]`.
pub fn lcka_unclamped(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    check_pair(a, b)?;
    gram_alignment(&gram(a), &gram(b), a.n, [&a.source_tag, &b.source_tag])
}

/// Linear CKA between two representations of the same probe samples.
pub fn lcka(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    Ok(lcka_unclamped(a, b)?.clamp(0.0, 1.0))
}

/// Feature-space route: `‖BᵀA‖²_F / (‖AᵀA‖_F · ‖BᵀB‖_F)` on column-centered
/// inputs.
pub fn lcka_feature_form(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.n;
    let ac = kernels::center_columns(&a.values, n, a.d);
    let bc = kernels::center_columns(&b.values, n, b.d);
    let cross = kernels::matmul_at_b(&bc, &ac, n, b.d, a.d);
    let aa = kernels::matmul_at_b(&ac, &ac, n, a.d, a.d);
    let bb = kernels::matmul_at_b(&bc, &bc, n, b.d, b.d);
    let na = kernels::dot(&aa, &aa).sqrt();
    let nb = kernels::dot(&bb, &bb).sqrt();
    for (norm, m) in [(na, a), (nb, b)] {
        if !(norm >= EPS_DEN) {
            return Err(Error::DegenerateRepresentation {
                tag: m.source_tag.clone(),
            });
        }
    }
    Ok((kernels::dot(&cross, &cross) / (na * nb)).clamp(0.0, 1.0))
}

/// Negative similarity between taped features and a frozen reference, as a
/// differentiable scalar. Gradients flow only into `new_features`.
///
/// A collapsed `new_features` batch yields a constant zero loss and a warning
/// instead of an error.
pub fn lcka_loss(tape: &mut Tape, new_features: Var, reference: &FeatureMatrix) -> Result<Var> {
    let (n, d_new) = tape.value(new_features)?.require_matrix("lcka_loss")?;
    if n != reference.n {
        return Err(Error::SampleCountMismatch {
            left: n,
            right: reference.n,
        });
    }
    if n < MIN_PROBE_SIZE {
        return Err(Error::ProbeTooSmall {
            n,
            min: MIN_PROBE_SIZE,
        });
    }
    let dr = reference.d;
    let rc = kernels::center_columns(&reference.values, n, dr);
    let rr = kernels::matmul_at_b(&rc, &rc, n, dr, dr);
    let ref_norm = kernels::dot(&rr, &rr).sqrt();
    if !(ref_norm >= EPS_DEN) {
        return Err(Error::DegenerateRepresentation {
            tag: reference.source_tag.clone(),
        });
    }

    let xc = tape.center_columns(new_features)?;
    let xt = tape.transpose(xc)?;
    let self_cov = tape.matmul(xt, xc)?;
    let sq = tape.mul(self_cov, self_cov)?;
    let sq_sum = tape.sum(sq)?;
    if !(tape.value(sq_sum)?.item().sqrt() >= EPS_DEN) {
        log::warn!("lcka_loss: degenerate feature batch, complement term set to 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let self_norm = tape.sqrt(sq_sum)?;

    let rct = tape.constant(Tensor::matrix(dr, n, kernels::transpose(&rc, n, dr))?);
    let cross = tape.matmul(rct, xc)?;
    let cross_sq = tape.mul(cross, cross)?;
    let numer = tape.sum(cross_sq)?;
    let denom = tape.scale(self_norm, ref_norm)?;
    let s = tape.div(numer, denom)?;
    debug_assert_eq!(tape.value(cross)?.shape(), &[dr, d_new]);
    tape.scale(s, -1.0)
}

/// Pairwise similarities of representations on one probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    task_ids: Vec<String>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.task_ids.len() + j]
    }

    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }

    /// CSV with task ids as header row and first column.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend(self.task_ids.iter().cloned());
        csv.write_record(&header)?;
        for (i, id) in self.task_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend((0..self.len()).map(|j| format!("{:.17e}", self.get(i, j))));
            csv.write_record(&row)?;
        }
        csv.flush().map_err(|e| Error::io("<similarity csv>", e))?;
        Ok(())
    }
}

/// Entry `(i, j)` is `lcka(reps[i], reps[j])`; the diagonal is computed too,
/// not assumed.
pub fn similarity_matrix(reps: &[FeatureMatrix]) -> Result<SimilarityMatrix> {
    if reps.len() < 2 {
        return Err(Error::InvalidTensor(
            "similarity matrix needs at least two representations".into(),
        ));
    }
    let k = reps.len();
    let mut values = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let s = lcka(&reps[i], &reps[j])?;
            values[i * k + j] = s;
            values[j * k + i] = s;
        }
    }
    Ok(SimilarityMatrix {
        task_ids: reps.iter().map(|r| r.source_tag.clone()).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, rng: &mut impl Rng, tag: &str) -> FeatureMatrix {
        let v = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new(n, d, v, tag).unwrap()
    }

    #[test]
    fn gram_small_cases() {
        let id = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], "id").unwrap();
        assert_eq!(gram(&id), vec![1.0, 0.0, 0.0, 1.0]);
        let rep = FeatureMatrix::from_rows(&vec![vec![1.0, 2.0]; 3], "rep").unwrap();
        assert!(gram(&rep).iter().all(|&v| v == 5.0));
    }

    #[test]
    fn gram_matches_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(5, 3, &mut rng, "x");
        let k = gram(&x);
        for i in 0..5 {
            for j in 0..5 {
                let mut dot = 0.0;
                for c in 0..3 {
                    dot += x.row(i)[c] * x.row(j)[c];
                }
                assert!((k[i * 5 + j] - dot).abs() < 1e-12);
                assert!((k[i * 5 + j] - k[j * 5 + i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn centering_constant_and_idempotent() {
        let ones = vec![1.0; 16];
        assert!(center_gram(&ones, 4).unwrap().iter().all(|v| v.abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k: Vec<f64> = (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let once = center_gram(&k, 5).unwrap();
        let twice = center_gram(&once, 5).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..5 {
            let row: f64 = once[i * 5..(i + 1) * 5].iter().sum();
            let col: f64 = (0..5).map(|r| once[r * 5 + i]).sum();
            assert!(row.abs() < 1e-10 && col.abs() < 1e-10);
        }
        assert!(center_gram(&k, 4).is_err());
    }

    #[test]
    fn precondition_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(8, 3, &mut rng, "a");
        let b = random(9, 3, &mut rng, "b");
        assert!(matches!(lcka(&a, &b), Err(Error::SampleCountMismatch { .. })));
        let small = random(4, 3, &mut rng, "small");
        assert!(matches!(lcka(&small, &small), Err(Error::ProbeTooSmall { .. })));
        let flat = FeatureMatrix::new(8, 2, vec![3.0; 16], "flat").unwrap();
        match lcka(&a, &flat) {
            Err(Error::DegenerateRepresentation { tag }) => assert_eq!(tag, "flat"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(lcka_feature_form(&flat, &a).is_err());
        assert!(FeatureMatrix::new(2, 1, vec![1.0, f64::NAN], "nan").is_err());
    }

    #[test]
    fn single_column_is_squared_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(20, 1, &mut rng, "a");
        let b = random(20, 1, &mut rng, "b");
        let (x, y) = (a.values(), b.values());
        let mx = x.iter().sum::<f64>() / 20.0;
        let my = y.iter().sum::<f64>() / 20.0;
        let sxy: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let sxx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!((lcka_feature_form(&a, &b).unwrap() - r2).abs() < 1e-12);
        assert!((lcka(&a, &b).unwrap() - r2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_negative_similarity_and_identity_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(12, 4, &mut rng, "a");
        let r = random(12, 3, &mut rng, "r");
        let mut tape = Tape::new();
        let x = tape.leaf(&a.to_tensor().with_requires_grad(true));
        let loss = lcka_loss(&mut tape, x, &r).unwrap();
        let v = tape.value(loss).unwrap().item();
        assert!((v + lcka(&a, &r).unwrap()).abs() < 1e-10);

        let same = lcka_loss(&mut tape, x, &a).unwrap();
        assert!((tape.value(same).unwrap().item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_batch_gives_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random(8, 3, &mut rng, "r");
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::matrix(8, 2, vec![0.5; 16]).unwrap().with_requires_grad(true));
        let loss = lcka_loss(&mut tape, x, &r).unwrap();
        assert_eq!(tape.value(loss).unwrap().item(), 0.0);
        assert!(!tape.requires_grad(loss).unwrap());
    }

    #[test]
    fn similarity_matrix_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random(10, 3, &mut rng, "a");
        let m = similarity_matrix(&[a.clone(), a.clone()]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((m.get(i, j) - 1.0).abs() < 1e-10);
            }
        }
        let reps = vec![a, random(10, 2, &mut rng, "b"), random(10, 5, &mut rng, "c")];
        let m = similarity_matrix(&reps).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-10);
                assert_eq!(m.get(i, j), lcka(&reps[i], &reps[j]).unwrap());
            }
        }
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(",a,b,c\n"));
        assert!(similarity_matrix(&reps[..1]).is_err());
    }

    #[test]
    fn dump_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(9, 4, &mut rng, "rotation layer 2");
        let mut buf = Vec::new();
        a.write_dump(&mut buf).unwrap();
        let back = FeatureMatrix::read_dump(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, a);
    }
}
