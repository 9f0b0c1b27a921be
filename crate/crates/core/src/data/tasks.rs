//! Proxy (pretext) tasks and the batches they produce.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{dominant_hue_bin, Image, Split, SyntheticDataset, NUM_CLASSES, NUM_COLORS};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const INPAINT_SIZE: usize = 8;
pub const CONTRASTIVE_PROJECTION: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Rotation,
    Jigsaw,
    Inpaint,
    Contrastive,
    /// Hue classification on pixel-shuffled images. Sees color only, never
    /// shape.
    Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Reconstruction,
    Contrastive,
}

/// A pretext task definition.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub loss_kind: LossKind,
    pub head_output_width: usize,
    pub pseudo_label_space: String,
    pub rng_stream_id: u64,
    pub temperature: f64,
}

impl ProxyTaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        let (id, loss_kind, width, space, stream) = match kind {
            TaskKind::Rotation => (
                "rotation",
                LossKind::Classification,
                4,
                "rotation index k, image turned by k·90° counterclockwise",
                1,
            ),
            TaskKind::Jigsaw => (
                "jigsaw",
                LossKind::Classification,
                24,
                "index of the 2×2 tile permutation in lexicographic order",
                2,
            ),
            TaskKind::Inpaint => (
                "inpaint",
                LossKind::Reconstruction,
                INPAINT_SIZE * INPAINT_SIZE * 3,
                "pixels of the masked central 8×8 region",
                3,
            ),
            TaskKind::Contrastive => (
                "contrastive",
                LossKind::Contrastive,
                CONTRASTIVE_PROJECTION,
                "positive-pair matching over two augmented views",
                4,
            ),
            TaskKind::Color => (
                "color",
                LossKind::Classification,
                NUM_COLORS,
                "dominant 90°-hue bin of a pixel-shuffled image (artifact extension)",
                5,
            ),
        };
        Self {
            task_id: id.to_string(),
            kind,
            loss_kind,
            head_output_width: width,
            pseudo_label_space: space.to_string(),
            rng_stream_id: stream,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn all() -> Vec<ProxyTaskSpec> {
        [
            TaskKind::Rotation,
            TaskKind::Jigsaw,
            TaskKind::Inpaint,
            TaskKind::Contrastive,
            TaskKind::Color,
        ]
        .into_iter()
        .map(Self::new)
        .collect()
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|t| t.task_id == name)
            .ok_or_else(|| Error::config("tasks", format!("unknown task `{name}`")))
    }

    /// Builds one pseudo-labelled batch from raw images.
    pub fn make_batch(&self, images: &[&Image], seed: u64) -> Result<Batch> {
        let mut batch = match self.kind {
            TaskKind::Rotation => rotation_batch(images, seed)?,
            TaskKind::Jigsaw => jigsaw_batch(images, seed)?,
            TaskKind::Inpaint => inpaint_batch(images, seed)?,
            TaskKind::Contrastive => contrastive_batch(images, seed)?,
            TaskKind::Color => color_batch(images, seed)?,
        };
        batch.task_id = self.task_id.clone();
        Ok(batch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PseudoLabels {
    Classes(Vec<usize>),
    Target(Tensor),
    /// `pairs[i]` is the index of the positive partner of view `i`.
    Pairs(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: PseudoLabels,
    pub task_id: String,
    /// Dataset indices the batch was drawn from, when known.
    pub sources: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks images into a `b × (H·W·C)` matrix.
pub fn flatten(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidImages("empty batch".into()))?;
    if images.iter().any(|i| !i.same_dims(first)) {
        return Err(Error::InvalidImages("images differ in size".into()));
    }
    let data: Vec<f64> = images.iter().flat_map(|i| i.pixels().iter().copied()).collect();
    Tensor::matrix(images.len(), first.pixels().len(), data)
}

fn flatten_owned(images: &[Image]) -> Result<Tensor> {
    flatten(&images.iter().collect::<Vec<_>>())
}

fn require_batch(images: &[&Image], min: usize) -> Result<()> {
    if images.len() < min {
        return Err(Error::InvalidImages(format!(
            "batch needs at least {min} images, got {}",
            images.len()
        )));
    }
    Ok(())
}

/// Rotates counterclockwise by `k`·90°.
pub fn rotate90(img: &Image, k: usize) -> Result<Image> {
    let n = img.height();
    if img.width() != n {
        return Err(Error::InvalidImages(format!(
            "rotation needs square images, got {}x{}",
            n,
            img.width()
        )));
    }
    let mut out = img.clone();
    for _ in 0..k % 4 {
        let src = out.clone();
        for y in 0..n {
            for x in 0..n {
                for c in 0..img.channels() {
                    out.set(y, x, c, src.get(x, n - 1 - y, c));
                }
            }
        }
    }
    Ok(out)
}

pub fn rotation_batch(images: &[&Image], seed: u64) -> Result<Batch> {
    require_batch(images, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rotated = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for img in images {
        let k = rng.gen_range(0..4);
        rotated.push(rotate90(img, k)?);
        labels.push(k);
    }
    Ok(Batch {
        inputs: flatten_owned(&rotated)?,
        labels: PseudoLabels::Classes(labels),
        task_id: "rotation".into(),
        sources: vec![],
    })
}

/// All 24 orderings of four tiles, lexicographic.
pub fn jigsaw_permutations() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(24);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    let p = [a, b, c, d];
                    let mut seen = [false; 4];
                    p.iter().for_each(|&i| seen[i] = true);
                    if seen.iter().all(|&s| s) {
                        out.push(p);
                    }
                }
            }
        }
    }
    out
}

pub fn inverse_permutation(p: &[usize; 4]) -> [usize; 4] {
    let mut inv = [0; 4];
    for (pos, &src) in p.iter().enumerate() {
        inv[src] = pos;
    }
    inv
}

/// Tiles are numbered top-left, top-right, bottom-left, bottom-right; output
/// tile `t` is a copy of source tile `perm[t]`.
pub fn apply_jigsaw(img: &Image, perm: &[usize; 4]) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidImages(format!(
            "jigsaw needs even dimensions, got {h}x{w}"
        )));
    }
    let (th, tw) = (h / 2, w / 2);
    let mut out = img.clone();
    for (t, &src) in perm.iter().enumerate() {
        let (ty, tx) = ((t / 2) * th, (t % 2) * tw);
        let (sy, sx) = ((src / 2) * th, (src % 2) * tw);
        for y in 0..th {
            for x in 0..tw {
                for c in 0..img.channels() {
                    out.set(ty + y, tx + x, c, img.get(sy + y, sx + x, c));
                }
            }
        }
    }
    Ok(out)
}

pub fn jigsaw_batch(images: &[&Image], seed: u64) -> Result<Batch> {
    require_batch(images, 2)?;
    let perms = jigsaw_permutations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for img in images {
        let k = rng.gen_range(0..perms.len());
        out.push(apply_jigsaw(img, &perms[k])?);
        labels.push(k);
    }
    Ok(Batch {
        inputs: flatten_owned(&out)?,
        labels: PseudoLabels::Classes(labels),
        task_id: "jigsaw".into(),
        sources: vec![],
    })
}

/// Top-left corner of the central inpainting square.
pub fn inpaint_origin(img: &Image) -> Result<(usize, usize)> {
    if img.height() < 16 || img.width() < 16 {
        return Err(Error::InvalidImages(format!(
            "inpainting needs at least 16x16, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(((img.height() - INPAINT_SIZE) / 2, (img.width() - INPAINT_SIZE) / 2))
}

/// Zeroes the central square; returns the masked image and the removed
/// pixels in (y, x, c) order.
pub fn mask_center(img: &Image) -> Result<(Image, Vec<f64>)> {
    let (y0, x0) = inpaint_origin(img)?;
    let mut masked = img.clone();
    let mut target = Vec::with_capacity(INPAINT_SIZE * INPAINT_SIZE * img.channels());
    for y in y0..y0 + INPAINT_SIZE {
        for x in x0..x0 + INPAINT_SIZE {
            for c in 0..img.channels() {
                target.push(img.get(y, x, c));
                masked.set(y, x, c, 0.0);
            }
        }
    }
    Ok((masked, target))
}

/// The mask is fixed, so `seed` is unused; it is kept for a uniform task
/// interface.
pub fn inpaint_batch(images: &[&Image], _seed: u64) -> Result<Batch> {
    require_batch(images, 2)?;
    let mut masked = Vec::with_capacity(images.len());
    let mut targets = Vec::new();
    for img in images {
        let (m, t) = mask_center(img)?;
        masked.push(m);
        targets.extend(t);
    }
    let width = targets.len() / images.len();
    Ok(Batch {
        inputs: flatten_owned(&masked)?,
        labels: PseudoLabels::Target(Tensor::matrix(images.len(), width, targets)?),
        task_id: "inpaint".into(),
        sources: vec![],
    })
}

/// Stochastic view parameters for the contrastive task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewAugment {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_sigma: f64,
}

impl Default for ViewAugment {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.8,
            scale_max: 1.2,
            noise_sigma: 0.05,
        }
    }
}

impl ViewAugment {
    /// No flip, unit scaling, no noise: both views equal the source.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn apply(&self, img: &Image, rng: &mut impl Rng) -> Image {
        let flip = rng.gen::<f64>() < self.flip_prob;
        let scales: Vec<f64> = (0..img.channels())
            .map(|_| {
                if self.scale_max > self.scale_min {
                    rng.gen_range(self.scale_min..self.scale_max)
                } else {
                    self.scale_min
                }
            })
            .collect();
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).unwrap());
        let mut out = img.clone();
        let w = img.width();
        for y in 0..img.height() {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                for (c, s) in scales.iter().enumerate() {
                    let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                    out.set(y, x, c, (img.get(y, sx, c) * s + n).clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

/// Two views per image: views `0..b` then `b..2b`, view `i` paired with
/// `(i + b) mod 2b`.
pub fn contrastive_batch_with(images: &[&Image], aug: &ViewAugment, seed: u64) -> Result<Batch> {
    if images.len() < 4 {
        return Err(Error::InvalidImages(format!(
            "contrastive batches need at least 4 images for negatives, got {}",
            images.len()
        )));
    }
    let b = images.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views: Vec<Image> = Vec::with_capacity(2 * b);
    let mut second = Vec::with_capacity(b);
    for img in images {
        views.push(aug.apply(img, &mut rng));
        second.push(aug.apply(img, &mut rng));
    }
    views.extend(second);
    let pairs = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    Ok(Batch {
        inputs: flatten_owned(&views)?,
        labels: PseudoLabels::Pairs(pairs),
        task_id: "contrastive".into(),
        sources: vec![],
    })
}

pub fn contrastive_batch(images: &[&Image], seed: u64) -> Result<Batch> {
    contrastive_batch_with(images, &ViewAugment::default(), seed)
}

/// Randomly permutes pixel positions (channels stay together), destroying
/// all spatial structure.
pub fn shuffle_pixels(img: &Image, rng: &mut impl Rng) -> Image {
    let mut order: Vec<usize> = (0..img.height() * img.width()).collect();
    order.shuffle(rng);
    let mut out = img.clone();
    let c = img.channels();
    for (dst, &src) in order.iter().enumerate() {
        out.pixels_mut()[dst * c..(dst + 1) * c].copy_from_slice(&img.pixels()[src * c..(src + 1) * c]);
    }
    out
}

pub fn color_batch(images: &[&Image], seed: u64) -> Result<Batch> {
    require_batch(images, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(images.len());
    let mut labels = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let label = dominant_hue_bin(img)
            .ok_or_else(|| Error::InvalidImages(format!("image {i} has no saturated pixels")))?;
        out.push(shuffle_pixels(img, &mut rng));
        labels.push(label);
    }
    Ok(Batch {
        inputs: flatten_owned(&out)?,
        labels: PseudoLabels::Classes(labels),
        task_id: "color".into(),
        sources: vec![],
    })
}

/// NT-Xent over cosine similarities: every view is an anchor, its partner the
/// positive, all other views negatives, self-similarity excluded.
pub fn ntxent_loss(tape: &mut Tape, features: Var, pairs: &[usize], temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let n = tape.value(features)?.rows();
    let matching = pairs.len() == n
        && pairs
            .iter()
            .enumerate()
            .all(|(i, &p)| p < n && p != i && pairs[p] == i);
    if !matching {
        return Err(Error::InvalidTensor("pairing is not a perfect matching".into()));
    }
    let z = tape.l2_normalize_rows(features)?;
    let zt = tape.transpose(z)?;
    let sim = tape.matmul(z, zt)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    tape.masked_self_cross_entropy(logits, pairs)
}

/// Labelled batches for the target task over explicit dataset indices, in an
/// order shuffled by `seed`. Every index appears in exactly one batch.
pub fn labeled_batches(
    dataset: &SyntheticDataset,
    indices: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    for &i in indices {
        let split = dataset.split_of(i);
        if !split.is_labeled() {
            return Err(Error::WrongSplit(split.name().into()));
        }
    }
    let mut order = indices.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| dataset.image(i)).collect();
            Ok(Batch {
                inputs: flatten(&imgs)?,
                labels: PseudoLabels::Classes(chunk.iter().map(|&i| dataset.target_label(i)).collect()),
                task_id: "target".into(),
                sources: chunk.to_vec(),
            })
        })
        .collect()
}

/// The whole labelled split as one batch, shuffled by `seed`.
pub fn target_batch(dataset: &SyntheticDataset, split: Split, seed: u64) -> Result<Batch> {
    if !split.is_labeled() {
        return Err(Error::WrongSplit(split.name().into()));
    }
    let idx = dataset.indices(split);
    let n = idx.len().max(1);
    labeled_batches(dataset, &idx, n, seed)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::WrongSplit(format!("{} is empty", split.name())))
}

pub const TARGET_CLASSES: usize = NUM_CLASSES;
