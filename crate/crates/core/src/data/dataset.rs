use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 16;
pub const CHANNELS: usize = 3;
pub const INPUT_DIM: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;
pub const NUM_SHAPES: usize = 4;
pub const NUM_COLORS: usize = 4;
pub const NUM_CLASSES: usize = NUM_SHAPES * NUM_COLORS;

pub const SHAPE_NAMES: [&str; NUM_SHAPES] = ["bar", "cross", "disc", "frame"];

/// Base hue of each color class, in degrees.
pub const HUES: [f64; NUM_COLORS] = [0.0, 90.0, 180.0, 270.0];

/// Largest per-image deviation from the class hue, in degrees.
pub const HUE_JITTER: f64 = 30.0;

/// Largest shape displacement from its canonical position, in pixels.
pub const MAX_OFFSET: i64 = 2;

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Height × width × channel image, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || pixels.len() != height * width * channels {
            return Err(Error::InvalidImages(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self::new(height, width, channels, vec![0.0; height * width * channels]).expect("positive dims")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[self.index(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = self.index(y, x, 0);
        &self.pixels[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.height, self.width, self.channels) == (other.height, other.width, other.channels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Test,
    Probe,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Test, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "unlabeled-pretrain",
            Split::Train => "labeled-train",
            Split::Test => "labeled-test",
            Split::Probe => "probe",
        }
    }

    pub fn is_labeled(self) -> bool {
        matches!(self, Split::Train | Split::Test)
    }

    fn code(self) -> u32 {
        self as u32
    }

    fn from_code(c: u32) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

/// Number of images per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub train: usize,
    pub test: usize,
    pub probe: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            train: 320,
            test: 320,
            probe: 256,
        }
    }
}

impl SplitSizes {
    /// Scales the default 2000/320/320/256 profile to `n` images in total.
    /// Held-out splits are rounded down to whole class cycles, at least one.
    pub fn proportional(n: usize) -> Self {
        let d = Self::default();
        let total = d.total();
        let cycle = |x: usize| ((n * x / total) / NUM_CLASSES).max(1) * NUM_CLASSES;
        let (train, test, probe) = (cycle(d.train), cycle(d.test), cycle(d.probe));
        Self {
            pretrain: n - train - test - probe,
            train,
            test,
            probe,
        }
    }

    pub fn total(&self) -> usize {
        self.pretrain + self.train + self.test + self.probe
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Pretrain => self.pretrain,
            Split::Train => self.train,
            Split::Test => self.test,
            Split::Probe => self.probe,
        }
    }
}

/// Procedural images whose class factorizes into a shape and a color.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    seed: u64,
    images: Vec<Image>,
    shape_ids: Vec<usize>,
    color_ids: Vec<usize>,
    splits: Vec<Split>,
}

/// SplitMix64 finalizer; combines a seed with stream identifiers.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Shape masks. Each shape leans towards a different side of the canvas
/// (bar top, cross bottom, disc left, frame right), so telling an image's
/// orientation apart requires recognising the shape.
fn in_shape(shape: usize, y: i64, x: i64) -> bool {
    let within = |y0, y1, x0, x1| y >= y0 && y < y1 && x >= x0 && x < x1;
    match shape {
        0 => within(2, 6, 2, 14),
        1 => within(3, 14, 7, 9) || within(10, 13, 3, 13),
        2 => {
            let (dy, dx) = (y as f64 - 7.5, x as f64 - 4.5);
            dy * dy + dx * dx <= 3.3 * 3.3
        }
        3 => within(3, 13, 8, 15) && !within(5, 11, 10, 13),
        _ => false,
    }
}

fn render(shape: usize, color: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::blank(IMAGE_SIZE, IMAGE_SIZE, CHANNELS);
    let base = rng.gen_range(0.1..0.35);
    let oy: i64 = rng.gen_range(-MAX_OFFSET..=MAX_OFFSET);
    let ox: i64 = rng.gen_range(-MAX_OFFSET..=MAX_OFFSET);
    let hue = HUES[color] + rng.gen_range(-HUE_JITTER..HUE_JITTER);
    let rgb = hsv_to_rgb(hue, rng.gen_range(0.65..0.95), rng.gen_range(0.6..1.0));
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let noise = rng.gen_range(-0.12..0.12);
            if in_shape(shape, y as i64 - oy, x as i64 - ox) {
                let jitter = rng.gen_range(0.9..1.0);
                for c in 0..CHANNELS {
                    img.set(y, x, c, (rgb[c] * jitter).clamp(0.0, 1.0));
                }
            } else {
                let g: f64 = base + noise;
                for c in 0..CHANNELS {
                    img.set(y, x, c, g.clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

pub fn generate_dataset(n_images: usize, seed: u64) -> Result<SyntheticDataset> {
    if n_images < 64 {
        return Err(Error::config("n_images", format!("need at least 64 images, got {n_images}")));
    }
    SyntheticDataset::generate(SplitSizes::proportional(n_images), seed)
}

impl SyntheticDataset {
    /// Classes cycle through all 16 shape/color combinations inside each
    /// split, so every split is balanced within one image per class.
    pub fn generate(sizes: SplitSizes, seed: u64) -> Result<Self> {
        if sizes.total() == 0 {
            return Err(Error::config("n_images", "dataset must not be empty"));
        }
        let n = sizes.total();
        let mut images = Vec::with_capacity(n);
        let mut shape_ids = Vec::with_capacity(n);
        let mut color_ids = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        for split in Split::ALL {
            for j in 0..sizes.get(split) {
                let label = j % NUM_CLASSES;
                let (shape, color) = (label / NUM_COLORS, label % NUM_COLORS);
                let idx = images.len() as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xDA7A, idx]));
                images.push(render(shape, color, &mut rng));
                shape_ids.push(shape);
                color_ids.push(color);
                splits.push(split);
            }
        }
        Ok(Self {
            seed,
            images,
            shape_ids,
            color_ids,
            splits,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.images[i]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn shape_id(&self, i: usize) -> usize {
        self.shape_ids[i]
    }

    pub fn color_id(&self, i: usize) -> usize {
        self.color_ids[i]
    }

    pub fn target_label(&self, i: usize) -> usize {
        self.shape_ids[i] * NUM_COLORS + self.color_ids[i]
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn sizes(&self) -> SplitSizes {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        SplitSizes {
            pretrain: count(Split::Pretrain),
            train: count(Split::Train),
            test: count(Split::Test),
            probe: count(Split::Probe),
        }
    }

    /// Dataset indices belonging to `split`, ascending.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Cache layout, little-endian: `N, H, W, C, seed` as u64, the pixels as
    /// f64, then shape, color and split tables as u32.
    pub fn encode_cache(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [self.len(), IMAGE_SIZE, IMAGE_SIZE, CHANNELS] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        for img in &self.images {
            for p in img.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        for table in [&self.shape_ids, &self.color_ids] {
            for &v in table.iter() {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for s in &self.splits {
            out.extend_from_slice(&s.code().to_le_bytes());
        }
        out
    }

    pub fn decode_cache(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        let u64_at = |i: usize| -> Result<u64> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| bad("truncated header"))
        };
        let n = u64_at(0)? as usize;
        let (h, w, c) = (u64_at(1)? as usize, u64_at(2)? as usize, u64_at(3)? as usize);
        let seed = u64_at(4)?;
        let px = h * w * c;
        let expected = 40 + n * px * 8 + n * 12;
        if bytes.len() != expected {
            return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut pos = 40;
        let mut images = Vec::with_capacity(n);
        for _ in 0..n {
            let pixels = bytes[pos..pos + px * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            images.push(Image::new(h, w, c, pixels)?);
            pos += px * 8;
        }
        let table = |pos: &mut usize| -> Vec<u32> {
            let t = bytes[*pos..*pos + n * 4]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            *pos += n * 4;
            t
        };
        let shape_ids = table(&mut pos).into_iter().map(|v| v as usize).collect();
        let color_ids = table(&mut pos).into_iter().map(|v| v as usize).collect();
        let splits = table(&mut pos)
            .into_iter()
            .map(|v| Split::from_code(v).ok_or_else(|| bad("unknown split code")))
            .collect::<Result<_>>()?;
        Ok(Self {
            seed,
            images,
            shape_ids,
            color_ids,
            splits,
        })
    }

    pub fn save_cache(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode_cache()).map_err(|e| Error::io(path, e))
    }

    pub fn load_cache(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_cache(&bytes, path)
    }
}

/// Hue bin (0..4, 90° each, centred on the palette hues) of the most common
/// saturated color in the image; `None` when no pixel is saturated.
pub fn dominant_hue_bin(img: &Image) -> Option<usize> {
    let mut counts = [0usize; NUM_COLORS];
    for y in 0..img.height() {
        for x in 0..img.width() {
            let p = img.pixel(y, x);
            if p.len() < 3 {
                return None;
            }
            let (r, g, b) = (p[0], p[1], p[2]);
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            if max < 0.2 || delta / max < 0.5 {
                continue;
            }
            let hue = if max == r {
                60.0 * ((g - b) / delta).rem_euclid(6.0)
            } else if max == g {
                60.0 * ((b - r) / delta + 2.0)
            } else {
                60.0 * ((r - g) / delta + 4.0)
            };
            let bin = ((hue / 90.0).round() as usize) % NUM_COLORS;
            counts[bin] += 1;
        }
    }
    let best = *counts.iter().max().unwrap();
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(160, 0).unwrap();
        let b = generate_dataset(160, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(160, 1).unwrap());
    }

    #[test]
    fn classes_balanced_overall_and_per_split() {
        let d = SyntheticDataset::generate(
            SplitSizes {
                pretrain: 160,
                train: 37,
                test: 16,
                probe: 21,
            },
            3,
        )
        .unwrap();
        for split in Split::ALL {
            let mut counts = [0usize; NUM_CLASSES];
            for i in d.indices(split) {
                counts[d.target_label(i)] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{split:?}: {counts:?}");
        }
        let d = generate_dataset(160, 0).unwrap();
        let mut counts = [0usize; NUM_CLASSES];
        for i in 0..d.len() {
            counts[d.target_label(i)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10), "{counts:?}");
    }

    #[test]
    fn pixels_in_unit_range_and_splits_disjoint() {
        let d = generate_dataset(128, 9).unwrap();
        assert!(d.images().iter().flat_map(|i| i.pixels()).all(|&p| (0.0..=1.0).contains(&p)));
        let total: usize = Split::ALL.iter().map(|&s| d.indices(s).len()).sum();
        assert_eq!(total, d.len());
    }

    #[test]
    fn hue_bin_recovers_color_factor() {
        let d = generate_dataset(256, 4).unwrap();
        for i in 0..d.len() {
            assert_eq!(dominant_hue_bin(d.image(i)), Some(d.color_id(i)), "image {i}");
        }
    }

    #[test]
    fn cache_round_trip_and_regeneration() {
        let d = generate_dataset(80, 12).unwrap();
        let bytes = d.encode_cache();
        let back = SyntheticDataset::decode_cache(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, d);
        let regen = SyntheticDataset::generate(back.sizes(), back.seed()).unwrap();
        assert_eq!(regen.encode_cache(), bytes);
        assert!(SyntheticDataset::decode_cache(&bytes[..100], Path::new("mem")).is_err());
    }

    #[test]
    fn shapes_have_no_rotational_symmetry() {
        for s in 0..NUM_SHAPES {
            let mask: Vec<bool> = (0..256).map(|i| in_shape(s, i / 16, i % 16)).collect();
            let rot: Vec<bool> = (0..256).map(|i| in_shape(s, i % 16, 15 - i / 16)).collect();
            assert_ne!(mask, rot, "shape {s}");
            assert!(mask.iter().filter(|&&m| m).count() > 20);
        }
    }
}
