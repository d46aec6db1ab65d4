//! Synthetic glyph corpus with engineered local-view drift.
//!
//! Each image holds one full-intensity glyph of its class at a random
//! location plus `distractor_count` dimmer glyphs of other classes. A glyph
//! is a square patch of oriented stripes, one orientation per class, so a
//! partial view still carries class evidence while tight crops around a
//! distractor look like a different class. That is the source of crop-level
//! prediction variance.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::augment::{apply_crop, sample_crop, AugConfig, CropSpec, Image};
use crate::binio::{expect_magic, ByteReader};
use crate::error::{invalid, LabError, Result};
use crate::simplex::ProbVector;
use crate::tinynet::{backward, forward, init_net, opt_step, Batch, OptimizerKind, OptimizerState, Supervision, TinyNetParams};

pub const DATASET_MAGIC: [u8; 4] = *b"SYND";
pub const DATASET_VERSION: u16 = 1;

/// Distractor glyphs are drawn at this fraction of the primary intensity.
pub const DISTRACTOR_INTENSITY: f32 = 0.7;

/// Stripes never get finer than this many pixels per period, so they
/// survive downsampling to the network input.
const MIN_STRIPE_PERIOD: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub image_side: usize,
    pub glyph_side: usize,
    /// Images per class in the training split.
    pub n_train: usize,
    /// Images per class in the test split.
    pub n_test: usize,
    pub distractor_count: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            image_side: 32,
            glyph_side: 24,
            n_train: 100,
            n_test: 50,
            distractor_count: 2,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return invalid("need at least two classes");
        }
        if self.glyph_side == 0 || self.glyph_side >= self.image_side {
            return invalid("glyph side must be positive and smaller than the image side");
        }
        if self.image_side > u16::MAX as usize {
            return invalid("image side too large");
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return invalid("noise std must be non-negative");
        }
        let slots = (self.image_side - self.glyph_side + 1).pow(2);
        if self.distractor_count + 1 > slots {
            return invalid(format!(
                "{} glyphs cannot be placed at distinct locations in a {}-pixel image",
                self.distractor_count + 1,
                self.image_side
            ));
        }
        let masks = glyph_masks(self.classes, self.glyph_side);
        if masks.iter().any(|m| m.iter().all(|&b| b) || !m.iter().any(|&b| b)) {
            return invalid(format!("glyph side {} too small for stripes", self.glyph_side));
        }
        if masks.iter().collect::<HashSet<_>>().len() != masks.len() {
            return invalid(format!("{} classes do not have distinct glyphs at side {}", self.classes, self.glyph_side));
        }
        Ok(())
    }
}

/// Glyph placement `(x, y, side)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlyphBox {
    pub x: u16,
    pub y: u16,
    pub side: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
    pub primary_box: GlyphBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub image_side: usize,
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for im in &self.images {
            counts[im.label] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let px = self.image_side * self.image_side;
        let mut out = Vec::with_capacity(18 + self.images.len() * (8 + 4 * px));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.image_side as u32).to_le_bytes());
        out.extend_from_slice(&(self.images.len() as u32).to_le_bytes());
        for im in &self.images {
            out.extend_from_slice(&(im.label as u16).to_le_bytes());
            for v in [im.primary_box.x, im.primary_box.y, im.primary_box.side] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for p in im.image.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        expect_magic(&mut r, DATASET_MAGIC)?;
        let version = r.u16()?;
        if version != DATASET_VERSION {
            return Err(LabError::UnsupportedVersion(version));
        }
        let classes = r.u32()? as usize;
        let image_side = r.u32()? as usize;
        let count = r.u32()? as usize;
        if classes == 0 || image_side == 0 {
            return Err(LabError::CorruptHeader("zero classes or image side".into()));
        }
        let px = image_side * image_side;
        let needed = r.position() + count * (8 + 4 * px);
        if bytes.len() < needed {
            return Err(LabError::Truncated { needed, found: bytes.len() });
        }
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let label = r.u16()? as usize;
            if label >= classes {
                return Err(LabError::CorruptHeader(format!("label {label} out of range")));
            }
            let primary_box = GlyphBox { x: r.u16()?, y: r.u16()?, side: r.u16()? };
            let mut pixels = Vec::with_capacity(px);
            for _ in 0..px {
                pixels.push(r.f32()?);
            }
            images.push(LabeledImage { image: Image::new(image_side, pixels)?, label, primary_box });
        }
        if r.remaining() != 0 {
            return Err(LabError::CorruptHeader(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { classes, image_side, images })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// The fixed binary glyph of every class, `glyph_side²` values in `{0, 1}`.
///
/// Class `c` gets stripes at angle `πc/C` with a period of a third of the
/// glyph side (at least four pixels).
pub fn glyph_masks(classes: usize, glyph_side: usize) -> Vec<Vec<bool>> {
    let period = (glyph_side as f64 / 3.0).max(MIN_STRIPE_PERIOD);
    (0..classes)
        .map(|c| {
            let theta = std::f64::consts::PI * c as f64 / classes as f64;
            (0..glyph_side * glyph_side)
                .map(|i| {
                    let (x, y) = ((i % glyph_side) as f64 + 0.5, (i / glyph_side) as f64 + 0.5);
                    (2.0 * std::f64::consts::PI * (x * theta.cos() + y * theta.sin()) / period).sin() > 0.0
                })
                .collect()
        })
        .collect()
}

fn overlaps(a: (usize, usize), b: (usize, usize), side: usize) -> bool {
    a.0 < b.0 + side && b.0 < a.0 + side && a.1 < b.1 + side && b.1 < a.1 + side
}

fn render_one<R: Rng>(
    cfg: &SynthConfig,
    masks: &[Vec<bool>],
    label: usize,
    rng: &mut R,
    noise: &Normal<f64>,
) -> LabeledImage {
    let (side, gs) = (cfg.image_side, cfg.glyph_side);
    let span = side - gs;
    let mut placed: Vec<(usize, usize)> = Vec::with_capacity(cfg.distractor_count + 1);
    let primary = (rng.random_range(0..=span), rng.random_range(0..=span));
    placed.push(primary);
    let mut canvas = vec![0.0f32; side * side];
    let mut stamp = |pos: (usize, usize), class: usize, level: f32| {
        for gy in 0..gs {
            for gx in 0..gs {
                if masks[class][gy * gs + gx] {
                    let p = &mut canvas[(pos.1 + gy) * side + pos.0 + gx];
                    *p = p.max(level);
                }
            }
        }
    };
    for _ in 0..cfg.distractor_count {
        let mut other = rng.random_range(0..cfg.classes - 1);
        if other >= label {
            other += 1;
        }
        // Prefer non-overlapping spots; otherwise settle for any spot not
        // already taken.
        let mut pos = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let cand = (rng.random_range(0..=span), rng.random_range(0..=span));
            if placed.iter().all(|&p| !overlaps(p, cand, gs)) {
                pos = Some(cand);
                break;
            }
        }
        let pos = pos.unwrap_or_else(|| loop {
            let cand = (rng.random_range(0..=span), rng.random_range(0..=span));
            if !placed.contains(&cand) {
                break cand;
            }
        });
        placed.push(pos);
        stamp(pos, other, DISTRACTOR_INTENSITY);
    }
    // Primary last so it is never dimmed by an overlapping distractor.
    stamp(primary, label, 1.0);
    if cfg.noise_std > 0.0 {
        for p in &mut canvas {
            *p = (*p as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    LabeledImage {
        image: Image::new(side, canvas).expect("canvas matches side"),
        label,
        primary_box: GlyphBox { x: primary.0 as u16, y: primary.1 as u16, side: gs as u16 },
    }
}

/// Generates `(train, test)` splits. Deterministic given `cfg.seed`; test
/// images that would duplicate a training image bit-for-bit are redrawn.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let masks = glyph_masks(cfg.classes, cfg.glyph_side);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let split = |per_class: usize, rng: &mut ChaCha8Rng, exclude: &HashSet<Vec<u32>>| -> Result<Vec<LabeledImage>> {
        let mut labels: Vec<usize> = (0..cfg.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
        labels.shuffle(rng);
        let mut out = Vec::with_capacity(labels.len());
        for label in labels {
            let mut tries = 0;
            loop {
                let im = render_one(cfg, &masks, label, rng, &noise);
                if !exclude.contains(&pixel_key(&im.image)) {
                    out.push(im);
                    break;
                }
                tries += 1;
                if tries > 10_000 {
                    return invalid("cannot draw a test image distinct from the training split");
                }
            }
        }
        Ok(out)
    };
    let train = split(cfg.n_train, &mut rng, &HashSet::new())?;
    let keys: HashSet<Vec<u32>> = train.iter().map(|im| pixel_key(&im.image)).collect();
    let test = split(cfg.n_test, &mut rng, &keys)?;
    let wrap = |images| Dataset { classes: cfg.classes, image_side: cfg.image_side, images };
    Ok((wrap(train), wrap(test)))
}

fn pixel_key(image: &Image) -> Vec<u32> {
    image.pixels().iter().map(|p| p.to_bits()).collect()
}

/// Network input for a whole image resized to `side × side`.
pub fn full_view(image: &Image, side: usize) -> Result<Image> {
    apply_crop(image, &CropSpec::full(image.side(), side))
}

/// Infers the square input side of a network.
pub fn input_side(params: &TinyNetParams) -> Result<usize> {
    let d = params.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return invalid(format!("network input {d} is not a square image"));
    }
    Ok(side)
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub params: TinyNetParams,
    pub train_accuracy: f64,
    pub epoch_losses: Vec<f64>,
}

pub const TEACHER_BATCH: usize = 32;

/// Hard-label (unsmoothed cross-entropy) training on full images resized to
/// the network input, with adaptive moments and shuffled minibatches.
pub fn train_teacher(train: &Dataset, arch: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<TeacherRun> {
    fit_teacher(train, arch, epochs, lr, None, seed)
}

/// Like [`train_teacher`], but each sample is replaced by a strong crop with
/// probability `crop_fraction`. A teacher that has seen crops gives far
/// better labels on them than one trained on whole images only.
pub fn train_teacher_augmented(
    train: &Dataset,
    arch: &[usize],
    epochs: usize,
    lr: f64,
    strong: &AugConfig,
    crop_fraction: f64,
    seed: u64,
) -> Result<TeacherRun> {
    if !(0.0..=1.0).contains(&crop_fraction) {
        return invalid(format!("crop fraction {crop_fraction} outside [0, 1]"));
    }
    strong.validate()?;
    fit_teacher(train, arch, epochs, lr, Some((strong, crop_fraction)), seed)
}

fn fit_teacher(
    train: &Dataset,
    arch: &[usize],
    epochs: usize,
    lr: f64,
    crops: Option<(&AugConfig, f64)>,
    seed: u64,
) -> Result<TeacherRun> {
    if train.is_empty() {
        return invalid("teacher needs a non-empty training set");
    }
    let mut params = init_net(arch, seed)?;
    let side = input_side(&params)?;
    if params.output_dim() != train.classes {
        return invalid(format!("network emits {} classes, dataset has {}", params.output_dim(), train.classes));
    }
    if let Some((strong, _)) = crops {
        if strong.out_side != side {
            return invalid("crop output side differs from the teacher input side");
        }
    }
    let inputs: Vec<Vec<f64>> = train
        .images
        .iter()
        .map(|im| full_view(&im.image, side).map(|v| v.to_input()))
        .collect::<Result<_>>()?;
    let targets: Vec<ProbVector> = train
        .images
        .iter()
        .map(|im| ProbVector::one_hot(im.label, train.classes))
        .collect::<Result<_>>()?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(), lr, 0.0, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EAC_4E55);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(TEACHER_BATCH) {
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                match crops {
                    Some((strong, frac)) if frac > 0.0 && rng.random::<f64>() < frac => {
                        rows.push(sample_crop(&train.images[i].image, strong, &mut rng)?.1.to_input());
                    }
                    _ => rows.push(inputs[i].clone()),
                }
            }
            let batch = Batch::from_rows(&rows)?;
            let t: Vec<ProbVector> = chunk.iter().map(|&i| targets[i].clone()).collect();
            let lg = backward(&params, &batch, Supervision::Hard { targets: &t })?;
            if !lg.loss.is_finite() {
                return Err(LabError::Diverged(format!("teacher loss non-finite at epoch {epoch}")));
            }
            params = opt_step(&params, &lg.grads, &mut opt)?;
            total += lg.loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    let train_accuracy = accuracy_on(&params, &inputs, train.images.iter().map(|im| im.label))?;
    Ok(TeacherRun { params, train_accuracy, epoch_losses })
}

pub(crate) fn accuracy_on(
    params: &TinyNetParams,
    inputs: &[Vec<f64>],
    labels: impl Iterator<Item = usize>,
) -> Result<f64> {
    let mut correct = 0usize;
    let labels: Vec<usize> = labels.collect();
    for (chunk_in, chunk_lab) in inputs.chunks(256).zip(labels.chunks(256)) {
        let batch = Batch::from_rows(chunk_in)?;
        let preds = forward(params, &batch)?.predictions();
        correct += preds.iter().zip(chunk_lab).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / inputs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(distractors: usize, noise: f64) -> SynthConfig {
        SynthConfig {
            classes: 4,
            image_side: 16,
            glyph_side: 6,
            n_train: 10,
            n_test: 5,
            distractor_count: distractors,
            noise_std: noise,
            seed: 3,
        }
    }

    #[test]
    fn clean_images_hold_exactly_one_glyph() {
        let cfg = small(0, 0.0);
        let masks = glyph_masks(cfg.classes, cfg.glyph_side);
        let (train, test) = gen_dataset(&cfg).unwrap();
        for im in train.images.iter().chain(&test.images) {
            let b = im.primary_box;
            for y in 0..cfg.image_side {
                for x in 0..cfg.image_side {
                    let inside = (b.x as usize..(b.x + b.side) as usize).contains(&x)
                        && (b.y as usize..(b.y + b.side) as usize).contains(&y);
                    let expected = inside && masks[im.label][(y - b.y as usize) * 6 + x - b.x as usize];
                    assert_eq!(im.image.get(x, y), if expected { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let cfg = small(2, 0.1);
        let (a, at) = gen_dataset(&cfg).unwrap();
        let (b, bt) = gen_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(at, bt);
        assert_eq!(a.class_counts(), vec![10; 4]);
        assert_eq!(at.class_counts(), vec![5; 4]);
        assert!(a.images.iter().all(|im| im.image.pixels().iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn splits_are_disjoint() {
        // Tiny canvas: many duplicates would appear without the redraw.
        let cfg = SynthConfig { image_side: 10, glyph_side: 6, n_train: 20, n_test: 5, ..small(0, 0.0) };
        let (train, test) = gen_dataset(&cfg).unwrap();
        let keys: HashSet<Vec<u32>> = train.images.iter().map(|im| pixel_key(&im.image)).collect();
        assert!(test.images.iter().all(|im| !keys.contains(&pixel_key(&im.image))));
    }

    #[test]
    fn glyphs_are_distinct() {
        for (classes, side) in [(10, 12), (10, 24), (4, 6)] {
            let masks = glyph_masks(classes, side);
            let set: HashSet<_> = masks.iter().collect();
            assert_eq!(set.len(), classes);
        }
    }

    #[test]
    fn stripes_follow_class_angle() {
        // Class 0 has vertical stripes: every column is constant.
        let m = &glyph_masks(10, 12)[0];
        for x in 0..12 {
            assert!((0..12).all(|y| m[y * 12 + x] == m[x]));
        }
        // Half the class count turns them horizontal.
        let m = &glyph_masks(10, 12)[5];
        for y in 0..12 {
            assert!((0..12).all(|x| m[y * 12 + x] == m[y * 12]));
        }
    }

    #[test]
    fn degenerate_glyph_side_is_rejected() {
        let cfg = SynthConfig { glyph_side: 1, ..small(0, 0.0) };
        assert!(gen_dataset(&cfg).is_err());
    }

    #[test]
    fn impossible_placement_is_rejected() {
        let cfg = SynthConfig { image_side: 7, glyph_side: 6, distractor_count: 4, ..small(0, 0.0) };
        assert!(gen_dataset(&cfg).is_err());
        let cfg = SynthConfig { glyph_side: 16, ..small(0, 0.0) };
        assert!(gen_dataset(&cfg).is_err());
    }

    #[test]
    fn distractors_hijack_some_crops() {
        // Census of glyph-sized crops: how often does a distractor cover more
        // of the crop than the primary glyph?
        let cfg = SynthConfig { classes: 10, image_side: 32, glyph_side: 12, n_train: 10, n_test: 1, distractor_count: 2, noise_std: 0.0, seed: 1 };
        let (train, _) = gen_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut hijacked = 0;
        let total = 10_000;
        for _ in 0..total {
            let im = &train.images[rng.random_range(0..train.len())];
            let x0 = rng.random_range(0..=32 - 12);
            let y0 = rng.random_range(0..=32 - 12);
            let (mut primary, mut distractor) = (0, 0);
            for y in y0..y0 + 12 {
                for x in x0..x0 + 12 {
                    let v = im.image.get(x, y);
                    if v == 1.0 {
                        primary += 1;
                    } else if v == DISTRACTOR_INTENSITY {
                        distractor += 1;
                    }
                }
            }
            hijacked += usize::from(distractor > primary);
        }
        assert!(hijacked > 0, "no crop was dominated by a distractor");
    }

    #[test]
    fn dataset_file_round_trip() {
        let (train, _) = gen_dataset(&small(1, 0.05)).unwrap();
        let bytes = train.to_bytes();
        assert_eq!(&bytes[..4], b"SYND");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), train);
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 1]), Err(LabError::Truncated { .. })));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (train, _) = gen_dataset(&small(0, 0.0)).unwrap();
        let run = train_teacher(&train, &[64, 4], 0, 0.01, 9).unwrap();
        assert_eq!(run.params, init_net(&[64, 4], 9).unwrap());
    }

    #[test]
    fn teacher_training_is_deterministic() {
        let (train, _) = gen_dataset(&small(1, 0.05)).unwrap();
        let a = train_teacher(&train, &[64, 16, 4], 3, 0.01, 5).unwrap();
        let b = train_teacher(&train, &[64, 16, 4], 3, 0.01, 5).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    }

    #[test]
    fn augmented_teacher_without_crops_matches_plain() {
        let (train, _) = gen_dataset(&small(1, 0.05)).unwrap();
        let strong = AugConfig::strong(8);
        let a = train_teacher(&train, &[64, 16, 4], 3, 0.01, 5).unwrap();
        let b = train_teacher_augmented(&train, &[64, 16, 4], 3, 0.01, &strong, 0.0, 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = train_teacher_augmented(&train, &[64, 16, 4], 3, 0.01, &strong, 1.0, 5).unwrap();
        assert_ne!(a.params, c.params);
        assert!(train_teacher_augmented(&train, &[64, 16, 4], 3, 0.01, &strong, 1.5, 5).is_err());
    }

    #[test]
    fn teacher_separates_clean_classes() {
        let cfg = SynthConfig { classes: 4, n_train: 500, n_test: 0, distractor_count: 0, noise_std: 0.0, seed: 2, ..SynthConfig::default() };
        let (train, _) = gen_dataset(&cfg).unwrap();
        let run = train_teacher(&train, &[256, 64, 4], 30, 3e-3, 1).unwrap();
        assert!(run.train_accuracy >= 0.99, "train accuracy {}", run.train_accuracy);
    }
}
