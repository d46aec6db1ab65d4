//! The finite soft-label pool: budget accounting, generation from a teacher,
//! the `SLBL` file format, and with-replacement minibatch sampling.
//!
//! A pool stores crop rectangles and quantized teacher probabilities, never
//! crop pixels; pixels are rematerialized from the source image on demand.

use std::fs;
use std::path::Path;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{apply_crop, sample_crop_spec, AugConfig, CropSpec, Image};
use crate::binio::{expect_magic, ByteReader};
use crate::error::{invalid, LabError, Result};
use crate::simplex::{softmax_slice, ProbVector};
use crate::synthdata::{input_side, Dataset};
use crate::tinynet::{forward, Batch, TinyNetParams};

pub const POOL_MAGIC: [u8; 4] = *b"SLBL";
pub const POOL_VERSION: u16 = 1;
/// magic + version + C + num_images + sli + b + tau + seed + crc32.
pub const POOL_HEADER_BYTES: usize = 4 + 2 + 4 + 4 + 2 + 1 + 4 + 8 + 4;
/// Image id plus the five-field crop rectangle.
pub const ENTRY_PREFIX_BYTES: usize = 4 + 10;

/// Default scalar width; the reported storage figures match 16-bit scalars.
pub const DEFAULT_BITS: u8 = 16;

/// Soft labels per class: `ipc × sli`.
pub fn slc_from(ipc: usize, sli: usize) -> usize {
    ipc * sli
}

fn check_bits(bits: u32) -> Result<()> {
    match bits {
        16 | 32 | 64 => Ok(()),
        _ => invalid(format!("unsupported scalar width {bits} bits (use 16, 32 or 64)")),
    }
}

/// Label payload in bytes: `num_classes · slc · C · b / 8` (headers excluded).
pub fn budget_bytes(slc: u64, label_dim: u64, bits: u32, num_classes: u64) -> Result<u64> {
    check_bits(bits)?;
    Ok(num_classes * slc * label_dim * bits as u64 / 8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub image_id: u32,
    pub crop: CropSpec,
    pub label: ProbVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelPool {
    pub classes: usize,
    pub num_images: usize,
    /// Soft labels per image.
    pub sli: usize,
    /// Bits per stored scalar.
    pub bits: u8,
    /// Temperature used when the labels were generated.
    pub tau: f64,
    pub seed: u64,
    pub entries: Vec<PoolEntry>,
}

/// Byte breakdown of a saved pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayout {
    pub header: usize,
    pub crop_table: usize,
    pub label_payload: usize,
}

impl PoolLayout {
    pub fn total(&self) -> usize {
        self.header + self.crop_table + self.label_payload
    }
}

impl SoftLabelPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stored labels per class of `dataset` (indexed by class).
    pub fn per_class_counts(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        let mut counts = vec![0; dataset.classes];
        for e in &self.entries {
            let im = dataset.images.get(e.image_id as usize).ok_or(LabError::MissingImage(e.image_id))?;
            counts[im.label] += 1;
        }
        Ok(counts)
    }

    /// `ipc × sli`, requiring a class-balanced source dataset.
    pub fn slc(&self, dataset: &Dataset) -> Result<usize> {
        let counts = dataset.class_counts();
        let ipc = counts[0];
        if counts.iter().any(|&c| c != ipc) {
            return invalid("soft labels per class are undefined for an unbalanced dataset");
        }
        Ok(slc_from(ipc, self.sli))
    }

    pub fn layout(&self) -> PoolLayout {
        PoolLayout {
            header: POOL_HEADER_BYTES,
            crop_table: self.entries.len() * ENTRY_PREFIX_BYTES,
            label_payload: self.entries.len() * self.classes * self.bits as usize / 8,
        }
    }

    fn encode_entries(&self) -> Vec<u8> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.crop_table + layout.label_payload);
        for e in &self.entries {
            out.extend_from_slice(&e.image_id.to_le_bytes());
            out.extend_from_slice(&e.crop.to_bytes());
            for &p in e.label.as_slice() {
                match self.bits {
                    16 => out.extend_from_slice(&f16::from_f64(p).to_le_bytes()),
                    32 => out.extend_from_slice(&(p as f32).to_le_bytes()),
                    _ => out.extend_from_slice(&p.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_bits(self.bits as u32)?;
        if self.sli > u16::MAX as usize {
            return invalid("sli does not fit the pool header");
        }
        let body = self.encode_entries();
        let mut out = Vec::with_capacity(POOL_HEADER_BYTES + body.len());
        out.extend_from_slice(&POOL_MAGIC);
        out.extend_from_slice(&POOL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_images as u32).to_le_bytes());
        out.extend_from_slice(&(self.sli as u16).to_le_bytes());
        out.push(self.bits);
        out.extend_from_slice(&(self.tau as f32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    /// Parses a pool file. Labels are dequantized and renormalized.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        expect_magic(&mut r, POOL_MAGIC)?;
        let version = r.u16()?;
        if version != POOL_VERSION {
            return Err(LabError::UnsupportedVersion(version));
        }
        let classes = r.u32()? as usize;
        let num_images = r.u32()? as usize;
        let sli = r.u16()? as usize;
        let bits = r.u8()?;
        let tau = r.f32()? as f64;
        let seed = r.u64()?;
        let stored = r.u32()?;
        if classes == 0 {
            return Err(LabError::CorruptHeader("zero classes".into()));
        }
        check_bits(bits as u32).map_err(|_| LabError::CorruptHeader(format!("scalar width {bits}")))?;
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(LabError::CorruptHeader(format!("temperature {tau}")));
        }
        let count = num_images * sli;
        let entry_bytes = ENTRY_PREFIX_BYTES + classes * bits as usize / 8;
        let needed = POOL_HEADER_BYTES + count * entry_bytes;
        if bytes.len() < needed {
            return Err(LabError::Truncated { needed, found: bytes.len() });
        }
        if bytes.len() > needed {
            return Err(LabError::CorruptHeader(format!("{} trailing bytes", bytes.len() - needed)));
        }
        let computed = crc32fast::hash(&bytes[POOL_HEADER_BYTES..]);
        if computed != stored {
            return Err(LabError::ChecksumMismatch { stored, computed });
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let image_id = r.u32()?;
            if image_id as usize >= num_images {
                return Err(LabError::CorruptHeader(format!("image id {image_id} out of range")));
            }
            let crop = CropSpec::from_bytes(r.array()?);
            let mut values = Vec::with_capacity(classes);
            for _ in 0..classes {
                values.push(match bits {
                    16 => f16::from_le_bytes(r.array()?).to_f64(),
                    32 => r.f32()? as f64,
                    _ => r.f64()?,
                });
            }
            let label = ProbVector::new(values).map_err(|e| LabError::CorruptHeader(e.to_string()))?;
            entries.push(PoolEntry { image_id, crop, label });
        }
        Ok(Self { classes, num_images, sli, bits, tau, seed, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Rng stream dedicated to one image so that a pool with more labels per
/// image extends (rather than reshuffles) a smaller pool's crops.
pub(crate) fn image_stream(seed: u64, image_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id as u64);
    rng
}

/// Teacher probabilities at temperature `tau` for a list of views.
pub fn teacher_probs(teacher: &TinyNetParams, views: &[Image], tau: f64) -> Result<Vec<ProbVector>> {
    let mut out = Vec::with_capacity(views.len());
    for chunk in views.chunks(256) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(Image::to_input).collect();
        let pass = forward(teacher, &Batch::from_rows(&rows)?)?;
        for i in 0..pass.rows() {
            out.push(ProbVector::new(softmax_slice(pass.row_logits(i), tau))?);
        }
    }
    Ok(out)
}

/// Draws `sli` strong crops per image and stores the teacher's tempered
/// predictions.
pub fn generate_pool(
    teacher: &TinyNetParams,
    dataset: &Dataset,
    sli: usize,
    strong: &AugConfig,
    tau: f64,
    bits: u8,
    seed: u64,
) -> Result<SoftLabelPool> {
    if dataset.is_empty() {
        return invalid("cannot build a soft-label pool from an empty dataset");
    }
    if sli == 0 {
        return invalid("sli must be at least 1");
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    check_bits(bits as u32)?;
    if input_side(teacher)? != strong.out_side {
        return invalid("teacher input side differs from the crop output side");
    }
    if teacher.output_dim() != dataset.classes {
        return invalid("teacher class count differs from the dataset");
    }
    let mut entries = Vec::with_capacity(dataset.len() * sli);
    for (id, im) in dataset.images.iter().enumerate() {
        let mut rng = image_stream(seed, id);
        let mut specs = Vec::with_capacity(sli);
        let mut views = Vec::with_capacity(sli);
        for _ in 0..sli {
            let spec = sample_crop_spec(im.image.side(), strong, &mut rng)?;
            views.push(apply_crop(&im.image, &spec)?);
            specs.push(spec);
        }
        for (crop, label) in specs.into_iter().zip(teacher_probs(teacher, &views, tau)?) {
            entries.push(PoolEntry { image_id: id as u32, crop, label });
        }
    }
    Ok(SoftLabelPool {
        classes: dataset.classes,
        num_images: dataset.len(),
        sli,
        bits,
        tau,
        seed,
        entries,
    })
}

/// A sampled minibatch with rematerialized crop pixels.
#[derive(Debug, Clone)]
pub struct PoolBatch {
    pub indices: Vec<usize>,
    pub inputs: Batch,
    pub targets: Vec<ProbVector>,
}

/// Rematerializes the crop of one pool entry.
pub fn entry_view(pool: &SoftLabelPool, dataset: &Dataset, index: usize) -> Result<Image> {
    let e = &pool.entries[index];
    let im = dataset.images.get(e.image_id as usize).ok_or(LabError::MissingImage(e.image_id))?;
    apply_crop(&im.image, &e.crop)
}

/// Batch for explicit pool indices.
pub fn batch_for(pool: &SoftLabelPool, dataset: &Dataset, indices: Vec<usize>) -> Result<PoolBatch> {
    let mut rows = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for &i in &indices {
        rows.push(entry_view(pool, dataset, i)?.to_input());
        targets.push(pool.entries[i].label.clone());
    }
    Ok(PoolBatch { indices, inputs: Batch::from_rows(&rows)?, targets })
}

/// Uniform with-replacement draw of `size` entries.
pub fn sample_batch<R: Rng + ?Sized>(
    pool: &SoftLabelPool,
    dataset: &Dataset,
    rng: &mut R,
    size: usize,
) -> Result<PoolBatch> {
    if pool.is_empty() {
        return invalid("cannot sample from an empty pool");
    }
    if size == 0 {
        return invalid("batch size must be at least 1");
    }
    let indices: Vec<usize> = (0..size).map(|_| rng.random_range(0..pool.len())).collect();
    batch_for(pool, dataset, indices)
}
