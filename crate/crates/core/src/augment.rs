//! Views of an image: random-resized (strong) crops, the deterministic weak
//! view, and rectangular CutMix.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

/// Square grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return invalid("image side must be positive");
        }
        check_len(side * side, pixels.len())?;
        Ok(Self { side, pixels })
    }

    pub fn zeros(side: usize) -> Self {
        Self { side, pixels: vec![0.0; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.side + x]
    }

    /// Pixels widened to `f64` for network input.
    pub fn to_input(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

/// A crop rectangle in source-pixel coordinates plus its resample side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropSpec {
    pub x0: u16,
    pub y0: u16,
    pub h: u16,
    pub w: u16,
    pub out_side: u16,
}

impl CropSpec {
    /// Wire form: five little-endian `u16` values `(x0, y0, h, w, out_side)`.
    pub fn to_bytes(&self) -> [u8; 10] {
        let mut out = [0u8; 10];
        for (i, v) in [self.x0, self.y0, self.h, self.w, self.out_side].into_iter().enumerate() {
            out[2 * i..2 * i + 2].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: [u8; 10]) -> Self {
        let v = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
        Self { x0: v(0), y0: v(1), h: v(2), w: v(3), out_side: v(4) }
    }

    /// The whole `side × side` image.
    pub fn full(side: usize, out_side: usize) -> Self {
        Self { x0: 0, y0: 0, h: side as u16, w: side as u16, out_side: out_side as u16 }
    }

    fn validate(&self, side: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.out_side == 0 {
            return invalid(format!("degenerate crop {self:?}"));
        }
        if self.x0 as usize + self.w as usize > side || self.y0 as usize + self.h as usize > side {
            return invalid(format!("crop {self:?} exceeds {side}-pixel image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    /// Centered square crop at 87.5% of the side; draws no randomness.
    Weak,
    /// Random-resized crop.
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub kind: AugKind,
    /// Fraction of source area, `0 < lo ≤ hi ≤ 1`.
    pub scale_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub out_side: usize,
}

impl AugConfig {
    pub fn weak(out_side: usize) -> Self {
        Self { kind: AugKind::Weak, scale_range: (1.0, 1.0), aspect_range: (1.0, 1.0), out_side }
    }

    pub fn strong(out_side: usize) -> Self {
        Self {
            kind: AugKind::Strong,
            scale_range: (0.08, 0.6),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            out_side,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return invalid(format!("scale range {:?} must satisfy 0 < lo <= hi <= 1", self.scale_range));
        }
        let (alo, ahi) = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return invalid(format!("aspect range {:?} must be positive and ordered", self.aspect_range));
        }
        if self.out_side < 1 || self.out_side > u16::MAX as usize {
            return invalid(format!("output side {} out of range", self.out_side));
        }
        Ok(())
    }
}

const WEAK_FRACTION: f64 = 0.875;
const CROP_ATTEMPTS: usize = 10;

/// Draws a crop rectangle for a `side × side` source.
pub fn sample_crop_spec<R: Rng + ?Sized>(side: usize, cfg: &AugConfig, rng: &mut R) -> Result<CropSpec> {
    cfg.validate()?;
    if side == 0 || side > u16::MAX as usize {
        return invalid(format!("image side {side} out of range"));
    }
    let out_side = cfg.out_side as u16;
    match cfg.kind {
        AugKind::Weak => {
            let crop = ((side as f64 * WEAK_FRACTION).floor() as usize).max(1);
            let off = ((side - crop) / 2) as u16;
            Ok(CropSpec { x0: off, y0: off, h: crop as u16, w: crop as u16, out_side })
        }
        AugKind::Strong => {
            let area = (side * side) as f64;
            let (lo, hi) = cfg.scale_range;
            let (alo, ahi) = (cfg.aspect_range.0.ln(), cfg.aspect_range.1.ln());
            for _ in 0..CROP_ATTEMPTS {
                let target = area * if lo < hi { rng.random_range(lo..=hi) } else { lo };
                let ratio = if alo < ahi { rng.random_range(alo..=ahi) } else { alo }.exp();
                let w = (target * ratio).sqrt().round() as usize;
                let h = (target / ratio).sqrt().round() as usize;
                if (1..=side).contains(&w) && (1..=side).contains(&h) {
                    let x0 = rng.random_range(0..=side - w) as u16;
                    let y0 = rng.random_range(0..=side - h) as u16;
                    return Ok(CropSpec { x0, y0, h: h as u16, w: w as u16, out_side });
                }
            }
            // Fallback: largest centered rectangle whose aspect lies in range.
            let ratio = 1.0f64.clamp(cfg.aspect_range.0, cfg.aspect_range.1);
            let (w, h) = if ratio >= 1.0 {
                (side, ((side as f64 / ratio).round() as usize).max(1))
            } else {
                (((side as f64 * ratio).round() as usize).max(1), side)
            };
            Ok(CropSpec {
                x0: ((side - w) / 2) as u16,
                y0: ((side - h) / 2) as u16,
                h: h as u16,
                w: w as u16,
                out_side,
            })
        }
    }
}

/// Bilinear resample of the rectangle `spec` to `out_side × out_side`,
/// sampling at pixel centers and clamping to the crop's own edge pixels.
pub fn apply_crop(image: &Image, spec: &CropSpec) -> Result<Image> {
    spec.validate(image.side)?;
    let out = spec.out_side as usize;
    let (x0, y0) = (spec.x0 as usize, spec.y0 as usize);
    let (w, h) = (spec.w as usize, spec.h as usize);
    let axis = |start: usize, len: usize, i: usize| -> (usize, usize, f64) {
        let pos = (i as f64 + 0.5) * len as f64 / out as f64 - 0.5;
        let pos = pos.clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, pos - lo as f64)
    };
    let cols: Vec<_> = (0..out).map(|j| axis(x0, w, j)).collect();
    let mut pixels = Vec::with_capacity(out * out);
    for i in 0..out {
        let (ya, yb, fy) = axis(y0, h, i);
        for &(xa, xb, fx) in &cols {
            let top = image.get(xa, ya) as f64 * (1.0 - fx) + image.get(xb, ya) as f64 * fx;
            let bottom = image.get(xa, yb) as f64 * (1.0 - fx) + image.get(xb, yb) as f64 * fx;
            pixels.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Image::new(out, pixels)
}

/// Draws a view of `image` under `cfg` and materializes it.
pub fn sample_crop<R: Rng + ?Sized>(image: &Image, cfg: &AugConfig, rng: &mut R) -> Result<(CropSpec, Image)> {
    let spec = sample_crop_spec(image.side, cfg, rng)?;
    let view = apply_crop(image, &spec)?;
    Ok((spec, view))
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutMixDraw {
    pub lam_raw: f64,
    pub cut: CutBox,
    /// Realized fraction of the image taken from the second source.
    pub lam_effective: f64,
}

/// Copies the pixels of `b` inside `cut` into `a`.
pub fn cutmix_with_box(a: &Image, b: &Image, cut: CutBox, lam_raw: f64) -> Result<(Image, CutMixDraw)> {
    check_len(a.side, b.side)?;
    let side = a.side;
    if cut.x0 > cut.x1 || cut.y0 > cut.y1 || cut.x1 > side || cut.y1 > side {
        return invalid(format!("cut box {cut:?} outside {side}-pixel image"));
    }
    let mut mixed = a.clone();
    for y in cut.y0..cut.y1 {
        let row = y * side;
        mixed.pixels[row + cut.x0..row + cut.x1].copy_from_slice(&b.pixels[row + cut.x0..row + cut.x1]);
    }
    let lam_effective = cut.area() as f64 / (side * side) as f64;
    Ok((mixed, CutMixDraw { lam_raw, cut, lam_effective }))
}

/// Rectangular CutMix with `λ ~ Beta(β, β)`, box clipped at the borders and
/// `λ` corrected to the realized area.
pub fn cutmix_images<R: Rng + ?Sized>(
    a: &Image,
    b: &Image,
    beta: f64,
    rng: &mut R,
) -> Result<(Image, CutMixDraw)> {
    check_len(a.side, b.side)?;
    if !(beta > 0.0) || !beta.is_finite() {
        return invalid(format!("CutMix beta must be positive, got {beta}"));
    }
    let lam_raw = Beta::new(beta, beta).map_err(|e| crate::error::LabError::InvalidArgument(e.to_string()))?.sample(rng);
    let side = a.side;
    let cut = (side as f64 * lam_raw.sqrt()).round() as usize;
    let cx = rng.random_range(0..side);
    let cy = rng.random_range(0..side);
    let half = cut / 2;
    let clip = |c: usize, lo: bool| -> usize {
        if lo {
            c.saturating_sub(half)
        } else {
            (c + cut - half).min(side)
        }
    };
    let cut_box = CutBox { x0: clip(cx, true), y0: clip(cy, true), x1: clip(cx, false), y1: clip(cy, false) };
    cutmix_with_box(a, b, cut_box, lam_raw)
}
