//! Measurement suite: crop-level prediction covariance (local-view drift),
//! crop consistency, agreement with a reference model, and the empirical
//! `E‖p̂_s − p̄‖² = Tr(Σ)/s` check on a real predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{sample_crop, AugConfig, Image};
use crate::error::{invalid, Result};
use crate::simplex::{cosine_sim, js_slice, ProbVector};
use crate::softlabel::teacher_probs;
use crate::tinynet::TinyNetParams;

/// Default stabilizer in the drift ratio denominator.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Views per image for covariance estimates.
pub const DEFAULT_COV_CROPS: usize = 64;
/// Views per image for consistency reports.
pub const DEFAULT_CONSISTENCY_CROPS: usize = 16;
/// Views used to pin down `p̄` and `Tr(Σ)` in [`lemma1_empirics`].
pub const REFERENCE_CROPS: usize = 10_000;

/// Anything that maps a batch of views to class distributions.
pub trait Predictor: Sync {
    fn predict(&self, views: &[Image]) -> Result<Vec<ProbVector>>;
}

impl Predictor for TinyNetParams {
    fn predict(&self, views: &[Image]) -> Result<Vec<ProbVector>> {
        teacher_probs(self, views, 1.0)
    }
}

fn draw_views<R: Rng + ?Sized>(image: &Image, n: usize, cfg: &AugConfig, rng: &mut R) -> Result<Vec<Image>> {
    (0..n).map(|_| sample_crop(image, cfg, rng).map(|(_, v)| v)).collect()
}

/// Mean vector and unbiased covariance trace of a set of distributions.
pub fn mean_and_cov_trace(preds: &[ProbVector]) -> (Vec<f64>, f64) {
    let n = preds.len();
    // Shifting by the first sample keeps identical predictions at exactly zero.
    let shift = preds[0].as_slice();
    let mut delta = vec![0.0; shift.len()];
    for p in preds {
        for ((d, v), s) in delta.iter_mut().zip(p.as_slice()).zip(shift) {
            *d += v - s;
        }
    }
    for d in &mut delta {
        *d /= n as f64;
    }
    let mean = delta.iter().zip(shift).map(|(d, s)| s + d).collect();
    if n < 2 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for p in preds {
        for ((d, v), s) in delta.iter().zip(p.as_slice()).zip(shift) {
            let e = (v - s) - d;
            ss += e * e;
        }
    }
    (mean, ss / (n - 1) as f64)
}

/// Unbiased trace of the covariance of model predictions over `n_crops`
/// views drawn under `cfg`.
pub fn pred_cov_trace<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Image,
    n_crops: usize,
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<f64> {
    if n_crops < 2 {
        return invalid("covariance needs at least two crops");
    }
    let views = draw_views(image, n_crops, cfg, rng)?;
    Ok(mean_and_cov_trace(&model.predict(&views)?).1)
}

/// `Tr(Σ̂_strong) / (Tr(Σ̂_weak) + ε)`.
pub fn drift_ratio(trace_strong: f64, trace_weak: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    Ok(trace_strong / (trace_weak + epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageDrift {
    pub trace_weak: f64,
    pub trace_strong: f64,
    pub ratio: f64,
}

fn image_drift<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Image,
    n_crops: usize,
    weak: &AugConfig,
    strong: &AugConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<ImageDrift> {
    let trace_weak = pred_cov_trace(model, image, n_crops, weak, rng)?;
    let trace_strong = pred_cov_trace(model, image, n_crops, strong, rng)?;
    Ok(ImageDrift { trace_weak, trace_strong, ratio: drift_ratio(trace_strong, trace_weak, epsilon)? })
}

/// Drift ratio `R` for a single image.
pub fn lvsd_ratio<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Image,
    n_crops: usize,
    weak: &AugConfig,
    strong: &AugConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64> {
    Ok(image_drift(model, image, n_crops, weak, strong, epsilon, rng)?.ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LvsdReport {
    pub per_image: Vec<ImageDrift>,
    pub mean_trace_weak: f64,
    pub mean_trace_strong: f64,
    pub mean_ratio: f64,
    /// `log10` of the mean ratio; `None` when the mean ratio is zero.
    pub log10_mean_ratio: Option<f64>,
    pub frac_ratio_above_one: f64,
    pub n_crops: usize,
    pub epsilon: f64,
}

impl LvsdReport {
    /// Aggregates per-image records.
    pub fn from_images(per_image: Vec<ImageDrift>, n_crops: usize, epsilon: f64) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean_trace_weak = per_image.iter().map(|d| d.trace_weak).sum::<f64>() / n;
        let mean_trace_strong = per_image.iter().map(|d| d.trace_strong).sum::<f64>() / n;
        let mean_ratio = per_image.iter().map(|d| d.ratio).sum::<f64>() / n;
        let above = per_image.iter().filter(|d| d.ratio > 1.0).count() as f64 / n;
        Self {
            per_image,
            mean_trace_weak,
            mean_trace_strong,
            mean_ratio,
            log10_mean_ratio: (mean_ratio > 0.0).then(|| mean_ratio.log10()),
            frac_ratio_above_one: above,
            n_crops,
            epsilon,
        }
    }

    /// Per-image rows: `image,trace_weak,trace_strong,ratio`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,trace_weak,trace_strong,ratio\n");
        for (i, d) in self.per_image.iter().enumerate() {
            out.push_str(&format!("{i},{:e},{:e},{:e}\n", d.trace_weak, d.trace_strong, d.ratio));
        }
        out
    }

    /// Aggregate fields only, as JSON.
    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({
            "images": self.per_image.len(),
            "mean_trace_weak": self.mean_trace_weak,
            "mean_trace_strong": self.mean_trace_strong,
            "mean_ratio": self.mean_ratio,
            "log10_mean_ratio": self.log10_mean_ratio,
            "frac_ratio_above_one": self.frac_ratio_above_one,
            "n_crops": self.n_crops,
            "epsilon": self.epsilon,
        })
    }
}

/// Drift statistics over a set of images. Each image gets its own rng
/// stream derived from one draw of `rng`, so results do not depend on how
/// the per-image jobs are scheduled.
pub fn lvsd_report<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    images: &[Image],
    n_crops: usize,
    weak: &AugConfig,
    strong: &AugConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<LvsdReport> {
    if images.is_empty() {
        return invalid("drift report needs at least one image");
    }
    let base: u64 = rng.random();
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, im)| {
            let mut local = ChaCha8Rng::seed_from_u64(base);
            local.set_stream(i as u64);
            image_drift(model, im, n_crops, weak, strong, epsilon, &mut local)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LvsdReport::from_images(per_image, n_crops, epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub mean_js: f64,
    pub mean_cosine: f64,
    pub samples: usize,
}

impl AlignmentReport {
    /// Sample-weighted mean of several reports.
    pub fn merge(reports: &[AlignmentReport]) -> AlignmentReport {
        let n: usize = reports.iter().map(|r| r.samples).sum();
        let w = |f: fn(&AlignmentReport) -> f64| {
            reports.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / n.max(1) as f64
        };
        AlignmentReport { mean_js: w(|r| r.mean_js), mean_cosine: w(|r| r.mean_cosine), samples: n }
    }
}

/// Mean JS divergence and cosine over all unordered pairs of distributions.
pub fn pairwise_agreement(preds: &[ProbVector]) -> Result<AlignmentReport> {
    let mut js = 0.0;
    let mut cos = 0.0;
    let mut pairs = 0;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            js += js_slice(preds[i].as_slice(), preds[j].as_slice());
            cos += cosine_sim(preds[i].as_slice(), preds[j].as_slice())?;
            pairs += 1;
        }
    }
    let n = pairs.max(1) as f64;
    Ok(AlignmentReport { mean_js: js / n, mean_cosine: cos / n, samples: pairs })
}

/// How well predictions on different strong crops of one image agree.
pub fn crop_consistency<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Image,
    n_crops: usize,
    strong: &AugConfig,
    rng: &mut R,
) -> Result<AlignmentReport> {
    if n_crops < 2 {
        return invalid("consistency needs at least two crops");
    }
    let views = draw_views(image, n_crops, strong, rng)?;
    pairwise_agreement(&model.predict(&views)?)
}

/// Mean crop consistency over several images, one rng stream per image.
pub fn mean_crop_consistency<P: Predictor + ?Sized>(
    model: &P,
    images: &[Image],
    n_crops: usize,
    strong: &AugConfig,
    seed: u64,
) -> Result<AlignmentReport> {
    let reports = images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            crop_consistency(model, im, n_crops, strong, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_image: Vec<f64> = reports.iter().map(|r| r.mean_js).collect();
    let cos: Vec<f64> = reports.iter().map(|r| r.mean_cosine).collect();
    let n = images.len() as f64;
    Ok(AlignmentReport {
        mean_js: per_image.iter().sum::<f64>() / n,
        mean_cosine: cos.iter().sum::<f64>() / n,
        samples: images.len(),
    })
}

/// Per-image weak-view agreement between `model` and `reference`.
pub fn prediction_alignment<P: Predictor + ?Sized, Q: Predictor + ?Sized>(
    model: &P,
    reference: &Q,
    images: &[Image],
    weak: &AugConfig,
) -> Result<AlignmentReport> {
    if images.is_empty() {
        return invalid("alignment needs at least one test image");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let views: Vec<Image> = images
        .iter()
        .map(|im| sample_crop(im, weak, &mut rng).map(|(_, v)| v))
        .collect::<Result<_>>()?;
    let a = model.predict(&views)?;
    let b = reference.predict(&views)?;
    let mut js = 0.0;
    let mut cos = 0.0;
    for (p, q) in a.iter().zip(&b) {
        js += js_slice(p.as_slice(), q.as_slice());
        cos += cosine_sim(p.as_slice(), q.as_slice())?;
    }
    let n = images.len() as f64;
    Ok(AlignmentReport { mean_js: js / n, mean_cosine: cos / n, samples: images.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Row {
    pub s: usize,
    /// Monte Carlo `E‖p̂_s − p̄‖²`.
    pub empirical: f64,
    /// `Tr(Σ̂) / s`.
    pub predicted: f64,
}

/// Empirical mean-squared error of an `s`-crop label average against the
/// crop-mean prediction, next to `Tr(Σ̂)/s`.
pub fn lemma1_empirics<P: Predictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    image: &Image,
    s_list: &[usize],
    trials: usize,
    strong: &AugConfig,
    rng: &mut R,
) -> Result<Vec<Lemma1Row>> {
    if s_list.is_empty() || s_list.contains(&0) {
        return invalid("s list must be non-empty and positive");
    }
    if trials < 100 {
        return invalid("lemma 1 empirics need at least 100 trials");
    }
    let reference = model.predict(&draw_views(image, REFERENCE_CROPS, strong, rng)?)?;
    let (mean, trace) = mean_and_cov_trace(&reference);
    let mut rows = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let mut total = 0.0;
        for _ in 0..trials {
            let preds = model.predict(&draw_views(image, s, strong, rng)?)?;
            let mut avg = vec![0.0; mean.len()];
            for p in &preds {
                for (a, v) in avg.iter_mut().zip(p.as_slice()) {
                    *a += v / s as f64;
                }
            }
            total += avg.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>();
        }
        rows.push(Lemma1Row { s, empirical: total / trials as f64, predicted: trace / s as f64 });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
