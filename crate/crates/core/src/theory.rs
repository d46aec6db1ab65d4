//! Monte Carlo and closed-form checks of the variance, deviation, excess-risk,
//! mixing and alignment bounds behind soft-label training.
//!
//! Every Monte Carlo total is a sum over fixed-size chunks of trials. Trial
//! `i` draws from its own counter-addressed block of a ChaCha stream, and
//! chunk sums are combined in index order, so totals are bit-identical for
//! any rayon worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, LabError, Result};
use crate::simplex::{cosine, entropy, label_smooth, ProbVector};

/// `g(θ) = √θ (1 − θ)²`, the Paley–Zygmund trade-off being maximized.
pub fn pz_g(theta: f64) -> f64 {
    theta.max(0.0).sqrt() * (1.0 - theta).powi(2)
}

/// Maximizer and maximum of [`pz_g`] on `[0, 1]`: dense grid, then
/// golden-section refinement around the best grid point.
pub fn pz_constant() -> (f64, f64) {
    const GRID: usize = 10_000;
    let best = (0..=GRID)
        .map(|i| i as f64 / GRID as f64)
        .fold(0.0, |b, t| if pz_g(t) > pz_g(b) { t } else { b });
    let step = 1.0 / GRID as f64;
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(1.0));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    while hi - lo > 1e-13 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if pz_g(a) < pz_g(b) {
            lo = a;
        } else {
            hi = b;
        }
    }
    let theta = 0.5 * (lo + hi);
    (theta, pz_g(theta))
}

/// `(σ/√s) · g(θ⋆) · min{1/κ, 1/3}`.
pub fn thm1_bound(sigma: f64, kappa: f64, s: usize) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!("sigma must be finite and non-negative, got {sigma}"));
    }
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return invalid(format!("kurtosis must be at least 1, got {kappa}"));
    }
    if s == 0 {
        return invalid("sample size must be at least 1");
    }
    let (_, g) = pz_constant();
    Ok(sigma / (s as f64).sqrt() * g * (1.0 / kappa).min(1.0 / 3.0))
}

const CHUNK: usize = 1024;
/// Words of keystream reserved for one trial.
const TRIAL_WORDS: u128 = 1 << 32;

fn trial_rng(seed: u64, tag: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.set_word_pos(trial as u128 * TRIAL_WORDS);
    rng
}

/// Sum of `f` over `trials` independent trials, deterministic in
/// `(seed, tag)` and independent of the number of workers.
pub fn mc_sum<F>(seed: u64, tag: u64, trials: usize, f: F) -> f64
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let chunks = trials.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(trials))
                .map(|i| f(&mut trial_rng(seed, tag, i)))
                .sum()
        })
        .collect();
    partial.iter().sum()
}

fn mc_mean<F>(seed: u64, tag: u64, trials: usize, f: F) -> f64
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    mc_sum(seed, tag, trials, f) / trials as f64
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LossLaw {
    Gaussian { mean: f64, std: f64 },
    /// `high` with probability `p_high`, otherwise `low`.
    TwoPoint { low: f64, high: f64, p_high: f64 },
    Table { values: Vec<f64>, probs: Vec<f64> },
}

/// A per-crop loss law with its first, second and fourth central moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDistSpec {
    pub law: LossLaw,
    pub mean: f64,
    pub std: f64,
    /// `E(X−μ)⁴ / σ⁴`; 3 for the Gaussian, 1 (by convention) for a point mass.
    pub kurtosis: f64,
}

impl LossDistSpec {
    pub fn gaussian(mean: f64, std: f64) -> Result<Self> {
        if !(std >= 0.0) {
            return invalid("std must be non-negative");
        }
        let kurtosis = if std > 0.0 { 3.0 } else { 1.0 };
        Ok(Self { law: LossLaw::Gaussian { mean, std }, mean, std, kurtosis })
    }

    pub fn two_point(low: f64, high: f64, p_high: f64) -> Result<Self> {
        let mut spec = Self::table(vec![low, high], vec![1.0 - p_high, p_high])?;
        spec.law = LossLaw::TwoPoint { low, high, p_high };
        Ok(spec)
    }

    pub fn table(values: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        check_len(values.len(), probs.len())?;
        if values.is_empty() {
            return invalid("loss table is empty");
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid("loss table probabilities must form a distribution");
        }
        let mean: f64 = values.iter().zip(&probs).map(|(v, p)| v * p).sum();
        let m2: f64 = values.iter().zip(&probs).map(|(v, p)| p * (v - mean).powi(2)).sum();
        let m4: f64 = values.iter().zip(&probs).map(|(v, p)| p * (v - mean).powi(4)).sum();
        let kurtosis = if m2 > 0.0 { m4 / (m2 * m2) } else { 1.0 };
        Ok(Self { law: LossLaw::Table { values, probs }, mean, std: m2.sqrt(), kurtosis })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.law {
            LossLaw::Gaussian { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            LossLaw::TwoPoint { low, high, p_high } => {
                if rng.random::<f64>() < *p_high {
                    *high
                } else {
                    *low
                }
            }
            LossLaw::Table { values, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (v, p) in values.iter().zip(probs) {
                    acc += p;
                    if u < acc {
                        return *v;
                    }
                }
                *values.last().expect("non-empty table")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm1Row {
    pub s: usize,
    pub empirical: f64,
    pub bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Mean absolute deviation of the `s`-crop empirical loss from the ideal
/// loss, against the lower bound.
pub fn verify_thm1(dist: &LossDistSpec, s_list: &[usize], trials: usize, seed: u64) -> Result<Vec<Thm1Row>> {
    check_trials(trials)?;
    s_list
        .iter()
        .map(|&s| {
            let bound = thm1_bound(dist.std, dist.kurtosis, s)?;
            let empirical = mc_mean(seed, 0x100 + s as u64, trials, |rng| {
                let total: f64 = (0..s).map(|_| dist.sample(rng)).sum();
                (total / s as f64 - dist.mean).abs()
            });
            Ok(Thm1Row { s, empirical, bound, slack: empirical - bound, holds: empirical >= bound })
        })
        .collect()
}

/// A law over label vectors whose covariance trace is known in closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelLaw {
    PointMass(ProbVector),
    Categorical { atoms: Vec<ProbVector>, probs: Vec<f64> },
    Dirichlet { alpha: Vec<f64> },
}

impl LabelLaw {
    pub fn validate(&self) -> Result<()> {
        match self {
            LabelLaw::PointMass(_) => Ok(()),
            LabelLaw::Categorical { atoms, probs } => {
                check_len(atoms.len(), probs.len())?;
                if atoms.is_empty() {
                    return invalid("categorical law needs atoms");
                }
                let c = atoms[0].classes();
                if atoms.iter().any(|a| a.classes() != c) {
                    return invalid("atoms differ in class count");
                }
                if probs.iter().any(|p| !(*p >= 0.0)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return invalid("categorical weights must form a distribution");
                }
                Ok(())
            }
            LabelLaw::Dirichlet { alpha } => {
                if alpha.len() < 2 || alpha.iter().any(|a| !(*a > 0.0)) {
                    return invalid("Dirichlet needs at least two positive concentrations");
                }
                Ok(())
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            LabelLaw::PointMass(p) => p.as_slice().to_vec(),
            LabelLaw::Categorical { atoms, probs } => {
                let mut m = vec![0.0; atoms[0].classes()];
                for (a, w) in atoms.iter().zip(probs) {
                    for (mi, v) in m.iter_mut().zip(a.as_slice()) {
                        *mi += w * v;
                    }
                }
                m
            }
            LabelLaw::Dirichlet { alpha } => {
                let a0: f64 = alpha.iter().sum();
                alpha.iter().map(|a| a / a0).collect()
            }
        }
    }

    /// `Tr(Σ)` in closed form.
    pub fn trace_cov(&self) -> f64 {
        match self {
            LabelLaw::PointMass(_) => 0.0,
            LabelLaw::Categorical { atoms, probs } => {
                let m = self.mean();
                atoms
                    .iter()
                    .zip(probs)
                    .map(|(a, w)| w * a.as_slice().iter().zip(&m).map(|(v, mi)| (v - mi).powi(2)).sum::<f64>())
                    .sum()
            }
            LabelLaw::Dirichlet { alpha } => {
                let a0: f64 = alpha.iter().sum();
                alpha.iter().map(|a| a * (a0 - a) / (a0 * a0 * (a0 + 1.0))).sum()
            }
        }
    }

    /// Draws one label vector into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            LabelLaw::PointMass(p) => out.copy_from_slice(p.as_slice()),
            LabelLaw::Categorical { atoms, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = atoms.len() - 1;
                for (i, w) in probs.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                out.copy_from_slice(atoms[pick].as_slice());
            }
            LabelLaw::Dirichlet { alpha } => {
                let mut total = 0.0;
                for (o, a) in out.iter_mut().zip(alpha) {
                    *o = Gamma::new(*a, 1.0).expect("validated concentration").sample(rng);
                    total += *o;
                }
                for o in out.iter_mut() {
                    *o /= total;
                }
            }
        }
    }

    fn classes(&self) -> usize {
        match self {
            LabelLaw::PointMass(p) => p.classes(),
            LabelLaw::Categorical { atoms, .. } => atoms[0].classes(),
            LabelLaw::Dirichlet { alpha } => alpha.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Check {
    pub s: usize,
    pub empirical: f64,
    pub predicted: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// Relative error, defined as zero when both sides vanish.
pub fn rel_error(empirical: f64, predicted: f64) -> f64 {
    if predicted == 0.0 {
        if empirical == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (empirical - predicted).abs() / predicted.abs()
    }
}

/// `E‖p̂_s − p̄‖²` against `Tr(Σ)/s`, with `tol` as relative tolerance.
pub fn verify_lemma1_mc(law: &LabelLaw, s_list: &[usize], trials: usize, tol: f64, seed: u64) -> Result<Vec<Lemma1Check>> {
    law.validate()?;
    check_trials(trials)?;
    let mean = law.mean();
    let c = law.classes();
    let trace = law.trace_cov();
    s_list
        .iter()
        .map(|&s| {
            if s == 0 {
                return invalid("sample size must be at least 1");
            }
            let empirical = mc_mean(seed, 0x200 + s as u64, trials, |rng| {
                let mut acc = vec![0.0; c];
                let mut draw = vec![0.0; c];
                for _ in 0..s {
                    law.sample_into(rng, &mut draw);
                    for (a, d) in acc.iter_mut().zip(&draw) {
                        *a += d;
                    }
                }
                acc.iter().zip(&mean).map(|(a, m)| (a / s as f64 - m).powi(2)).sum()
            });
            let predicted = trace / s as f64;
            let err = rel_error(empirical, predicted);
            Ok(Lemma1Check { s, empirical, predicted, rel_error: err, pass: err <= tol })
        })
        .collect()
}

/// Quadratic ERM `ℓ(θ; x) = ½‖θ − x‖²` with `x ~ N(0, diag(Σ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadErmSpec {
    pub sigma_diag: Vec<f64>,
    pub s: usize,
    pub trials: usize,
}

impl QuadErmSpec {
    pub fn identity(d: usize, s: usize, trials: usize) -> Self {
        Self { sigma_diag: vec![1.0; d], s, trials }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm2Result {
    pub empirical: f64,
    pub predicted: f64,
    pub rel_error: f64,
}

/// Mean excess risk `½‖θ̂_s‖²` of the sample-mean estimator against
/// `tr(Σ)/(2s)`.
pub fn verify_thm2_quadratic(spec: &QuadErmSpec, seed: u64) -> Result<Thm2Result> {
    if spec.sigma_diag.is_empty() || spec.sigma_diag.iter().any(|v| !(*v >= 0.0)) {
        return invalid("covariance diagonal must be non-empty and non-negative");
    }
    if spec.s == 0 {
        return invalid("sample size must be at least 1");
    }
    check_trials(spec.trials)?;
    let sd: Vec<f64> = spec.sigma_diag.iter().map(|v| v.sqrt()).collect();
    let s = spec.s;
    let empirical = mc_mean(seed, 0x300 + s as u64, spec.trials, |rng| {
        let mut theta = vec![0.0; sd.len()];
        for _ in 0..s {
            for (t, sdi) in theta.iter_mut().zip(&sd) {
                let z: f64 = StandardNormal.sample(rng);
                *t += sdi * z;
            }
        }
        0.5 * theta.iter().map(|t| (t / s as f64).powi(2)).sum::<f64>()
    });
    let predicted = spec.sigma_diag.iter().sum::<f64>() / (2.0 * s as f64);
    Ok(Thm2Result { empirical, predicted, rel_error: rel_error(empirical, predicted) })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_grads(g: &[Vec<f64>]) -> Result<usize> {
    let dim = g.first().map(Vec::len).ok_or_else(|| LabError::InvalidArgument("no class gradients".into()))?;
    for gc in g {
        check_len(dim, gc.len())?;
    }
    Ok(dim)
}

/// Largest pairwise distance `sup_{i≠j} ‖g_i − g_j‖`.
pub fn diameter(g: &[Vec<f64>]) -> Result<f64> {
    check_grads(g)?;
    let mut d: f64 = 0.0;
    for i in 0..g.len() {
        for j in i + 1..g.len() {
            d = d.max(norm(&g[i].iter().zip(&g[j]).map(|(a, b)| a - b).collect::<Vec<_>>()));
        }
    }
    Ok(d)
}

/// `Σ_c w_c g_c`.
pub fn combine(w: &[f64], g: &[Vec<f64>]) -> Result<Vec<f64>> {
    let dim = check_grads(g)?;
    check_len(g.len(), w.len())?;
    let mut out = vec![0.0; dim];
    for (wc, gc) in w.iter().zip(g) {
        for (o, v) in out.iter_mut().zip(gc) {
            *o += wc * v;
        }
    }
    Ok(out)
}

/// Both sides of `‖Σ (p_c − q_c) g_c‖ ≤ (D/2) ‖p − q‖₁`.
pub fn mixing_bound_check(p: &ProbVector, q: &ProbVector, g: &[Vec<f64>]) -> Result<(f64, f64)> {
    check_len(p.classes(), q.classes())?;
    check_len(p.classes(), g.len())?;
    let diff: Vec<f64> = p.as_slice().iter().zip(q.as_slice()).map(|(a, b)| a - b).collect();
    let lhs = norm(&combine(&diff, g)?);
    let l1: f64 = diff.iter().map(|d| d.abs()).sum();
    Ok((lhs, diameter(g)? / 2.0 * l1))
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, c: usize) -> ProbVector {
    // Exponential spacings give a uniform point; occasional sparsity probes edges.
    let mut v: Vec<f64> = (0..c).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    if rng.random::<f64>() < 0.2 {
        let k = rng.random_range(0..c);
        v.iter_mut().enumerate().filter(|(i, _)| *i != k).for_each(|(_, x)| *x *= 1e-3);
    }
    ProbVector::new(v).expect("positive weights")
}

fn random_grads<R: Rng + ?Sized>(rng: &mut R, c: usize, dim: usize) -> Vec<Vec<f64>> {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    (0..c)
        .map(|_| (0..dim).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingAudit {
    pub instances: usize,
    pub violations: usize,
    /// Largest observed `lhs / rhs`.
    pub max_ratio: f64,
}

/// Randomized audit of the mixing bound over class counts 2–8 and
/// gradient dimensions 1–16.
pub fn mixing_audit(instances: usize, seed: u64) -> Result<MixingAudit> {
    let rows: Vec<(bool, f64)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, 0x400, i);
            let c = rng.random_range(2..=8);
            let dim = rng.random_range(1..=16);
            let g = random_grads(&mut rng, c, dim);
            let p = random_simplex(&mut rng, c);
            let q = random_simplex(&mut rng, c);
            let (lhs, rhs) = mixing_bound_check(&p, &q, &g)?;
            Ok((lhs > rhs + 1e-12 * rhs.max(1.0), if rhs > 0.0 { lhs / rhs } else { 0.0 }))
        })
        .collect::<Result<_>>()?;
    Ok(MixingAudit {
        instances,
        violations: rows.iter().filter(|r| r.0).count(),
        max_ratio: rows.iter().map(|r| r.1).fold(0.0, f64::max),
    })
}

/// Class gradients plus the smoothing rate of the hard target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignSpec {
    pub grads: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Hard label; `None` uses the teacher's top class on each crop.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm3Result {
    pub empirical_mean_cosine: f64,
    pub bound: f64,
    pub diameter: f64,
    pub m0: f64,
    pub h_teacher: f64,
    pub c_align: f64,
    pub holds: bool,
    /// The bound is below −1 and says nothing.
    pub vacuous: bool,
}

/// Mean cosine between the soft gradient `−Σ p̃_c g_c` and the hard gradient
/// `−Σ LS_α(y)_c g_c` over `crops`, against `1 − (D/m₀)·C_align` where
/// `C_align = 2 E[H(p̃)] + 2α(1 − 1/C)` and `m₀` is the smallest aggregate
/// gradient norm seen.
pub fn verify_thm3(spec: &AlignSpec, crops: &[ProbVector]) -> Result<Thm3Result> {
    check_grads(&spec.grads)?;
    if crops.is_empty() {
        return invalid("need at least one crop distribution");
    }
    let c = spec.grads.len();
    let d = diameter(&spec.grads)?;
    let mut m0 = f64::INFINITY;
    let mut cos_sum = 0.0;
    let mut h_sum = 0.0;
    for p in crops {
        check_len(c, p.classes())?;
        let y = spec.label.unwrap_or_else(|| p.argmax());
        let hard_target = label_smooth(y, spec.alpha, c)?;
        let soft: Vec<f64> = combine(p.as_slice(), &spec.grads)?.iter().map(|v| -v).collect();
        let hard: Vec<f64> = combine(hard_target.as_slice(), &spec.grads)?.iter().map(|v| -v).collect();
        m0 = m0.min(norm(&soft)).min(norm(&hard));
        cos_sum += cosine(&soft, &hard)?.value;
        h_sum += entropy(p);
    }
    if !(m0 > 0.0) {
        return invalid("an aggregate gradient vanished (m0 = 0)");
    }
    let n = crops.len() as f64;
    let h_teacher = h_sum / n;
    let c_align = 2.0 * h_teacher + 2.0 * spec.alpha * (1.0 - 1.0 / c as f64);
    let bound = 1.0 - d / m0 * c_align;
    let empirical = cos_sum / n;
    Ok(Thm3Result {
        empirical_mean_cosine: empirical,
        bound,
        diameter: d,
        m0,
        h_teacher,
        c_align,
        holds: empirical >= bound - 1e-12,
        vacuous: bound < -1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thm3Audit {
    pub instances: usize,
    pub violations: usize,
    pub non_vacuous: usize,
    pub min_slack: f64,
}

/// Random alignment instances: class gradients clustered around a common
/// direction so that the bound is informative for confident teachers, and
/// per-crop teacher distributions sharpened to varying degrees.
pub fn thm3_audit(instances: usize, crops_per_instance: usize, seed: u64) -> Result<Thm3Audit> {
    let rows: Vec<Thm3Result> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, 0x500, i);
            let c = rng.random_range(2..=6);
            let dim = rng.random_range(2..=12);
            let base: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let spread = 10f64.powf(rng.random_range(-3.0..0.5));
            let grads: Vec<Vec<f64>> = (0..c)
                .map(|_| base.iter().map(|b| b + spread * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
                .collect();
            let sharp = 10f64.powf(rng.random_range(0.0..3.0));
            let crops: Vec<ProbVector> = (0..crops_per_instance)
                .map(|_| {
                    let logits: Vec<f64> = (0..c).map(|_| sharp * rng.random::<f64>()).collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    ProbVector::new(logits.iter().map(|l| (l - mx).exp()).collect()).expect("positive")
                })
                .collect();
            let alpha = rng.random_range(0.0..0.5);
            verify_thm3(&AlignSpec { grads, alpha, label: None }, &crops)
        })
        .collect::<Result<_>>()?;
    Ok(Thm3Audit {
        instances,
        violations: rows.iter().filter(|r| !r.holds).count(),
        non_vacuous: rows.iter().filter(|r| !r.vacuous).count(),
        min_slack: rows.iter().map(|r| r.empirical_mean_cosine - r.bound).fold(f64::INFINITY, f64::min),
    })
}

/// Pairs of unit vectors with a prescribed mean cosine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrPairSpec {
    pub rho: f64,
    pub dim: usize,
    pub s: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cor1Result {
    pub beta: f64,
    pub residual: f64,
    pub predicted: f64,
    /// `1 / residual`, the factor by which the control variate stretches `s`.
    pub s_eff_ratio: f64,
    pub s_eff: f64,
}

/// Fixed `v = e₁`; each trial rotates it by `arccos ρ` inside a uniformly
/// random plane through `v`. The least-squares `β` and the residual second
/// moment `E‖u − βv‖²` are compared against `ρ` and `1 − ρ²`.
pub fn verify_cor1(spec: &CorrPairSpec, seed: u64) -> Result<Cor1Result> {
    if !(spec.rho > 0.0 && spec.rho < 1.0) {
        return invalid(format!("target cosine must lie in (0, 1), got {}", spec.rho));
    }
    if spec.dim < 2 {
        return invalid("need at least two dimensions");
    }
    check_trials(spec.trials)?;
    let rho = spec.rho;
    let dim = spec.dim;
    let pair = |rng: &mut ChaCha8Rng| {
        // Direction orthogonal to e₁, uniform on the remaining sphere.
        let w: Vec<f64> = (0..dim - 1).map(|_| StandardNormal.sample(rng)).collect();
        let wn = norm(&w);
        let mut u = Vec::with_capacity(dim);
        u.push(rho);
        let sin = (1.0 - rho * rho).sqrt();
        u.extend(w.iter().map(|x| sin * x / wn));
        u
    };
    // ⟨u, v⟩ is the first coordinate since v = e₁ and ‖v‖ = 1.
    let uv = mc_sum(seed, 0x600, spec.trials, |rng| pair(rng)[0]);
    let beta = uv / spec.trials as f64;
    let residual = mc_mean(seed, 0x600, spec.trials, |rng| {
        let mut u = pair(rng);
        u[0] -= beta;
        u.iter().map(|x| x * x).sum()
    });
    let s_eff_ratio = 1.0 / residual;
    Ok(Cor1Result { beta, residual, predicted: 1.0 - rho * rho, s_eff_ratio, s_eff: spec.s as f64 * s_eff_ratio })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failing(&self) -> impl Iterator<Item = &CheckRecord> {
        self.checks.iter().filter(|c| !c.pass)
    }

    fn push(&mut self, name: String, empirical: f64, theoretical: f64, tolerance: f64, pass: bool) {
        self.checks.push(CheckRecord { name, empirical, theoretical, tolerance, pass });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selector {
    All,
    Lemma1,
    Thm1,
    Thm2,
    Thm3,
    Cor1,
}

impl std::str::FromStr for Selector {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Selector::All,
            "lemma1" => Selector::Lemma1,
            "thm1" => Selector::Thm1,
            "thm2" => Selector::Thm2,
            "thm3" => Selector::Thm3,
            "cor1" => Selector::Cor1,
            _ => return invalid(format!("unknown selector {s:?}")),
        })
    }
}

/// Trial counts used by [`run_verification`].
pub const LEMMA1_TRIALS: usize = 100_000;
pub const THM1_TRIALS: usize = 100_000;
pub const THM2_TRIALS: usize = 100_000;
pub const MIXING_INSTANCES: usize = 10_000;
pub const THM3_INSTANCES: usize = 1_000;
pub const COR1_TRIALS: usize = 100_000;

pub const S_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Two-point label law `0.9 e₁ + 0.1 e₂` over two classes.
pub fn two_point_label_law() -> LabelLaw {
    LabelLaw::Categorical {
        atoms: vec![ProbVector::one_hot(0, 2).expect("valid"), ProbVector::one_hot(1, 2).expect("valid")],
        probs: vec![0.9, 0.1],
    }
}

pub fn run_lemma1(report: &mut VerificationReport, seed: u64) -> Result<()> {
    let laws = [("two_point", two_point_label_law()), ("dirichlet111", LabelLaw::Dirichlet { alpha: vec![1.0; 3] })];
    for (name, law) in laws {
        for row in verify_lemma1_mc(&law, &S_GRID, LEMMA1_TRIALS, 0.05, seed)? {
            report.push(format!("lemma1/{name}/s={}", row.s), row.empirical, row.predicted, 0.05, row.pass);
        }
    }
    Ok(())
}

pub fn run_thm1(report: &mut VerificationReport, seed: u64) -> Result<()> {
    let (theta, g) = pz_constant();
    let g_exact = 16.0 / (25.0 * 5f64.sqrt());
    report.push("pz/theta".into(), theta, 0.2, 1e-6, (theta - 0.2).abs() <= 1e-6);
    report.push("pz/g".into(), g, g_exact, 1e-6, (g - g_exact).abs() <= 1e-6);
    let s_list: Vec<usize> = (1..=64).collect();
    let gauss = LossDistSpec::gaussian(0.0, 1.0)?;
    let two = LossDistSpec::two_point(0.0, 1.0, 0.1)?;
    for (name, dist) in [("gaussian", &gauss), ("two_point", &two)] {
        for row in verify_thm1(dist, &s_list, THM1_TRIALS, seed)? {
            report.push(format!("thm1/{name}/s={}/bound", row.s), row.empirical, row.bound, 0.0, row.holds);
            if name == "gaussian" {
                let exact = (2.0 / (std::f64::consts::PI * row.s as f64)).sqrt();
                let err = rel_error(row.empirical, exact);
                report.push(format!("thm1/gaussian/s={}/mad", row.s), row.empirical, exact, 0.02, err <= 0.02);
            }
        }
    }
    Ok(())
}

pub fn run_thm2(report: &mut VerificationReport, seed: u64) -> Result<()> {
    for s in [10, 50, 200] {
        let r = verify_thm2_quadratic(&QuadErmSpec::identity(5, s, THM2_TRIALS), seed)?;
        report.push(format!("thm2/identity5/s={s}"), r.empirical, r.predicted, 0.03, r.rel_error <= 0.03);
    }
    Ok(())
}

pub fn run_thm3(report: &mut VerificationReport, seed: u64) -> Result<()> {
    let g = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
    let (lhs, rhs) = mixing_bound_check(&ProbVector::one_hot(0, 2)?, &ProbVector::one_hot(1, 2)?, &g)?;
    report.push("mixing/witness".into(), lhs, rhs, 1e-12, (lhs - rhs).abs() <= 1e-12);
    let audit = mixing_audit(MIXING_INSTANCES, seed)?;
    report.push("mixing/random".into(), audit.violations as f64, 0.0, 0.0, audit.violations == 0);
    let audit = thm3_audit(THM3_INSTANCES, 16, seed)?;
    report.push("thm3/random".into(), audit.violations as f64, 0.0, 0.0, audit.violations == 0);
    Ok(())
}

pub fn run_cor1(report: &mut VerificationReport, seed: u64) -> Result<()> {
    for rho in [0.2, 0.6, 0.9] {
        let r = verify_cor1(&CorrPairSpec { rho, dim: 16, s: 1, trials: COR1_TRIALS }, seed)?;
        let tol = 0.05;
        report.push(format!("cor1/rho={rho}/residual"), r.residual, r.predicted, tol, rel_error(r.residual, r.predicted) <= tol);
        let ratio = 1.0 / (1.0 - rho * rho);
        report.push(format!("cor1/rho={rho}/s_eff_ratio"), r.s_eff_ratio, ratio, tol, rel_error(r.s_eff_ratio, ratio) <= tol);
        report.push(format!("cor1/rho={rho}/beta"), r.beta, rho, 0.02, rel_error(r.beta, rho) <= 0.02);
    }
    Ok(())
}

/// Runs the selected checks at the documented trial counts.
pub fn run_verification(selector: Selector, seed: u64) -> Result<VerificationReport> {
    let mut report = VerificationReport { seed, checks: Vec::new() };
    let all = selector == Selector::All;
    if all || selector == Selector::Lemma1 {
        run_lemma1(&mut report, seed)?;
    }
    if all || selector == Selector::Thm1 {
        run_thm1(&mut report, seed)?;
    }
    if all || selector == Selector::Thm2 {
        run_thm2(&mut report, seed)?;
    }
    if all || selector == Selector::Thm3 {
        run_thm3(&mut report, seed)?;
    }
    if all || selector == Selector::Cor1 {
        run_cor1(&mut report, seed)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pz_examples() {
        let (t, g) = pz_constant();
        assert!((t - 0.2).abs() < 1e-6, "{t}");
        assert!((g - 16.0 / (25.0 * 5f64.sqrt())).abs() < 1e-6);
        assert!((g - 0.2862167).abs() < 1e-6);
        assert_eq!(pz_g(0.0), 0.0);
        assert_eq!(pz_g(1.0), 0.0);
    }

    #[test]
    fn thm1_bound_examples() {
        assert_eq!(thm1_bound(0.0, 3.0, 5).unwrap(), 0.0);
        assert!((thm1_bound(1.0, 3.0, 4).unwrap() - 0.047703).abs() < 1e-6);
        let a = thm1_bound(1.0, 2.0, 1).unwrap();
        let b = thm1_bound(1.0, 10.0, 1).unwrap();
        assert!((a / b - 10.0 / 3.0).abs() < 1e-12);
        assert!(thm1_bound(-1.0, 3.0, 1).is_err());
        assert!(thm1_bound(1.0, 0.5, 1).is_err());
        assert!(thm1_bound(1.0, 3.0, 0).is_err());
    }

    #[test]
    fn two_point_moments() {
        let d = LossDistSpec::two_point(0.0, 1.0, 0.1).unwrap();
        assert!((d.mean - 0.1).abs() < 1e-15);
        assert!((d.std.powi(2) - 0.09).abs() < 1e-15);
        let kappa = (0.9 * 0.1f64.powi(4) + 0.1 * 0.9f64.powi(4)) / 0.09f64.powi(2);
        assert!((d.kurtosis - kappa).abs() < 1e-12);
        assert!((d.kurtosis - 8.111).abs() < 1e-3);
    }

    #[test]
    fn thm1_examples() {
        let g = LossDistSpec::gaussian(0.0, 1.0).unwrap();
        let r = verify_thm1(&g, &[4], 20_000, 1).unwrap()[0];
        assert!((r.empirical - (2.0 / (std::f64::consts::PI * 4.0)).sqrt()).abs() < 0.01);
        assert!(r.holds);
        let point = LossDistSpec::gaussian(2.0, 0.0).unwrap();
        let r = verify_thm1(&point, &[3], 100, 1).unwrap()[0];
        assert_eq!((r.empirical, r.bound, r.slack), (0.0, 0.0, 0.0));
        let two = LossDistSpec::two_point(0.0, 1.0, 0.1).unwrap();
        let r = verify_thm1(&two, &[1], 50_000, 2).unwrap()[0];
        // E|X − 0.1| = 0.9·0.1 + 0.1·0.9.
        assert!((r.empirical - 0.18).abs() < 0.005, "{}", r.empirical);
        assert!((r.bound - 0.3 * 0.2862167 / 8.1111).abs() < 1e-4);
    }

    #[test]
    fn lemma1_examples() {
        let point = LabelLaw::PointMass(ProbVector::new(vec![0.2, 0.8]).unwrap());
        for row in verify_lemma1_mc(&point, &[1, 5], 100, 0.05, 0).unwrap() {
            assert_eq!((row.empirical, row.predicted), (0.0, 0.0));
            assert!(row.pass);
        }
        let two = two_point_label_law();
        assert!((two.trace_cov() - 0.18).abs() < 1e-15);
        let row = verify_lemma1_mc(&two, &[10], 100_000, 0.05, 3).unwrap()[0];
        assert!((row.predicted - 0.018).abs() < 1e-15);
        assert!(row.pass, "{row:?}");
        let dir = LabelLaw::Dirichlet { alpha: vec![1.0; 3] };
        // Var of one coordinate: α(α₀ − α)/(α₀²(α₀ + 1)) = 2/36.
        assert!((dir.trace_cov() - 3.0 * 2.0 / 36.0).abs() < 1e-15);
        let row = verify_lemma1_mc(&dir, &[4], 100_000, 0.05, 4).unwrap()[0];
        assert!((row.predicted - 1.0 / 24.0).abs() < 1e-15);
        assert!(row.pass, "{row:?}");
    }

    #[test]
    fn thm2_examples() {
        let zero = QuadErmSpec { sigma_diag: vec![0.0; 3], s: 5, trials: 100 };
        assert_eq!(verify_thm2_quadratic(&zero, 0).unwrap().empirical, 0.0);
        let a = verify_thm2_quadratic(&QuadErmSpec::identity(5, 50, 100_000), 1).unwrap();
        assert!((a.predicted - 0.05).abs() < 1e-15);
        assert!(a.rel_error < 0.03, "{a:?}");
        let b = verify_thm2_quadratic(&QuadErmSpec::identity(5, 100, 100_000), 2).unwrap();
        assert!((a.empirical / b.empirical - 2.0).abs() < 0.1);
        let mixed = QuadErmSpec { sigma_diag: vec![0.1, 0.5, 1.0, 2.0], s: 20, trials: 100_000 };
        assert!(verify_thm2_quadratic(&mixed, 3).unwrap().rel_error < 0.03);
    }

    #[test]
    fn mixing_examples() {
        let g = vec![vec![1.0, 2.0, 0.5], vec![-0.3, 0.1, 4.0], vec![0.0, 0.0, 1.0]];
        let p = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(mixing_bound_check(&p, &p, &g).unwrap().0, 0.0);
        let w = vec![vec![3.0, 4.0], vec![0.0, 0.0]];
        let (lhs, rhs) =
            mixing_bound_check(&ProbVector::one_hot(0, 2).unwrap(), &ProbVector::one_hot(1, 2).unwrap(), &w).unwrap();
        assert!((lhs - 5.0).abs() < 1e-12 && (rhs - 5.0).abs() < 1e-12);
        let audit = mixing_audit(100, 5).unwrap();
        assert_eq!(audit.violations, 0);
        assert!(audit.max_ratio <= 1.0 + 1e-12);
        let bad = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(mixing_bound_check(&ProbVector::uniform(2).unwrap(), &ProbVector::uniform(2).unwrap(), &bad).is_err());
    }

    #[test]
    fn thm3_examples() {
        let g = vec![vec![1.0, 0.2, 0.0], vec![0.3, 1.0, 0.1], vec![0.0, 0.4, 1.0]];
        let one_hot = verify_thm3(&AlignSpec { grads: g.clone(), alpha: 0.0, label: Some(1) }, &[ProbVector::one_hot(1, 3).unwrap()])
            .unwrap();
        assert!((one_hot.empirical_mean_cosine - 1.0).abs() < 1e-12);
        let sharp = ProbVector::new(vec![0.0005, 0.999, 0.0005]).unwrap();
        let near = verify_thm3(&AlignSpec { grads: g, alpha: 0.0, label: None }, &[sharp]).unwrap();
        assert!(near.empirical_mean_cosine > 0.999 && near.holds);
        assert!(near.h_teacher < 0.01);

        // Two orthogonal unit gradients, teacher (0.7, 0.3), α = 0.2.
        let g2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = verify_thm3(&AlignSpec { grads: g2, alpha: 0.2, label: Some(0) }, &[ProbVector::new(vec![0.7, 0.3]).unwrap()])
            .unwrap();
        let soft = [0.7f64, 0.3];
        let hard = [0.9f64, 0.1];
        let cos = (soft[0] * hard[0] + soft[1] * hard[1]) / (soft[0].hypot(soft[1]) * hard[0].hypot(hard[1]));
        assert!((r.empirical_mean_cosine - cos).abs() < 1e-12);
        let h = -(0.7f64 * 0.7f64.ln() + 0.3 * 0.3f64.ln());
        let m0 = 0.7f64.hypot(0.3);
        let bound = 1.0 - 2f64.sqrt() / m0 * (2.0 * h + 2.0 * 0.2 * 0.5);
        assert!((r.bound - bound).abs() < 1e-12);
        assert!(r.holds && r.vacuous);
    }

    #[test]
    fn thm3_rejects_vanishing_gradients() {
        let g = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let spec = AlignSpec { grads: g, alpha: 0.0, label: Some(0) };
        assert!(verify_thm3(&spec, &[ProbVector::uniform(2).unwrap()]).is_err());
    }

    #[test]
    fn thm3_audit_small() {
        let a = thm3_audit(200, 8, 9).unwrap();
        assert_eq!(a.violations, 0);
        assert!(a.non_vacuous > 0);
    }

    #[test]
    fn cor1_examples() {
        let r = verify_cor1(&CorrPairSpec { rho: 0.6, dim: 8, s: 10, trials: 10_000 }, 0).unwrap();
        assert!((r.residual - 0.64).abs() < 0.05 * 0.64);
        assert!((r.s_eff_ratio - 1.5625).abs() < 0.05 * 1.5625);
        assert!((r.beta - 0.6).abs() < 0.02 * 0.6);
        let r = verify_cor1(&CorrPairSpec { rho: 0.999, dim: 4, s: 1, trials: 1000 }, 0).unwrap();
        assert!((r.residual - 0.001999).abs() < 1e-4);
        assert!((r.s_eff_ratio - 500.25).abs() < 5.0);
        let r = verify_cor1(&CorrPairSpec { rho: 0.01, dim: 4, s: 1, trials: 1000 }, 0).unwrap();
        assert!((r.s_eff_ratio - 1.0001).abs() < 1e-3);
        for rho in [0.0, 1.0, -0.5] {
            assert!(verify_cor1(&CorrPairSpec { rho, dim: 4, s: 1, trials: 10 }, 0).is_err());
        }
    }

    #[test]
    fn totals_do_not_depend_on_worker_count() {
        let f = |rng: &mut ChaCha8Rng| rng.random::<f64>() * 3.0 - 1.0;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mc_sum(42, 7, 10_000, f))
        };
        let one = run(1);
        assert_eq!(one.to_bits(), run(3).to_bits());
        assert_eq!(one.to_bits(), run(8).to_bits());
    }

    #[test]
    fn selector_parses() {
        assert_eq!("cor1".parse::<Selector>().unwrap(), Selector::Cor1);
        assert!("thm9".parse::<Selector>().is_err());
    }

    #[test]
    fn cor1_report_passes() {
        let r = run_verification(Selector::Cor1, 0).unwrap();
        assert!(r.all_pass());
        assert_eq!(r.checks.len(), 9);
        let json = serde_json::to_string(&r).unwrap();
        let back: VerificationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
