//! Training schedules and trainers.
//!
//! The soft–hard–soft run trains on the stored pool (stage A), calibrates on
//! hard labels with CutMix and label smoothing over freshly drawn crops
//! (stage B), then returns to the pool (stage C). Baselines reuse the same
//! epoch routines so that matched seeds give matched trajectories: the soft
//! branch, the hard branch, and the gradient probe each own a separate rng
//! stream.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_crop, cutmix_images, sample_crop, AugConfig, Image};
use crate::error::{invalid, LabError, Result};
use crate::simplex::{cosine_sim, cutmix_target, kl_slice, label_smooth, softmax_slice, ProbVector};
use crate::softlabel::{batch_for, sample_batch, teacher_probs, SoftLabelPool};
use crate::synthdata::{accuracy_on, Dataset};
use crate::tinynet::{backward, flat_grad, forward, init_net, opt_step, Batch, OptimizerKind, OptimizerState, Supervision, TinyNetParams};

/// Epoch allocation of a soft–hard–soft run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub t_a: usize,
    pub t_b: usize,
    pub t_c: usize,
    pub n_soft: usize,
    pub n_hard: usize,
    pub n_total: usize,
}

impl Schedule {
    /// True when no hard phase fits into the budget.
    pub fn is_soft_only(&self) -> bool {
        self.t_b == 0
    }

    pub fn stages(&self) -> Vec<(StageKind, usize)> {
        vec![(StageKind::Soft, self.t_a), (StageKind::Hard, self.t_b), (StageKind::Soft, self.t_c)]
    }
}

/// `n_hard = max(n_total − n_soft, 0)`; the soft budget is split in half
/// around the hard phase, or spent entirely when no hard phase fits.
pub fn compute_schedule(n_total: usize, n_soft: usize) -> Schedule {
    let n_hard = n_total.saturating_sub(n_soft);
    if n_total <= n_soft {
        return Schedule { t_a: n_total, t_b: 0, t_c: 0, n_soft, n_hard, n_total };
    }
    let t_a = n_soft / 2;
    Schedule { t_a, t_b: n_hard, t_c: n_soft - t_a, n_soft, n_hard, n_total }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Soft,
    Hard,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Soft => "soft",
            StageKind::Hard => "hard",
        })
    }
}

impl FromStr for StageKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" | "s" | "S" => Ok(StageKind::Soft),
            "hard" | "h" | "H" => Ok(StageKind::Hard),
            _ => invalid(format!("unknown stage kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Vec<usize>,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Label-smoothing rate of the hard phase.
    pub alpha: f64,
    /// `λ ~ Beta(β, β)` for CutMix.
    pub cutmix_beta: f64,
    /// Student-side temperature under soft supervision.
    pub tau: f64,
    pub strong: AugConfig,
    pub seed: u64,
    /// Size of the fixed gradient-cosine probe batch.
    pub probe_size: usize,
}

impl TrainConfig {
    pub fn new(arch: Vec<usize>, out_side: usize) -> Self {
        Self {
            arch,
            batch_size: 64,
            steps_per_epoch: 16,
            optimizer: OptimizerKind::adam(),
            lr: 1e-3,
            weight_decay: 0.0,
            alpha: 0.8,
            cutmix_beta: 1.0,
            tau: 1.0,
            strong: AugConfig::strong(out_side),
            seed: 0,
            probe_size: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return invalid(format!("smoothing rate {} outside [0, 1]", self.alpha));
        }
        if !(self.tau > 0.0) {
            return invalid("temperature must be positive");
        }
        if !(self.lr >= 0.0) {
            return invalid("learning rate must be non-negative");
        }
        self.strong.validate()
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

const SOFT_STREAM: u64 = 1;
const HARD_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;
const COVERAGE_STREAM: u64 = 4;

/// Parameters plus optimizer state, advanced together.
#[derive(Debug, Clone)]
pub struct Student {
    pub params: TinyNetParams,
    pub opt: OptimizerState,
}

impl Student {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        let params = init_net(&config.arch, config.seed)?;
        let opt = OptimizerState::new(config.optimizer, config.lr, config.weight_decay, &params);
        Ok(Self { params, opt })
    }

    fn apply(&mut self, grads: &TinyNetParams) -> Result<()> {
        self.params = opt_step(&self.params, grads, &mut self.opt)?;
        Ok(())
    }
}

fn finite_loss(loss: f64, stage: &str, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(LabError::Diverged(format!("{stage} loss non-finite at step {step}")))
    }
}

/// One stage-A/C epoch: minibatches drawn with replacement from the pool,
/// KL against the stored labels.
pub fn stage_soft_epoch<R: Rng + ?Sized>(
    student: &mut Student,
    pool: &SoftLabelPool,
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    if pool.is_empty() {
        return invalid("soft stage needs a non-empty pool");
    }
    let mut total = 0.0;
    for step in 0..config.steps_per_epoch {
        let b = sample_batch(pool, train, rng, config.batch_size)?;
        let lg = backward(&student.params, &b.inputs, Supervision::Soft { targets: &b.targets, tau: config.tau })?;
        total += finite_loss(lg.loss, "soft", step)?;
        student.apply(&lg.grads)?;
    }
    Ok(total / config.steps_per_epoch.max(1) as f64)
}

/// A freshly drawn calibration batch: image pairs, strong crops, CutMix,
/// and smoothed mixed targets.
pub fn draw_hard_batch<R: Rng + ?Sized>(train: &Dataset, config: &TrainConfig, rng: &mut R) -> Result<(Batch, Vec<ProbVector>)> {
    if train.len() < 2 {
        return invalid("hard stage needs at least two images");
    }
    let mut rows = Vec::with_capacity(config.batch_size);
    let mut targets = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let a = &train.images[rng.random_range(0..train.len())];
        let b = &train.images[rng.random_range(0..train.len())];
        let (_, xa) = sample_crop(&a.image, &config.strong, rng)?;
        let (_, xb) = sample_crop(&b.image, &config.strong, rng)?;
        let (mixed, draw) = cutmix_images(&xa, &xb, config.cutmix_beta, rng)?;
        rows.push(mixed.to_input());
        targets.push(cutmix_target(a.label, b.label, draw.lam_effective, config.alpha, train.classes)?);
    }
    Ok((Batch::from_rows(&rows)?, targets))
}

/// One stage-B epoch of cross-entropy against CutMix / smoothed targets.
pub fn stage_hard_epoch<R: Rng + ?Sized>(
    student: &mut Student,
    train: &Dataset,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for step in 0..config.steps_per_epoch {
        let (batch, targets) = draw_hard_batch(train, config, rng)?;
        let lg = backward(&student.params, &batch, Supervision::Hard { targets: &targets })?;
        total += finite_loss(lg.loss, "hard", step)?;
        student.apply(&lg.grads)?;
    }
    Ok(total / config.steps_per_epoch.max(1) as f64)
}

/// Fixed batch of pool crops carrying both their stored soft labels and the
/// smoothed hard labels of their source images.
#[derive(Debug, Clone)]
pub struct GradProbe {
    pub inputs: Batch,
    pub soft: Vec<ProbVector>,
    pub hard: Vec<ProbVector>,
}

impl GradProbe {
    pub fn build(pool: &SoftLabelPool, train: &Dataset, config: &TrainConfig) -> Result<Self> {
        let mut rng = config.stream(PROBE_STREAM);
        let indices: Vec<usize> = (0..config.probe_size).map(|_| rng.random_range(0..pool.len())).collect();
        let hard = indices
            .iter()
            .map(|&i| label_smooth(train.images[pool.entries[i].image_id as usize].label, config.alpha, train.classes))
            .collect::<Result<_>>()?;
        let b = batch_for(pool, train, indices)?;
        Ok(Self { inputs: b.inputs, soft: b.targets, hard })
    }

    /// Cosine between the soft-label and hard-label loss gradients.
    pub fn cosine(&self, params: &TinyNetParams, tau: f64) -> Result<f64> {
        let gs = flat_grad(params, &self.inputs, Supervision::Soft { targets: &self.soft, tau })?;
        let gh = flat_grad(params, &self.inputs, Supervision::Hard { targets: &self.hard })?;
        cosine_sim(&gs, &gh)
    }
}

/// Test images pre-rendered at the weak view.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub views: Vec<Image>,
}

impl EvalSet {
    pub fn weak_views(test: &Dataset, out_side: usize) -> Result<Self> {
        let weak = AugConfig::weak(out_side);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let views: Vec<Image> = test
            .images
            .iter()
            .map(|im| sample_crop(&im.image, &weak, &mut rng).map(|(_, v)| v))
            .collect::<Result<_>>()?;
        Ok(Self {
            inputs: views.iter().map(Image::to_input).collect(),
            labels: test.images.iter().map(|im| im.label).collect(),
            views,
        })
    }

    pub fn accuracy(&self, params: &TinyNetParams) -> Result<f64> {
        accuracy_on(params, &self.inputs, self.labels.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: StageKind,
    pub loss: f64,
    pub test_acc: Option<f64>,
    pub grad_cos: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage,loss,test_acc,grad_cos,seconds\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                r.epoch,
                r.stage,
                r.loss,
                opt(r.test_acc),
                opt(r.grad_cos),
                r.seconds
            ));
        }
        out
    }

    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.test_acc)
    }
}

/// Everything a trainer can touch. The teacher is deliberately absent.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub pool: &'a SoftLabelPool,
    pub train: &'a Dataset,
    pub eval: Option<&'a EvalSet>,
    /// Teacher-labelled crops held out of training for the gradient probe,
    /// with the dataset they index. Falls back to entries of `pool`.
    pub probe: Option<(&'a SoftLabelPool, &'a Dataset)>,
}

impl<'a> TrainData<'a> {
    pub fn new(pool: &'a SoftLabelPool, train: &'a Dataset) -> Self {
        Self { pool, train, eval: None, probe: None }
    }

    pub fn with_eval(mut self, eval: &'a EvalSet) -> Self {
        self.eval = Some(eval);
        self
    }

    pub fn with_probe(mut self, probe: &'a SoftLabelPool, images: &'a Dataset) -> Self {
        self.probe = Some((probe, images));
        self
    }

    fn grad_probe(&self, config: &TrainConfig) -> Result<GradProbe> {
        let (pool, images) = self.probe.unwrap_or((self.pool, self.train));
        GradProbe::build(pool, images, config)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TinyNetParams,
    pub log: RunLog,
    /// Parameters at the end of every stage, in order.
    pub stage_ends: Vec<TinyNetParams>,
}

impl TrainOutcome {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.log.final_test_acc()
    }
}

fn check_data(data: &TrainData<'_>, config: &TrainConfig) -> Result<()> {
    config.validate()?;
    if data.pool.classes != data.train.classes {
        return invalid(format!(
            "pool has {} classes, dataset has {}",
            data.pool.classes, data.train.classes
        ));
    }
    if data.pool.num_images != data.train.len() {
        return invalid("pool was generated for a different dataset");
    }
    if config.arch.last() != Some(&data.train.classes) {
        return invalid("student output size differs from class count");
    }
    Ok(())
}

struct Logger<'a> {
    log: RunLog,
    probe: GradProbe,
    eval: Option<&'a EvalSet>,
    tau: f64,
}

impl Logger<'_> {
    fn record(&mut self, stage: StageKind, loss: f64, params: &TinyNetParams, started: Instant) -> Result<()> {
        let test_acc = self.eval.map(|e| e.accuracy(params)).transpose()?;
        let grad_cos = Some(self.probe.cosine(params, self.tau)?);
        self.log.records.push(EpochRecord {
            epoch: self.log.records.len() + 1,
            stage,
            loss,
            test_acc,
            grad_cos,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    }
}

/// Runs an arbitrary sequence of stages, carrying parameters and optimizer
/// state across boundaries.
pub fn train_variant(order: &[(StageKind, usize)], data: TrainData<'_>, config: &TrainConfig) -> Result<TrainOutcome> {
    if order.is_empty() {
        return invalid("stage order must not be empty");
    }
    check_data(&data, config)?;
    let mut student = Student::init(config)?;
    let mut soft_rng = config.stream(SOFT_STREAM);
    let mut hard_rng = config.stream(HARD_STREAM);
    let mut logger = Logger { log: RunLog::default(), probe: data.grad_probe(config)?, eval: data.eval, tau: config.tau };
    let mut stage_ends = Vec::with_capacity(order.len());
    for &(kind, epochs) in order {
        for _ in 0..epochs {
            let started = Instant::now();
            let loss = match kind {
                StageKind::Soft => stage_soft_epoch(&mut student, data.pool, data.train, config, &mut soft_rng)?,
                StageKind::Hard => stage_hard_epoch(&mut student, data.train, config, &mut hard_rng)?,
            };
            logger.record(kind, loss, &student.params, started)?;
        }
        stage_ends.push(student.params.clone());
    }
    Ok(TrainOutcome { params: student.params, log: logger.log, stage_ends })
}

/// Soft pretraining, hard calibration, soft refinement.
pub fn train_hald(data: TrainData<'_>, schedule: &Schedule, config: &TrainConfig) -> Result<TrainOutcome> {
    if schedule.t_a + schedule.t_b + schedule.t_c != schedule.n_total {
        return invalid("schedule durations do not add up to n_total");
    }
    train_variant(&schedule.stages(), data, config)
}

pub fn train_soft_only(data: TrainData<'_>, n_total: usize, config: &TrainConfig) -> Result<TrainOutcome> {
    train_variant(&[(StageKind::Soft, n_total)], data, config)
}

/// Joint objective `L_soft + λ L_hard`, one update per step.
pub fn train_joint(data: TrainData<'_>, n_total: usize, lambda: f64, config: &TrainConfig) -> Result<TrainOutcome> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid(format!("joint weight must be non-negative, got {lambda}"));
    }
    check_data(&data, config)?;
    let mut student = Student::init(config)?;
    let mut soft_rng = config.stream(SOFT_STREAM);
    let mut hard_rng = config.stream(HARD_STREAM);
    let mut logger = Logger { log: RunLog::default(), probe: data.grad_probe(config)?, eval: data.eval, tau: config.tau };
    for _ in 0..n_total {
        let started = Instant::now();
        let mut total = 0.0;
        for step in 0..config.steps_per_epoch {
            let (loss, grads) = joint_step_grads(&student.params, data, config, lambda, &mut soft_rng, &mut hard_rng)?;
            total += finite_loss(loss, "joint", step)?;
            student.apply(&grads)?;
        }
        logger.record(StageKind::Soft, total / config.steps_per_epoch.max(1) as f64, &student.params, started)?;
    }
    let stage_ends = vec![student.params.clone()];
    Ok(TrainOutcome { params: student.params, log: logger.log, stage_ends })
}

/// Combined loss and gradient for one joint-objective step.
pub fn joint_step_grads<R: Rng + ?Sized>(
    params: &TinyNetParams,
    data: TrainData<'_>,
    config: &TrainConfig,
    lambda: f64,
    soft_rng: &mut R,
    hard_rng: &mut R,
) -> Result<(f64, TinyNetParams)> {
    let b = sample_batch(data.pool, data.train, soft_rng, config.batch_size)?;
    let soft = backward(params, &b.inputs, Supervision::Soft { targets: &b.targets, tau: config.tau })?;
    let (hb, ht) = draw_hard_batch(data.train, config, hard_rng)?;
    let hard = backward(params, &hb, Supervision::Hard { targets: &ht })?;
    let g: Vec<f64> = soft.grads.flatten().iter().zip(hard.grads.flatten()).map(|(s, h)| s + lambda * h).collect();
    Ok((soft.loss + lambda * hard.loss, params.unflatten(&g)?))
}

/// Student trained on fresh teacher labels for fresh crops at every step:
/// the unlimited-coverage reference that a finite pool approximates.
pub fn train_full_coverage(
    teacher: &TinyNetParams,
    train: &Dataset,
    n_total: usize,
    config: &TrainConfig,
    eval: Option<&EvalSet>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return invalid("reference training needs images");
    }
    let mut student = Student::init(config)?;
    let mut rng = config.stream(COVERAGE_STREAM);
    let mut log = RunLog::default();
    for epoch in 0..n_total {
        let started = Instant::now();
        let mut total = 0.0;
        for step in 0..config.steps_per_epoch {
            let mut views = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let im = &train.images[rng.random_range(0..train.len())];
                views.push(sample_crop(&im.image, &config.strong, &mut rng)?.1);
            }
            let targets = teacher_probs(teacher, &views, config.tau)?;
            let rows: Vec<Vec<f64>> = views.iter().map(Image::to_input).collect();
            let lg = backward(&student.params, &Batch::from_rows(&rows)?, Supervision::Soft { targets: &targets, tau: config.tau })?;
            total += finite_loss(lg.loss, "reference", step)?;
            student.apply(&lg.grads)?;
        }
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            stage: StageKind::Soft,
            loss: total / config.steps_per_epoch.max(1) as f64,
            test_acc: eval.map(|e| e.accuracy(&student.params)).transpose()?,
            grad_cos: None,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    let stage_ends = vec![student.params.clone()];
    Ok(TrainOutcome { params: student.params, log, stage_ends })
}

/// Mean KL between every stored label and the student's tempered prediction
/// on the matching crop.
pub fn pool_loss(params: &TinyNetParams, pool: &SoftLabelPool, train: &Dataset, tau: f64) -> Result<f64> {
    let mut total = 0.0;
    for chunk in (0..pool.len()).collect::<Vec<_>>().chunks(256) {
        let mut rows = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let e = &pool.entries[i];
            let im = train.images.get(e.image_id as usize).ok_or(LabError::MissingImage(e.image_id))?;
            rows.push(apply_crop(&im.image, &e.crop)?.to_input());
        }
        let pass = forward(params, &Batch::from_rows(&rows)?)?;
        for (r, &i) in chunk.iter().enumerate() {
            total += kl_slice(pool.entries[i].label.as_slice(), &softmax_slice(pass.row_logits(r), tau));
        }
    }
    Ok(total / pool.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftEstimate {
    pub epochs: usize,
    pub converged: bool,
}

/// Soft-only training until the best full-pool loss stops improving by more
/// than `tol` for `patience` consecutive epochs. Returns the epoch of the
/// last improvement, or `max_epochs` (unconverged) when the budget runs out.
pub fn estimate_n_soft(
    pool: &SoftLabelPool,
    train: &Dataset,
    config: &TrainConfig,
    patience: usize,
    tol: f64,
    max_epochs: usize,
) -> Result<SoftEstimate> {
    check_data(&TrainData::new(pool, train), config)?;
    let mut student = Student::init(config)?;
    let mut rng = config.stream(SOFT_STREAM);
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    for epoch in 1..=max_epochs {
        stage_soft_epoch(&mut student, pool, train, config, &mut rng)?;
        let loss = pool_loss(&student.params, pool, train, config.tau)?;
        if loss < best - tol {
            best = loss;
            best_epoch = epoch;
        } else if best_epoch == 0 {
            best_epoch = epoch;
        }
        if epoch - best_epoch >= patience {
            return Ok(SoftEstimate { epochs: best_epoch, converged: true });
        }
    }
    Ok(SoftEstimate { epochs: max_epochs, converged: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugConfig;
    use crate::diagnostics::mean_crop_consistency;
    use crate::softlabel::generate_pool;
    use crate::synthdata::{gen_dataset, train_teacher, SynthConfig};

    struct Fixture {
        train: Dataset,
        test: EvalSet,
        pool: SoftLabelPool,
        teacher: TinyNetParams,
        config: TrainConfig,
    }

    fn fixture() -> Fixture {
        let cfg = SynthConfig { classes: 4, image_side: 16, glyph_side: 6, n_train: 15, n_test: 5, distractor_count: 1, noise_std: 0.05, seed: 4 };
        let (train, test) = gen_dataset(&cfg).unwrap();
        let teacher = train_teacher(&train, &[64, 16, 4], 20, 3e-3, 1).unwrap().params;
        let mut config = TrainConfig::new(vec![64, 16, 4], 8);
        config.batch_size = 16;
        config.steps_per_epoch = 4;
        config.probe_size = 8;
        let pool = generate_pool(&teacher, &train, 2, &config.strong, config.tau, 16, 7).unwrap();
        let test = EvalSet::weak_views(&test, 8).unwrap();
        Fixture { train, test, pool, teacher, config }
    }

    fn data(f: &Fixture) -> TrainData<'_> {
        TrainData::new(&f.pool, &f.train).with_eval(&f.test)
    }

    #[test]
    fn schedule_examples() {
        let s = compute_schedule(300, 150);
        assert_eq!((s.t_a, s.t_b, s.t_c), (75, 150, 75));
        let s = compute_schedule(300, 200);
        assert_eq!((s.t_a, s.t_b, s.t_c), (100, 100, 100));
        let s = compute_schedule(100, 200);
        assert_eq!((s.t_a, s.t_b, s.t_c), (100, 0, 0));
        assert!(s.is_soft_only());
        assert_eq!(s.n_hard, 0);
    }

    #[test]
    fn schedule_identities_hold_exhaustively() {
        for n_total in 0..=64 {
            for n_soft in 0..=64 {
                let s = compute_schedule(n_total, n_soft);
                assert_eq!(s.t_a + s.t_b + s.t_c, n_total);
                assert_eq!(s.t_a + s.t_c, n_soft.min(n_total));
            }
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let f = fixture();
        let mut config = f.config.clone();
        config.lr = 0.0;
        let mut student = Student::init(&config).unwrap();
        let before = student.params.clone();
        let mut rng = config.stream(SOFT_STREAM);
        let loss = stage_soft_epoch(&mut student, &f.pool, &f.train, &config, &mut rng).unwrap();
        assert!(loss > 0.0);
        assert_eq!(student.params, before);
    }

    #[test]
    fn single_entry_pool_is_memorized() {
        let f = fixture();
        let mut pool = f.pool.clone();
        pool.entries.truncate(1);
        let mut config = f.config.clone();
        config.lr = 1e-2;
        config.steps_per_epoch = 200;
        let mut student = Student::init(&config).unwrap();
        let mut rng = config.stream(SOFT_STREAM);
        stage_soft_epoch(&mut student, &pool, &f.train, &config, &mut rng).unwrap();
        let b = sample_batch(&pool, &f.train, &mut rng, 4).unwrap();
        let loss = crate::tinynet::loss(&student.params, &b.inputs, Supervision::Soft { targets: &b.targets, tau: 1.0 }).unwrap();
        assert!(loss < 1e-3, "{loss}");
    }

    #[test]
    fn soft_epochs_are_deterministic() {
        let f = fixture();
        let run = || {
            let mut s = Student::init(&f.config).unwrap();
            let mut rng = f.config.stream(SOFT_STREAM);
            stage_soft_epoch(&mut s, &f.pool, &f.train, &f.config, &mut rng).unwrap();
            s.params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn full_smoothing_gives_uniform_targets() {
        let f = fixture();
        let mut config = f.config.clone();
        config.alpha = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, targets) = draw_hard_batch(&f.train, &config, &mut rng).unwrap();
        for t in targets {
            assert!(t.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        // Training toward uniform drives predictions toward uniform.
        let mut student = Student::init(&config).unwrap();
        config.lr = 1e-2;
        config.steps_per_epoch = 100;
        stage_hard_epoch(&mut student, &f.train, &config, &mut rng).unwrap();
        for p in forward(&student.params, &f.test.inputs.iter().take(5).cloned().collect::<Vec<_>>().pipe(|r| Batch::from_rows(&r).unwrap())).unwrap().probs(1.0) {
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 0.05), "{p:?}");
        }
    }

    trait Pipe: Sized {
        fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
            f(self)
        }
    }
    impl<T> Pipe for T {}

    #[test]
    fn hard_stage_needs_two_images() {
        let f = fixture();
        let one = Dataset { images: f.train.images[..1].to_vec(), ..f.train.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(draw_hard_batch(&one, &f.config, &mut rng).is_err());
    }

    #[test]
    fn soft_only_schedule_equals_soft_only_trainer() {
        let f = fixture();
        let schedule = compute_schedule(3, 5);
        let a = train_hald(data(&f), &schedule, &f.config).unwrap();
        let b = train_soft_only(data(&f), 3, &f.config).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.final_test_acc(), b.final_test_acc());
    }

    #[test]
    fn empty_schedule_returns_init() {
        let f = fixture();
        let out = train_hald(data(&f), &compute_schedule(0, 0), &f.config).unwrap();
        assert_eq!(out.params, init_net(&f.config.arch, f.config.seed).unwrap());
        assert!(out.log.records.is_empty());
        let out = train_soft_only(data(&f), 0, &f.config).unwrap();
        assert_eq!(out.params, init_net(&f.config.arch, f.config.seed).unwrap());
    }

    #[test]
    fn variant_reproduces_hald_and_boundaries_chain() {
        let f = fixture();
        let schedule = compute_schedule(6, 4);
        let hald = train_hald(data(&f), &schedule, &f.config).unwrap();
        let variant = train_variant(&[(StageKind::Soft, 2), (StageKind::Hard, 2), (StageKind::Soft, 2)], data(&f), &f.config).unwrap();
        assert_eq!(hald.params, variant.params);
        assert_eq!(hald.stage_ends, variant.stage_ends);
        assert_eq!(hald.stage_ends.len(), 3);
        assert_eq!(hald.log.records.len(), 6);
        let stages: Vec<StageKind> = hald.log.records.iter().map(|r| r.stage).collect();
        use StageKind::*;
        assert_eq!(stages, vec![Soft, Soft, Hard, Hard, Soft, Soft]);
        // Stage B starts from exactly where stage A stopped.
        let a_only = train_variant(&[(Soft, 2)], data(&f), &f.config).unwrap();
        assert_eq!(a_only.params, hald.stage_ends[0]);
        assert!(train_variant(&[], data(&f), &f.config).is_err());
    }

    #[test]
    fn hald_is_deterministic() {
        let f = fixture();
        let schedule = compute_schedule(4, 2);
        let a = train_hald(data(&f), &schedule, &f.config).unwrap();
        let b = train_hald(data(&f), &schedule, &f.config).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        let strip = |l: &RunLog| l.records.iter().map(|r| (r.loss, r.test_acc, r.grad_cos)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn joint_with_zero_weight_matches_soft_only() {
        let f = fixture();
        let joint = train_joint(data(&f), 3, 0.0, &f.config).unwrap();
        let soft = train_soft_only(data(&f), 3, &f.config).unwrap();
        assert_eq!(joint.params, soft.params);
        let jl: Vec<f64> = joint.log.records.iter().map(|r| r.loss).collect();
        let sl: Vec<f64> = soft.log.records.iter().map(|r| r.loss).collect();
        assert_eq!(jl, sl);
        assert!(train_joint(data(&f), 1, -1.0, &f.config).is_err());
    }

    #[test]
    fn joint_gradient_is_linear() {
        let f = fixture();
        let params = init_net(&f.config.arch, 3).unwrap();
        let lambda = 0.7;
        let mut s1 = ChaCha8Rng::seed_from_u64(10);
        let mut h1 = ChaCha8Rng::seed_from_u64(11);
        let (loss, g) = joint_step_grads(&params, data(&f), &f.config, lambda, &mut s1, &mut h1).unwrap();
        let mut s2 = ChaCha8Rng::seed_from_u64(10);
        let mut h2 = ChaCha8Rng::seed_from_u64(11);
        let b = sample_batch(&f.pool, &f.train, &mut s2, f.config.batch_size).unwrap();
        let soft = backward(&params, &b.inputs, Supervision::Soft { targets: &b.targets, tau: f.config.tau }).unwrap();
        let (hb, ht) = draw_hard_batch(&f.train, &f.config, &mut h2).unwrap();
        let hard = backward(&params, &hb, Supervision::Hard { targets: &ht }).unwrap();
        assert!((loss - (soft.loss + lambda * hard.loss)).abs() < 1e-12);
        for ((c, s), h) in g.flatten().iter().zip(soft.grads.flatten()).zip(hard.grads.flatten()) {
            assert!((c - (s + lambda * h)).abs() <= 1e-15 * c.abs().max(1.0));
        }
    }

    #[test]
    fn estimate_examples() {
        let f = fixture();
        let est = estimate_n_soft(&f.pool, &f.train, &f.config, 0, 1e-4, 50).unwrap();
        assert_eq!(est, SoftEstimate { epochs: 1, converged: true });
        let a = estimate_n_soft(&f.pool, &f.train, &f.config, 3, 1e-4, 40).unwrap();
        let b = estimate_n_soft(&f.pool, &f.train, &f.config, 3, 1e-4, 40).unwrap();
        assert_eq!(a, b);
        let tight = estimate_n_soft(&f.pool, &f.train, &f.config, 1000, 1e-4, 5).unwrap();
        assert_eq!(tight, SoftEstimate { epochs: 5, converged: false });
    }

    #[test]
    fn single_entry_pool_converges_quickly() {
        let f = fixture();
        let mut pool = f.pool.clone();
        pool.entries.truncate(1);
        let mut config = f.config.clone();
        config.lr = 1e-2;
        config.steps_per_epoch = 20;
        let est = estimate_n_soft(&pool, &f.train, &config, 3, 1e-4, 100).unwrap();
        assert!(est.converged && est.epochs <= 20, "{est:?}");
        let mut s = Student::init(&config).unwrap();
        let mut rng = config.stream(SOFT_STREAM);
        for _ in 0..est.epochs {
            stage_soft_epoch(&mut s, &pool, &f.train, &config, &mut rng).unwrap();
        }
        assert!(pool_loss(&s.params, &pool, &f.train, 1.0).unwrap() < 1e-3);
    }

    #[test]
    fn soft_only_best_loss_is_non_increasing() {
        let f = fixture();
        let out = train_soft_only(data(&f), 10, &f.config).unwrap();
        let mut best = f64::INFINITY;
        let mut bests = Vec::new();
        for r in &out.log.records {
            best = best.min(r.loss);
            bests.push(best);
        }
        assert!(bests.windows(2).all(|w| w[1] <= w[0]));
        assert!(bests.last().unwrap() < &out.log.records[0].loss);
    }

    #[test]
    fn mismatched_pool_is_rejected() {
        let f = fixture();
        let mut pool = f.pool.clone();
        pool.classes = 5;
        let d = TrainData::new(&pool, &f.train);
        assert!(train_soft_only(d, 1, &f.config).is_err());
    }

    #[test]
    fn run_log_csv_has_one_row_per_epoch() {
        let f = fixture();
        let out = train_hald(data(&f), &compute_schedule(5, 2), &f.config).unwrap();
        let csv = out.log.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("epoch,stage,loss,test_acc,grad_cos,seconds"));
    }

    #[test]
    fn full_coverage_reference_trains() {
        let f = fixture();
        let out = train_full_coverage(&f.teacher, &f.train, 3, &f.config, Some(&f.test)).unwrap();
        assert_eq!(out.log.records.len(), 3);
        assert!(out.log.records[2].loss < out.log.records[0].loss);
    }

    #[test]
    fn hard_epoch_does_not_worsen_consistency() {
        let f = fixture();
        let mut config = f.config.clone();
        config.steps_per_epoch = 16;
        let soft = train_soft_only(data(&f), 10, &config).unwrap();
        let mut student = Student::init(&config).unwrap();
        student.params = soft.params.clone();
        let probes: Vec<Image> = f.train.images.iter().take(20).map(|im| im.image.clone()).collect();
        let before = mean_crop_consistency(&student.params, &probes, 16, &config.strong, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        stage_hard_epoch(&mut student, &f.train, &config, &mut rng).unwrap();
        let after = mean_crop_consistency(&student.params, &probes, 16, &config.strong, 99).unwrap();
        assert!(after.mean_js <= before.mean_js, "{} -> {}", before.mean_js, after.mean_js);
    }

    #[test]
    fn stage_kind_parses() {
        assert_eq!("soft".parse::<StageKind>().unwrap(), StageKind::Soft);
        assert_eq!("H".parse::<StageKind>().unwrap(), StageKind::Hard);
        assert!("medium".parse::<StageKind>().is_err());
        let _ = AugConfig::weak(4);
    }
}
