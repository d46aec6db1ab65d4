//! Desk-scale preset for the directional experiments.
//!
//! The corpus is `SynthConfig::default()`. Smoothing is milder than the
//! large-scale default: with ten classes, α = 0.8 leaves the true class only
//! 3.5× the mass of any other class, and the calibration phase then pulls
//! every output towards uniform.

use crate::augment::{AugConfig, AugKind};
use crate::train::TrainConfig;

pub const TEACHER_ARCH: [usize; 3] = [256, 256, 10];
pub const STUDENT_ARCH: [usize; 3] = [256, 128, 10];
/// Network input side; the 32-pixel corpus is resampled to this.
pub const OUT_SIDE: usize = 16;

pub const TEACHER_EPOCHS: usize = 100;
pub const TEACHER_LR: f64 = 2e-3;
/// Share of teacher samples replaced by strong crops.
pub const TEACHER_CROP_FRACTION: f64 = 0.5;

pub const SCALE_RANGE: (f64, f64) = (0.25, 1.0);
pub const ALPHA: f64 = 0.3;
pub const STEPS_PER_EPOCH: usize = 64;
pub const N_TOTAL: usize = 120;
pub const PATIENCE: usize = 10;
pub const TOL: f64 = 1e-4;

pub fn strong() -> AugConfig {
    AugConfig { kind: AugKind::Strong, scale_range: SCALE_RANGE, ..AugConfig::strong(OUT_SIDE) }
}

pub fn train_config(seed: u64) -> TrainConfig {
    let mut config = TrainConfig::new(STUDENT_ARCH.to_vec(), OUT_SIDE);
    config.steps_per_epoch = STEPS_PER_EPOCH;
    config.alpha = ALPHA;
    config.strong = strong();
    config.seed = seed;
    config
}
