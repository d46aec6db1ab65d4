//! Subcommand bodies. Each reads its inputs from the configured paths,
//! writes artifacts plus a `.cfg` sidecar holding the producing config and
//! its hash, and prints a short summary.

use std::fs;
use std::path::{Path, PathBuf};

use hald_core::augment::{AugConfig, AugKind, Image};
use hald_core::diagnostics::{lvsd_report, mean_crop_consistency, prediction_alignment, DEFAULT_CONSISTENCY_CROPS};
use hald_core::softlabel::{budget_bytes, generate_pool, SoftLabelPool};
use hald_core::synthdata::{gen_dataset, input_side, train_teacher, train_teacher_augmented, Dataset, SynthConfig};
use hald_core::theory::{run_verification, Selector};
use hald_core::tinynet::TinyNetParams;
use hald_core::train::{
    compute_schedule, estimate_n_soft, train_hald, train_joint, train_soft_only, train_variant, EvalSet, StageKind, TrainConfig,
    TrainData, TrainOutcome,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const TRAIN_FILE: &str = "train.synd";
pub const TEST_FILE: &str = "test.synd";
pub const TEACHER_FILE: &str = "teacher.tnet";
pub const POOL_FILE: &str = "pool.slbl";
pub const PROBE_FILE: &str = "probe.slbl";
pub const STUDENT_FILE: &str = "student.tnet";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Creates the output directory only when allowed to.
fn prepare_out(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let out = cfg.out_dir();
    if !out.is_dir() {
        if cfg.flag("create_out")? {
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        } else {
            return Err(CliError::Io(format!("output directory {} does not exist (pass --create)", out.display())));
        }
    }
    Ok(out)
}

fn sidecar(path: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let mut name = path.as_os_str().to_owned();
    name.push(".cfg");
    let side = PathBuf::from(name);
    let body = format!("# config_hash = {}\n{}", cfg.hash(), cfg.to_text());
    fs::write(&side, body).map_err(|e| io_err(&side, e))
}

fn write_artifact(path: &Path, bytes: &[u8], cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    sidecar(path, cfg)
}

fn write_json(path: &Path, value: &serde_json::Value, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    write_artifact(path, text.as_bytes(), cfg)
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} {} not found", path.display())))
    }
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require(path, "dataset")?;
    Dataset::load(path).map_err(|e| io_err(path, e))
}

fn load_net(path: &Path) -> Result<TinyNetParams, CliError> {
    require(path, "checkpoint")?;
    TinyNetParams::load(path).map_err(|e| io_err(path, e))
}

fn load_pool(path: &Path) -> Result<SoftLabelPool, CliError> {
    require(path, "soft-label pool")?;
    SoftLabelPool::load(path).map_err(|e| io_err(path, e))
}

fn positive(cfg: &ExperimentConfig, key: &str) -> Result<usize, CliError> {
    match cfg.get::<usize>(key)? {
        0 => Err(CliError::Usage(format!("{key} must be at least 1"))),
        v => Ok(v),
    }
}

pub fn synth_config(cfg: &ExperimentConfig) -> Result<SynthConfig, CliError> {
    let s = SynthConfig {
        classes: cfg.get("classes")?,
        image_side: cfg.get("image_side")?,
        glyph_side: cfg.get("glyph_side")?,
        n_train: cfg.get("n_train")?,
        n_test: cfg.get("n_test")?,
        distractor_count: cfg.get("distractor_count")?,
        noise_std: cfg.get("noise_std")?,
        seed: cfg.get("seed")?,
    };
    s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(s)
}

fn strong(cfg: &ExperimentConfig) -> Result<AugConfig, CliError> {
    let a = AugConfig {
        kind: AugKind::Strong,
        scale_range: (cfg.get("scale_min")?, cfg.get("scale_max")?),
        ..AugConfig::strong(positive(cfg, "out_side")?)
    };
    a.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(a)
}

pub fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig, CliError> {
    let arch = cfg.arch("student_arch")?;
    let side = positive(cfg, "out_side")?;
    if arch[0] != side * side {
        return Err(CliError::Usage(format!("student_arch input {} must equal out_side² = {}", arch[0], side * side)));
    }
    let mut t = TrainConfig::new(arch, side);
    t.batch_size = positive(cfg, "batch_size")?;
    t.steps_per_epoch = positive(cfg, "steps_per_epoch")?;
    t.lr = cfg.get("lr")?;
    t.weight_decay = cfg.get("weight_decay")?;
    t.alpha = cfg.get("alpha")?;
    t.cutmix_beta = cfg.get("cutmix_beta")?;
    t.tau = cfg.get("tau")?;
    t.strong = strong(cfg)?;
    t.seed = cfg.get("seed")?;
    t.probe_size = positive(cfg, "probe_size")?;
    t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(t)
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let synth = synth_config(cfg)?;
    let out = prepare_out(cfg)?;
    let (train, test) = gen_dataset(&synth).map_err(|e| CliError::Usage(e.to_string()))?;
    for (set, name) in [(&train, TRAIN_FILE), (&test, TEST_FILE)] {
        write_artifact(&out.join(name), &set.to_bytes(), cfg)?;
    }
    println!(
        "wrote {} train and {} test images ({} classes, side {}) to {}",
        train.len(),
        test.len(),
        train.classes,
        train.image_side,
        out.display()
    );
    Ok(())
}

pub fn train_teacher_cmd(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let arch = cfg.arch("teacher_arch")?;
    let epochs: usize = cfg.get("teacher_epochs")?;
    let lr: f64 = cfg.get("teacher_lr")?;
    let frac: f64 = cfg.get("teacher_crop_fraction")?;
    let seed: u64 = cfg.get("seed")?;
    let strong = strong(cfg)?;
    let train = load_dataset(&cfg.path_or("train_data", TRAIN_FILE))?;
    let test = load_dataset(&cfg.path_or("test_data", TEST_FILE))?;
    let out = prepare_out(cfg)?;
    let run = if frac > 0.0 {
        train_teacher_augmented(&train, &arch, epochs, lr, &strong, frac, seed)
    } else {
        train_teacher(&train, &arch, epochs, lr, seed)
    }
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let side = input_side(&run.params).map_err(|e| CliError::Usage(e.to_string()))?;
    let test_acc = EvalSet::weak_views(&test, side).and_then(|e| e.accuracy(&run.params)).map_err(|e| CliError::Usage(e.to_string()))?;
    let path = out.join(TEACHER_FILE);
    write_artifact(&path, &run.params.to_bytes(), cfg)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in run.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_artifact(&out.join("teacher_log.csv"), csv.as_bytes(), cfg)?;
    println!("teacher: train accuracy {:.4}, test accuracy {:.4} -> {}", run.train_accuracy, test_acc, path.display());
    Ok(())
}

pub fn gen_labels(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let sli = positive(cfg, "sli")?;
    let tau: f64 = cfg.get("tau")?;
    let bits: u8 = cfg.get("bits")?;
    if ![16, 32, 64].contains(&bits) {
        return Err(CliError::Usage(format!("bits must be 16, 32 or 64, got {bits}")));
    }
    let seed: u64 = cfg.get("seed")?;
    let strong = strong(cfg)?;
    let teacher = load_net(&cfg.path_or("teacher_path", TEACHER_FILE))?;
    let train = load_dataset(&cfg.path_or("train_data", TRAIN_FILE))?;
    let test = load_dataset(&cfg.path_or("test_data", TEST_FILE))?;
    let out = prepare_out(cfg)?;
    let pool = generate_pool(&teacher, &train, sli, &strong, tau, bits, seed).map_err(|e| CliError::Io(e.to_string()))?;
    // Held-out crops of test images for the gradient probe.
    let probe = generate_pool(&teacher, &test, 1, &strong, tau, bits, seed ^ 0x9E37_79B9).map_err(|e| CliError::Io(e.to_string()))?;
    let bytes = pool.to_bytes().map_err(|e| CliError::Io(e.to_string()))?;
    let path = out.join(POOL_FILE);
    write_artifact(&path, &bytes, cfg)?;
    write_artifact(&out.join(PROBE_FILE), &probe.to_bytes().map_err(|e| CliError::Io(e.to_string()))?, cfg)?;
    let slc = pool.slc(&train).map_err(|e| CliError::Io(e.to_string()))?;
    let budget = budget_bytes(slc as u64, pool.classes as u64, bits as u32, pool.classes as u64).map_err(|e| CliError::Usage(e.to_string()))?;
    let payload = pool.layout().label_payload as u64;
    println!("slc {slc}, budget_bytes {budget} ({:.3} MiB), payload {payload} bytes -> {}", budget as f64 / 1048576.0, path.display());
    if payload != budget {
        return Err(CliError::Io(format!("label payload {payload} differs from budget {budget}")));
    }
    Ok(())
}

/// `variant:` order, either stage letters (`SHS`, `HS`, ...) that share the
/// soft and hard budgets evenly, or explicit lengths (`S30,H60,S30`).
pub fn parse_order(spec: &str, n_soft: usize, n_hard: usize) -> Result<Vec<(StageKind, usize)>, CliError> {
    let bad = || CliError::Usage(format!("cannot parse stage order {spec:?}"));
    if spec.is_empty() {
        return Err(bad());
    }
    if spec.chars().all(|c| matches!(c, 'S' | 'H' | 's' | 'h')) {
        let kinds: Vec<StageKind> = spec.chars().map(|c| c.to_string().parse()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let count = |k: StageKind| kinds.iter().filter(|&&x| x == k).count();
        let (ns, nh) = (count(StageKind::Soft), count(StageKind::Hard));
        let (mut seen_s, mut seen_h) = (0, 0);
        return Ok(kinds
            .iter()
            .map(|&k| {
                let (budget, total, seen) = match k {
                    StageKind::Soft => (n_soft, ns, &mut seen_s),
                    StageKind::Hard => (n_hard, nh, &mut seen_h),
                };
                *seen += 1;
                let share = budget / total;
                (k, if *seen == total { budget - share * (total - 1) } else { share })
            })
            .collect());
    }
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            let (head, len) = part.split_at(part.char_indices().nth(1).map_or(part.len(), |(i, _)| i));
            let kind: StageKind = head.parse().map_err(|_| bad())?;
            Ok((kind, len.parse().map_err(|_| bad())?))
        })
        .collect()
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let config = train_config(cfg)?;
    let trainer = cfg.str("trainer").to_string();
    let n_total = positive(cfg, "n_total")?;
    let lambda: f64 = cfg.get("lambda")?;
    let patience = positive(cfg, "patience")?;
    let tol: f64 = cfg.get("tol")?;
    let n_soft_key = cfg.str("n_soft").to_string();
    let fixed_soft = match n_soft_key.as_str() {
        "auto" => None,
        v => Some(v.parse::<usize>().map_err(|_| CliError::Usage(format!("n_soft = {v:?} is neither auto nor a count")))?),
    };
    if !(trainer == "hald" || trainer == "soft_only" || trainer == "joint" || trainer.starts_with("variant:")) {
        return Err(CliError::Usage(format!("unknown trainer {trainer:?} (hald, soft_only, joint, variant:<order>)")));
    }
    let pool = load_pool(&cfg.path_or("pool_path", POOL_FILE))?;
    let train = load_dataset(&cfg.path_or("train_data", TRAIN_FILE))?;
    let test = load_dataset(&cfg.path_or("test_data", TEST_FILE))?;
    if pool.classes != train.classes || pool.num_images != train.len() {
        return Err(CliError::Io(format!(
            "pool ({} classes, {} images) does not belong to the dataset ({} classes, {} images)",
            pool.classes,
            pool.num_images,
            train.classes,
            train.len()
        )));
    }
    let out = prepare_out(cfg)?;
    let probe_path = out.join(PROBE_FILE);
    let probe = if probe_path.is_file() { Some(load_pool(&probe_path)?) } else { None };
    let eval = EvalSet::weak_views(&test, config.strong.out_side).map_err(|e| CliError::Io(e.to_string()))?;
    let mut data = TrainData::new(&pool, &train).with_eval(&eval);
    if let Some(p) = probe.as_ref().filter(|p| p.num_images == test.len() && p.classes == test.classes) {
        data = data.with_probe(p, &test);
    }
    let needs_soft = trainer == "hald" || trainer.starts_with("variant:");
    let (n_soft, converged) = match (needs_soft, fixed_soft) {
        (false, _) => (None, None),
        (true, Some(n)) => (Some(n), None),
        (true, None) => {
            let est = estimate_n_soft(&pool, &train, &config, patience, tol, n_total).map_err(|e| CliError::Io(e.to_string()))?;
            println!("estimated n_soft = {} ({})", est.epochs, if est.converged { "converged" } else { "not converged within n_total" });
            (Some(est.epochs), Some(est.converged))
        }
    };
    let run = |r: hald_core::Result<TrainOutcome>| r.map_err(|e| CliError::Io(e.to_string()));
    let outcome = match trainer.as_str() {
        "soft_only" => run(train_soft_only(data, n_total, &config))?,
        "joint" => run(train_joint(data, n_total, lambda, &config))?,
        "hald" => {
            let schedule = compute_schedule(n_total, n_soft.expect("estimated"));
            if schedule.is_soft_only() {
                println!("notice: n_total <= n_soft, running soft-label training only");
            }
            run(train_hald(data, &schedule, &config))?
        }
        _ => {
            let schedule = compute_schedule(n_total, n_soft.expect("estimated"));
            let order = parse_order(&trainer["variant:".len()..], schedule.t_a + schedule.t_c, schedule.t_b)?;
            if order.iter().map(|s| s.1).sum::<usize>() != n_total {
                return Err(CliError::Usage(format!("stage order {} does not sum to n_total = {n_total}", &trainer[8..])));
            }
            run(train_variant(&order, data, &config))?
        }
    };
    let path = out.join(STUDENT_FILE);
    write_artifact(&path, &outcome.params.to_bytes(), cfg)?;
    write_artifact(&out.join("run_log.csv"), outcome.log.to_csv().as_bytes(), cfg)?;
    let summary = json!({
        "config_hash": cfg.hash(),
        "trainer": trainer,
        "n_total": n_total,
        "n_soft": n_soft,
        "n_soft_converged": converged,
        "final_test_acc": outcome.final_test_acc(),
    });
    write_json(&out.join("train_summary.json"), &summary, cfg)?;
    println!("{trainer}: final test accuracy {:.4} -> {}", outcome.final_test_acc().unwrap_or(f64::NAN), path.display());
    Ok(())
}

pub fn diagnose(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ckpt = match cfg.str("checkpoint") {
        "teacher" => cfg.path_or("teacher_path", TEACHER_FILE),
        "student" => cfg.out_dir().join(STUDENT_FILE),
        p => PathBuf::from(p),
    };
    let model = load_net(&ckpt)?;
    let reference = match cfg.str("reference") {
        "" => None,
        p => Some(load_net(Path::new(p))?),
    };
    let test = load_dataset(&cfg.path_or("test_data", TEST_FILE))?;
    let n_images = positive(cfg, "diag_images")?.min(test.len());
    let n_crops = positive(cfg, "diag_crops")?;
    let epsilon: f64 = cfg.get("epsilon")?;
    let seed: u64 = cfg.get("seed")?;
    let side = input_side(&model).map_err(|e| CliError::Io(e.to_string()))?;
    if side != positive(cfg, "out_side")? {
        return Err(CliError::Usage(format!("checkpoint input side {side} differs from out_side")));
    }
    let strong = strong(cfg)?;
    let weak = AugConfig::weak(side);
    let out = prepare_out(cfg)?;
    let images: Vec<Image> = test.images.iter().map(|im| im.image.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lvsd = lvsd_report(&model, &images[..n_images], n_crops, &weak, &strong, epsilon, &mut rng).map_err(|e| CliError::Io(e.to_string()))?;
    let n_consistency = positive(cfg, "consistency_images")?.min(images.len());
    let consistency = mean_crop_consistency(&model, &images[..n_consistency], DEFAULT_CONSISTENCY_CROPS, &strong, seed)
        .map_err(|e| CliError::Io(e.to_string()))?;
    let alignment = reference
        .map(|r| prediction_alignment(&model, &r, &images, &weak))
        .transpose()
        .map_err(|e| CliError::Io(e.to_string()))?;
    write_artifact(&out.join("lvsd.csv"), lvsd.to_csv().as_bytes(), cfg)?;
    let report = json!({
        "config_hash": cfg.hash(),
        "checkpoint": ckpt.display().to_string(),
        "lvsd": lvsd.aggregate_json(),
        "crop_consistency": consistency,
        "alignment": alignment,
    });
    write_json(&out.join("diagnose.json"), &report, cfg)?;
    println!(
        "lvsd: mean trace weak {:.3e}, strong {:.3e}, p(R>1) {:.3}; crop JS {:.4}",
        lvsd.mean_trace_weak, lvsd.mean_trace_strong, lvsd.frac_ratio_above_one, consistency.mean_js
    );
    if let Some(a) = alignment {
        println!("alignment to reference: JS {:.4}, cosine {:.4}", a.mean_js, a.mean_cosine);
    }
    Ok(())
}

pub fn verify_theory(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let selector: Selector = cfg.str("selector").parse().map_err(|e: hald_core::LabError| CliError::Usage(e.to_string()))?;
    let seed: u64 = cfg.get("seed")?;
    let out = prepare_out(cfg)?;
    let report = run_verification(selector, seed).map_err(|e| CliError::Io(e.to_string()))?;
    let value = json!({ "config_hash": cfg.hash(), "report": report });
    write_json(&out.join("theory_report.json"), &value, cfg)?;
    let failing: Vec<&str> = report.failing().map(|c| c.name.as_str()).collect();
    println!("{} checks, {} failing", report.checks.len(), failing.len());
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verify(format!("failing checks: {}", failing.join(", "))))
    }
}
