//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::CliError;

/// Every accepted key with its default. Anything else is rejected.
const KEYS: &[(&str, &str)] = &[
    // corpus
    ("classes", "10"),
    ("image_side", "32"),
    ("glyph_side", "24"),
    ("n_train", "100"),
    ("n_test", "50"),
    ("distractor_count", "2"),
    ("noise_std", "0.05"),
    // teacher
    ("teacher_arch", "256,256,10"),
    ("teacher_epochs", "100"),
    ("teacher_lr", "0.002"),
    ("teacher_crop_fraction", "0.5"),
    // crops and pool
    ("out_side", "16"),
    ("scale_min", "0.25"),
    ("scale_max", "1.0"),
    ("sli", "1"),
    ("tau", "1"),
    ("bits", "16"),
    // student
    ("student_arch", "256,128,10"),
    ("trainer", "hald"),
    ("n_total", "120"),
    ("n_soft", "auto"),
    ("patience", "10"),
    ("tol", "1e-4"),
    ("lambda", "1"),
    ("alpha", "0.3"),
    ("cutmix_beta", "1"),
    ("lr", "0.001"),
    ("batch_size", "64"),
    ("steps_per_epoch", "64"),
    ("weight_decay", "0"),
    ("probe_size", "32"),
    // diagnostics
    ("checkpoint", "teacher"),
    ("reference", ""),
    ("diag_images", "50"),
    ("diag_crops", "32"),
    ("consistency_images", "20"),
    ("epsilon", "1e-12"),
    // theory
    ("selector", "all"),
    // run
    ("seed", "0"),
    ("out", "."),
    ("create_out", "false"),
    ("train_data", ""),
    ("test_data", ""),
    ("teacher_path", ""),
    ("pool_path", ""),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect() }
    }
}

impl ExperimentConfig {
    /// Defaults overridden by the lines of `text`. Blank lines and `#`
    /// comments are skipped; a key may appear only once.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let k = k.trim();
            if seen.contains(&k) {
                return Err(CliError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            seen.push(k);
            cfg.set(k, v.trim()).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.keys().find(|k| **k == key) {
            Some(&k) => {
                self.values.insert(k, value.to_string());
                Ok(())
            }
            None => Err(CliError::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.str(key);
        v.parse().map_err(|_| CliError::Usage(format!("{key} = {v:?} is not a valid value")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.str(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(CliError::Usage(format!("{key} = {v:?} is not a boolean"))),
        }
    }

    pub fn arch(&self, key: &str) -> Result<Vec<usize>, CliError> {
        let v = self.str(key);
        let arch: Option<Vec<usize>> = v.split(',').map(|p| p.trim().parse().ok()).collect();
        match arch {
            Some(a) if a.len() >= 2 && a.iter().all(|&w| w > 0) => Ok(a),
            _ => Err(CliError::Usage(format!("{key} = {v:?} is not a comma-separated layer list"))),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out"))
    }

    /// `key` if set, otherwise `default_name` inside the output directory.
    pub fn path_or(&self, key: &str, default_name: &str) -> PathBuf {
        match self.str(key) {
            "" => self.out_dir().join(default_name),
            p => PathBuf::from(p),
        }
    }

    /// One `key = value` line per key, sorted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of [`to_text`](Self::to_text), hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
