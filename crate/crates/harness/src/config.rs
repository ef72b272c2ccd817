//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use exitsteal_core::attack::AttackConfig;
use exitsteal_core::changepoint::BcdConfig;
use exitsteal_core::multiexit::Activation;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Named random streams; each stage draws from exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub dataset: u64,
    pub victim_init: u64,
    pub victim_noise: u64,
    pub attacker_init: u64,
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            dataset: 1,
            victim_init: 2,
            victim_noise: 3,
            attacker_init: 4,
            shuffle: 5,
        }
    }
}

impl Seeds {
    /// Every stream offset by `base`, so one flag varies a whole run.
    pub fn offset(&self, base: u64) -> Seeds {
        // Masked to 63 bits: TOML integers are signed.
        let mix = |s: u64| s.wrapping_add(base.wrapping_mul(0x9E37_79B9_7F4A_7C15)) & (u64::MAX >> 1);
        Seeds {
            dataset: mix(self.dataset),
            victim_init: mix(self.victim_init),
            victim_noise: mix(self.victim_noise),
            attacker_init: mix(self.attacker_init),
            shuffle: mix(self.shuffle),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub features: usize,
    /// Gaussian blobs per class; more than one makes classes non-convex.
    pub blobs_per_class: usize,
    /// Standard deviation of blob centers around the origin.
    pub center_spread: f64,
    /// Per-tier sample noise, strictly increasing (tier 1 is easiest).
    pub tier_noise: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    /// Attacker-held i.i.d. pool the query set samples from.
    pub iid_pool: usize,
    /// Unrelated (out-of-distribution) pool.
    pub unrelated_pool: usize,
    /// Unrelated inputs are `N(0, (unrelated_scale * center_spread)^2)`.
    pub unrelated_scale: f64,
    // Real-data mode.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub unrelated_images: Option<PathBuf>,
    pub duplicate_channels: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            classes: 4,
            features: 3,
            blobs_per_class: 12,
            center_spread: 1.0,
            tier_noise: vec![0.02, 0.05, 0.1, 0.2],
            train_size: 8000,
            test_size: 2000,
            iid_pool: 2000,
            unrelated_pool: 7000,
            unrelated_scale: 1.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            unrelated_images: None,
            duplicate_channels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub block_cost: f64,
    pub head_cost: f64,
    /// Noise standard deviation; when absent, the smallest gap between
    /// per-exit base times divided by `gap_over_sigma`.
    pub noise_sigma: Option<f64>,
    pub gap_over_sigma: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            block_cost: 1.0,
            head_cost: 0.2,
            noise_sigma: None,
            gap_over_sigma: 10.0,
        }
    }
}

/// Backbone description shared by victim and attacker sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Dense block widths; ignored when `conv_channels` is set.
    pub widths: Vec<usize>,
    /// Conv block output channels (3x3, stride 1) for image inputs.
    pub conv_channels: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            widths: vec![12; 4],
            conv_channels: Vec::new(),
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn block_count(&self) -> usize {
        if self.conv_channels.is_empty() {
            self.widths.len()
        } else {
            self.conv_channels.len()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    pub arch: ArchConfig,
    pub exits: usize,
    /// Uniform deployed threshold.
    pub tau: f64,
    /// Per-exit thresholds; overrides `tau` when present.
    pub thresholds: Option<Vec<f64>>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub timing: TimingConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            exits: 4,
            tau: 0.92,
            thresholds: None,
            epochs: 60,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.0,
            timing: TimingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArch {
    /// Same architecture the attacker uses for its own substitute.
    Attacker,
    /// The victim's architecture and exit placement (near-white-box).
    Victim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerConfig {
    pub arch: ArchConfig,
    pub n_iid: usize,
    pub n_unrelated: usize,
    /// i.i.d. samples whose runtimes fit the changepoint model; also the
    /// calibration set for strategy selection.
    pub calibration: usize,
    /// Calibration points used by the strategy search (halved on budget overrun).
    pub search_points: usize,
    /// Accuracy slack of the traditional threshold selection.
    pub traditional_slack: f64,
    pub baseline_arch: BaselineArch,
    pub train: AttackConfig,
    pub bcd: BcdConfig,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            n_iid: 1000,
            n_unrelated: 7000,
            calibration: 1000,
            search_points: 300,
            traditional_slack: 0.005,
            baseline_arch: BaselineArch::Attacker,
            train: AttackConfig {
                epochs: 200,
                lr: 0.005,
                ..AttackConfig::default()
            },
            bcd: BcdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// Train and report the "no strategy loss" and "no search" variants.
    pub ablations: bool,
    /// Extra substitutes trained at these strategy-loss coefficients.
    pub lambda_sweep: Vec<f64>,
    /// Whole-pipeline reruns with these victim exit counts.
    pub exit_sweep: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            ablations: true,
            lambda_sweep: Vec::new(),
            exit_sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seeds: Seeds,
    pub dataset: DatasetConfig,
    pub victim: VictimConfig,
    pub attacker: AttackerConfig,
    pub study: StudyConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            out_dir: PathBuf::from("runs/toy"),
            seeds: Seeds::default(),
            dataset: DatasetConfig::default(),
            victim: VictimConfig::default(),
            attacker: AttackerConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let cfg = Self::from_toml(&text).map_err(|message| HarnessError::Config {
            path: path.to_owned(),
            message,
        })?;
        cfg.validate().map_err(|message| HarnessError::Config {
            path: path.to_owned(),
            message,
        })?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every precondition that can fail before compute starts.
    pub fn validate(&self) -> Result<(), String> {
        let d = &self.dataset;
        let v = &self.victim;
        let a = &self.attacker;
        if v.exits < 2 {
            return Err(format!("victim.exits must be >= 2, got {}", v.exits));
        }
        if v.arch.block_count() < v.exits {
            return Err(format!(
                "victim has {} blocks for {} exits",
                v.arch.block_count(),
                v.exits
            ));
        }
        if a.arch.block_count() < 2 {
            return Err("attacker backbone needs at least 2 blocks".into());
        }
        if let Some(t) = &v.thresholds {
            if t.len() + 1 != v.exits {
                return Err(format!("victim.thresholds needs {} values", v.exits - 1));
            }
        }
        a.train.validate().map_err(|e| e.to_string())?;
        match d.kind {
            DatasetKind::Synthetic => {
                if d.tier_noise.len() < 2 {
                    return Err("dataset.tier_noise needs at least 2 tiers".into());
                }
                if d.tier_noise[0] <= 0.0 || d.tier_noise.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(format!(
                        "dataset.tier_noise must be positive and strictly increasing: {:?}",
                        d.tier_noise
                    ));
                }
                if d.classes < 2 || d.features == 0 || d.blobs_per_class == 0 {
                    return Err("dataset needs >= 2 classes, >= 1 feature and >= 1 blob per class".into());
                }
                if a.n_iid > d.iid_pool || a.n_unrelated > d.unrelated_pool {
                    return Err(format!(
                        "query budget {}+{} exceeds pools {}+{}",
                        a.n_iid, a.n_unrelated, d.iid_pool, d.unrelated_pool
                    ));
                }
            }
            DatasetKind::Idx => {
                let files = [
                    ("train_images", &d.train_images),
                    ("train_labels", &d.train_labels),
                    ("test_images", &d.test_images),
                    ("test_labels", &d.test_labels),
                ];
                for (key, p) in files {
                    match p {
                        None => return Err(format!("dataset.{key} is required for idx datasets")),
                        Some(p) if !p.exists() => {
                            return Err(format!("dataset.{key}: {} does not exist", p.display()))
                        }
                        _ => {}
                    }
                }
                if let Some(p) = &d.unrelated_images {
                    if !p.exists() {
                        return Err(format!("dataset.unrelated_images: {} does not exist", p.display()));
                    }
                }
            }
        }
        if a.calibration > a.n_iid {
            return Err(format!(
                "attacker.calibration ({}) exceeds the i.i.d. query count ({})",
                a.calibration, a.n_iid
            ));
        }
        if a.calibration < 2 * a.bcd.min_segment || a.search_points == 0 {
            return Err("attacker.calibration too small for changepoint detection".into());
        }
        if !(a.traditional_slack >= 0.0) {
            return Err("attacker.traditional_slack must be >= 0".into());
        }
        if self.study.exit_sweep.iter().any(|&k| k < 2 || k > v.arch.block_count()) {
            return Err("study.exit_sweep values must lie in 2..=victim blocks".into());
        }
        if self.study.lambda_sweep.iter().any(|l| !(*l >= 0.0)) {
            return Err("study.lambda_sweep values must be >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn dotted_sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            "name = \"x\"\n[victim]\ntau = 0.8\n[victim.timing]\nhead_cost = 0.5\n[attacker.train]\nlambda = 2.0\n",
        )
        .unwrap();
        assert_eq!(cfg.victim.tau, 0.8);
        assert_eq!(cfg.victim.timing.head_cost, 0.5);
        assert_eq!(cfg.attacker.train.lambda, 2.0);
        assert_eq!(cfg.attacker.train.phi1, 0.95);
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.attacker.train.phi1 = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.victim.exits = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.tier_noise = vec![0.1, 0.4, 0.4, 1.2];
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("bogus_key = 1").is_err());
    }

    #[test]
    fn seed_offset_changes_every_stream() {
        let s = Seeds::default();
        assert_eq!(s.offset(0), s);
        let o = s.offset(3);
        assert_ne!(o.dataset, s.dataset);
        assert_ne!(o.shuffle, s.shuffle);
    }
}
