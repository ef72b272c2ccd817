//! Synthetic tiered tasks and unrelated filler data.

use exitsteal_core::data::LabeledSet;
use exitsteal_core::numerics::Tensor;
use exitsteal_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Labeled samples with the difficulty tier (1-based) each was drawn at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieredDataset {
    pub set: LabeledSet,
    pub tiers: Vec<usize>,
}

/// A fixed classification task: Gaussian blobs around per-class centers.
///
/// Tier `t` samples carry isotropic noise `tier_noise[t-1]`, so low tiers
/// are easy and can leave a multi-exit network early.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobTask {
    classes: usize,
    blobs_per_class: usize,
    tier_noise: Vec<f64>,
    /// `[classes * blobs_per_class, features]`, class-major.
    centers: Tensor,
}

impl BlobTask {
    pub fn new(
        classes: usize,
        features: usize,
        blobs_per_class: usize,
        center_spread: f64,
        tier_noise: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 || features == 0 || blobs_per_class == 0 {
            return Err(Error::Contract(
                "blob task needs >= 2 classes, >= 1 feature, >= 1 blob per class".into(),
            ));
        }
        if tier_noise.is_empty() || tier_noise[0] <= 0.0 || tier_noise.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Contract(format!(
                "tier noise schedule must be positive and strictly increasing: {tier_noise:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = classes * blobs_per_class * features;
        let data = (0..n)
            .map(|_| center_spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(Self {
            classes,
            blobs_per_class,
            tier_noise,
            centers: Tensor::new(vec![classes * blobs_per_class, features], data)?,
        })
    }

    pub fn features(&self) -> usize {
        self.centers.row_len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn tiers(&self) -> usize {
        self.tier_noise.len()
    }

    /// `n` samples; tiers cycle so every tier gets `n / tiers` (±1) samples.
    pub fn sample(&self, n: usize, seed: u64) -> TieredDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.features();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut tiers = Vec::with_capacity(n);
        for i in 0..n {
            let tier = i % self.tiers();
            let label = rng.gen_range(0..self.classes);
            let blob = rng.gen_range(0..self.blobs_per_class);
            let center = self.centers.row(label * self.blobs_per_class + blob);
            let sigma = self.tier_noise[tier];
            data.extend(center.iter().map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal)));
            labels.push(label);
            tiers.push(tier + 1);
        }
        let inputs = Tensor::new(vec![n, d], data).expect("sized above");
        TieredDataset {
            set: LabeledSet::new(inputs, labels).expect("one label per row"),
            tiers,
        }
    }
}

/// Convenience wrapper: a fresh task (centers from `seed`) and `n` samples.
pub fn generate_tiered_dataset(
    classes: usize,
    features: usize,
    tier_noise: &[f64],
    n: usize,
    seed: u64,
) -> Result<TieredDataset> {
    let task = BlobTask::new(classes, features, 1, 1.0, tier_noise.to_vec(), seed)?;
    Ok(task.sample(n, seed.wrapping_add(1)))
}

/// Structureless inputs `N(0, scale^2)`: the attacker's unrelated pool.
pub fn generate_unrelated(n: usize, features: usize, scale: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * features)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![n, features], data).expect("sized above")
}
