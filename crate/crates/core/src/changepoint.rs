//! Offline Bayesian changepoint detection over sorted runtimes.
//!
//! Runtimes are sorted and split into contiguous segments, each modelled as
//! i.i.d. Normal with unknown mean and variance under a Normal-Inverse-Gamma
//! prior. The MAP segmentation is found exactly by dynamic programming.
//!
//! The posterior over a segmentation with `m` segments of sizes `n_1..n_m` is
//!
//! ```text
//! Σ_j log p(segment_j)                        (NIG marginal likelihoods)
//! + Σ_j lnΓ(n_j + 1) + lnΓ(m) − lnΓ(n + m)    (segment occupancy)
//! + (m − 1)·ln(1 − p)                          (geometric count prior)
//! ```
//!
//! The occupancy term is the Dirichlet-multinomial probability of the
//! segment sizes; without it, sorting a single Normal sample produces tails
//! that the likelihood alone prefers to split off.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{contract, Result};

/// Detection hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcdConfig {
    /// Smallest allowed segment.
    pub min_segment: usize,
    /// Largest number of changepoints considered.
    pub k_max: usize,
    pub kappa0: f64,
    pub alpha0: f64,
    /// `beta0 = beta_scale * variance(all runtimes)`.
    pub beta_scale: f64,
    /// Success probability of the geometric prior on the changepoint count.
    pub count_prior_p: f64,
}

impl Default for BcdConfig {
    fn default() -> Self {
        Self {
            min_segment: 5,
            k_max: 8,
            kappa0: 0.01,
            alpha0: 1.0,
            beta_scale: 0.01,
            count_prior_p: 0.5,
        }
    }
}

impl BcdConfig {
    fn validate(&self) -> Result<()> {
        if self.min_segment == 0 {
            return Err(contract("min_segment must be at least 1"));
        }
        let positive = [self.kappa0, self.alpha0, self.beta_scale];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(contract("kappa0, alpha0 and beta_scale must be positive"));
        }
        if !(self.count_prior_p > 0.0 && self.count_prior_p < 1.0) {
            return Err(contract("count_prior_p must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Normal-Inverse-Gamma prior on a segment's mean and variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigPrior {
    pub mu0: f64,
    pub kappa0: f64,
    pub alpha0: f64,
    pub beta0: f64,
}

impl NigPrior {
    /// Data-adaptive prior: centered on the sample mean, scale tied to the
    /// sample variance. `None` when the data has zero variance.
    pub fn from_data(values: &[f64], cfg: &BcdConfig) -> Option<Self> {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (var > 0.0).then_some(Self {
            mu0: mean,
            kappa0: cfg.kappa0,
            alpha0: cfg.alpha0,
            beta0: cfg.beta_scale * var,
        })
    }

    fn log_marginal_from_stats(&self, n: f64, mean: f64, ss: f64) -> f64 {
        let kn = self.kappa0 + n;
        let an = self.alpha0 + 0.5 * n;
        let bn = self.beta0 + 0.5 * ss + self.kappa0 * n * (mean - self.mu0).powi(2) / (2.0 * kn);
        ln_gamma(an) - ln_gamma(self.alpha0) + self.alpha0 * self.beta0.ln() - an * bn.ln()
            + 0.5 * (self.kappa0 / kn).ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log marginal likelihood of `values` as one Normal segment.
pub fn segment_log_marginal(values: &[f64], prior: &NigPrior) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("segment_log_marginal of an empty slice"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(prior.log_marginal_from_stats(n, mean, ss))
}

/// MAP segmentation of a runtime sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangepointResult {
    pub changepoint_count: usize,
    /// Runtime thresholds between adjacent segments, ascending.
    pub boundaries: Vec<f64>,
    pub exit_count: usize,
    pub log_posterior: f64,
    /// Sorted-order index at which each segment after the first starts.
    pub split_indices: Vec<usize>,
}

/// Prefix sums of the centered, sorted data for O(1) segment statistics.
struct SegmentTable<'a> {
    prior: &'a NigPrior,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl<'a> SegmentTable<'a> {
    fn new(sorted: &[f64], prior: &'a NigPrior) -> Self {
        let mut s1 = vec![0.0; sorted.len() + 1];
        let mut s2 = vec![0.0; sorted.len() + 1];
        for (i, &v) in sorted.iter().enumerate() {
            let c = v - prior.mu0;
            s1[i + 1] = s1[i] + c;
            s2[i + 1] = s2[i] + c * c;
        }
        Self { prior, s1, s2 }
    }

    /// Segment `[i, j)` score: NIG marginal plus its occupancy factor.
    fn score(&self, i: usize, j: usize) -> f64 {
        let n = (j - i) as f64;
        let sum = self.s1[j] - self.s1[i];
        let mean_c = sum / n;
        let ss = (self.s2[j] - self.s2[i] - sum * mean_c).max(0.0);
        self.prior
            .log_marginal_from_stats(n, mean_c + self.prior.mu0, ss)
            + ln_gamma(n + 1.0)
    }
}

fn global_terms(n: usize, segments: usize, cfg: &BcdConfig) -> f64 {
    let m = segments as f64;
    ln_gamma(m) - ln_gamma(n as f64 + m) + (m - 1.0) * (1.0 - cfg.count_prior_p).ln()
}

fn sorted_copy(runtimes: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = runtimes.iter().find(|v| !v.is_finite()) {
        return Err(crate::Error::InvalidValue(format!("runtime {v}")));
    }
    let mut sorted = runtimes.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

fn build_result(sorted: &[f64], splits: Vec<usize>, log_posterior: f64) -> ChangepointResult {
    let boundaries = splits
        .iter()
        .map(|&s| 0.5 * (sorted[s - 1] + sorted[s]))
        .collect();
    ChangepointResult {
        changepoint_count: splits.len(),
        boundaries,
        exit_count: splits.len() + 1,
        log_posterior,
        split_indices: splits,
    }
}

/// Exact MAP segmentation of the sorted runtimes.
///
/// Segmentations whose adjacent segments would share a boundary value
/// (equal runtimes on both sides) are not considered.
pub fn detect_changepoints(runtimes: &[f64], cfg: &BcdConfig) -> Result<ChangepointResult> {
    cfg.validate()?;
    let n = runtimes.len();
    if n < 2 * cfg.min_segment {
        return Err(contract(format!(
            "changepoint detection needs at least {} runtimes, got {n}",
            2 * cfg.min_segment
        )));
    }
    let sorted = sorted_copy(runtimes)?;
    let Some(prior) = NigPrior::from_data(&sorted, cfg) else {
        return Ok(build_result(&sorted, Vec::new(), 0.0));
    };
    let table = SegmentTable::new(&sorted, &prior);
    let ms = cfg.min_segment;
    let max_segments = (cfg.k_max + 1).min(n / ms);

    // best[m][j]: best score of the first j points split into m segments.
    let mut best = vec![vec![f64::NEG_INFINITY; n + 1]; max_segments + 1];
    let mut back = vec![vec![0usize; n + 1]; max_segments + 1];
    for j in ms..=n {
        best[1][j] = table.score(0, j);
    }
    for m in 2..=max_segments {
        for j in m * ms..=n {
            let mut top = f64::NEG_INFINITY;
            let mut arg = 0;
            for i in (m - 1) * ms..=j - ms {
                if best[m - 1][i] == f64::NEG_INFINITY || sorted[i - 1] == sorted[i] {
                    continue;
                }
                let s = best[m - 1][i] + table.score(i, j);
                if s > top {
                    top = s;
                    arg = i;
                }
            }
            best[m][j] = top;
            back[m][j] = arg;
        }
    }

    let mut best_m = 1;
    let mut best_score = best[1][n] + global_terms(n, 1, cfg);
    for m in 2..=max_segments {
        let s = best[m][n] + global_terms(n, m, cfg);
        if s > best_score {
            best_score = s;
            best_m = m;
        }
    }
    let mut splits = Vec::with_capacity(best_m - 1);
    let mut j = n;
    for m in (2..=best_m).rev() {
        j = back[m][j];
        splits.push(j);
    }
    splits.reverse();
    Ok(build_result(&sorted, splits, best_score))
}

/// Log posterior of an explicit segmentation of `sorted` (ascending) data;
/// `splits` are the start indices of segments 2..m.
pub fn segmentation_log_posterior(sorted: &[f64], splits: &[usize], cfg: &BcdConfig) -> Result<f64> {
    let prior = NigPrior::from_data(sorted, cfg)
        .ok_or_else(|| contract("segmentation of zero-variance data"))?;
    let mut edges = vec![0];
    edges.extend_from_slice(splits);
    edges.push(sorted.len());
    let mut total = global_terms(sorted.len(), edges.len() - 1, cfg);
    for w in edges.windows(2) {
        if w[1] <= w[0] {
            return Err(contract(format!("splits {splits:?} are not increasing")));
        }
        total += segment_log_marginal(&sorted[w[0]..w[1]], &prior)? + ln_gamma((w[1] - w[0]) as f64 + 1.0);
    }
    Ok(total)
}

/// 1-based exit whose half-open runtime interval `[b_{j-1}, b_j)` contains `runtime`.
pub fn assign_exit(runtime: f64, result: &ChangepointResult) -> usize {
    result.boundaries.partition_point(|&b| b <= runtime) + 1
}
