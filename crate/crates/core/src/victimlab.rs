//! Victim training and black-box deployment with simulated timing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{contract, Result};
use crate::multiexit::{ExitOutcome, MultiExitNet, OutputStrategy};
use crate::numerics::{minibatches, Sgd, Tape, Tensor};

/// Simulated inference latency: fixed per-block and per-head costs plus
/// Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub block_costs: Vec<f64>,
    pub head_costs: Vec<f64>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl TimingModel {
    /// Every block costs `block_cost`, every head `head_cost`.
    pub fn uniform(net: &MultiExitNet, block_cost: f64, head_cost: f64, noise_sigma: f64, seed: u64) -> Self {
        Self {
            block_costs: vec![block_cost; net.backbone().block_count()],
            head_costs: vec![head_cost; net.exit_count()],
            noise_sigma,
            seed,
        }
    }

    fn validate(&self, net: &MultiExitNet) -> Result<()> {
        if self.block_costs.len() != net.backbone().block_count() || self.head_costs.len() != net.exit_count() {
            return Err(contract(format!(
                "timing model has {} block / {} head costs for a net with {} blocks and {} exits",
                self.block_costs.len(),
                self.head_costs.len(),
                net.backbone().block_count(),
                net.exit_count()
            )));
        }
        let costs = self.block_costs.iter().chain(&self.head_costs);
        if costs.clone().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(contract("timing costs must be positive"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(contract(format!("noise_sigma {} < 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Noiseless runtime of a sample leaving at every exit.
    pub fn base_times(&self, net: &MultiExitNet) -> Vec<f64> {
        net.exits()
            .iter()
            .enumerate()
            .map(|(k, &e)| self.block_costs[..e].iter().sum::<f64>() + self.head_costs[..=k].iter().sum::<f64>())
            .collect()
    }
}

/// What an attacker can do with a deployed model: submit inputs, observe the
/// emitted probability vector and, optionally, how long inference took.
pub trait BlackBox {
    fn input_shape(&self) -> &[usize];
    fn class_count(&self) -> usize;
    /// Probability vectors of the exits actually taken, one per input row.
    fn query(&self, inputs: &Tensor) -> Result<Vec<Tensor>>;
    /// Like [`query`](Self::query), with one runtime observation per row.
    fn query_timed(&mut self, inputs: &Tensor) -> Result<Vec<(Tensor, f64)>>;
}

/// A frozen victim behind a black-box surface.
#[derive(Debug, Clone)]
pub struct VictimDeployment {
    net: MultiExitNet,
    strategy: OutputStrategy,
    timing: TimingModel,
    base_times: Vec<f64>,
    noise: ChaCha8Rng,
}

impl VictimDeployment {
    pub fn new(net: MultiExitNet, strategy: OutputStrategy, timing: TimingModel) -> Result<Self> {
        if strategy.exit_count() != net.exit_count() {
            return Err(contract(format!(
                "strategy for {} exits deployed on a {}-exit net",
                strategy.exit_count(),
                net.exit_count()
            )));
        }
        timing.validate(&net)?;
        Ok(Self {
            base_times: timing.base_times(&net),
            noise: ChaCha8Rng::seed_from_u64(timing.seed),
            net,
            strategy,
            timing,
        })
    }

    pub fn strategy(&self) -> &OutputStrategy {
        &self.strategy
    }

    pub fn timing(&self) -> &TimingModel {
        &self.timing
    }

    /// White-box view of the victim, for evaluation only.
    pub fn net(&self) -> &MultiExitNet {
        &self.net
    }

    /// Ground-truth cascade outcomes (exit index included), for evaluation only.
    pub fn ground_truth(&self, inputs: &Tensor) -> Result<Vec<ExitOutcome>> {
        self.net.infer_batch(inputs, &self.strategy)
    }
}

impl BlackBox for VictimDeployment {
    fn input_shape(&self) -> &[usize] {
        &self.net.backbone().input_shape
    }

    fn class_count(&self) -> usize {
        self.net.class_count()
    }

    fn query(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.ground_truth(inputs)?.into_iter().map(|o| o.probs).collect())
    }

    fn query_timed(&mut self, inputs: &Tensor) -> Result<Vec<(Tensor, f64)>> {
        let outcomes = self.ground_truth(inputs)?;
        let noise = Normal::new(0.0, self.timing.noise_sigma).expect("validated sigma");
        Ok(outcomes
            .into_iter()
            .map(|o| {
                let t = self.base_times[o.exit_index - 1] + noise.sample(&mut self.noise);
                (o.probs, t)
            })
            .collect())
    }
}

/// Mini-batch SGD settings for victim training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.0,
            seed: 0,
        }
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(contract(format!("label {l} out of range for {classes} classes")));
        }
        data[r * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Joint training of all exits: the loss is the sum over exits of the mean
/// cross-entropy against the true labels.
pub fn train_victim(mut net: MultiExitNet, data: &LabeledSet, cfg: &TrainConfig) -> Result<MultiExitNet> {
    if data.is_empty() {
        return Err(contract("cannot train on an empty dataset"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        for batch in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let part = data.subset(&batch);
            let target = one_hot(part.labels(), net.class_count())?;
            let mut tape = Tape::new();
            let x = tape.constant(part.inputs().clone());
            let exits = net.forward_on_tape(&mut tape, x)?;
            // With a one-hot target, KL reduces to cross-entropy.
            let mut terms = Vec::with_capacity(exits.len());
            for p in exits {
                let ce = tape.kl_to_target(p, target.clone())?;
                terms.push(tape.mean(ce));
            }
            let loss = tape.add_all(&terms)?;
            let grads = tape.grad(loss)?;
            opt.step(net.params_mut(), &grads)?;
        }
    }
    Ok(net)
}

/// Outcome of accuracy-constrained uniform threshold selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraditionalSelection {
    pub strategy: OutputStrategy,
    /// Selected grid value; `None` when nothing met the accuracy constraint.
    pub tau: Option<f64>,
    pub accuracy: f64,
    pub last_exit_accuracy: f64,
    pub flops: u64,
    /// Set when no grid value met the constraint and the all-last fallback was returned.
    pub infeasible: bool,
}

/// `{0.50, 0.55, ..., 0.95, 0.99}`.
pub fn traditional_tau_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (10..=19).map(|i| i as f64 * 0.05).collect();
    grid.push(0.99);
    grid
}

/// Picks the uniform threshold minimizing total FLOPs on `calibration`
/// subject to accuracy ≥ last-exit accuracy − `slack`; ties go to the
/// smaller threshold.
pub fn select_traditional_strategy(
    net: &MultiExitNet,
    calibration: &LabeledSet,
    slack: f64,
) -> Result<TraditionalSelection> {
    if calibration.is_empty() {
        return Err(contract("empty calibration set"));
    }
    if !slack.is_finite() || slack < 0.0 {
        return Err(contract(format!("accuracy slack {slack} must be >= 0")));
    }
    let outs = net.forward_batch(calibration.inputs())?;
    let evaluate = |s: &OutputStrategy| {
        let outcomes = net.cascade(&outs, s);
        let correct = outcomes
            .iter()
            .zip(calibration.labels())
            .filter(|(o, &l)| o.predicted_class == l)
            .count();
        let flops: u64 = outcomes.iter().map(|o| o.flops).sum();
        (correct as f64 / calibration.len() as f64, flops)
    };
    let last = OutputStrategy::last_exit_only(net.exit_count());
    let (last_acc, last_flops) = evaluate(&last);
    let mut best: Option<(f64, OutputStrategy, f64, u64)> = None;
    for tau in traditional_tau_grid() {
        let s = OutputStrategy::uniform(tau, net.exit_count())?;
        let (acc, flops) = evaluate(&s);
        if acc + 1e-12 < last_acc - slack {
            continue;
        }
        if best.as_ref().is_none_or(|b| flops < b.3) {
            best = Some((tau, s, acc, flops));
        }
    }
    Ok(match best {
        Some((tau, strategy, accuracy, flops)) => TraditionalSelection {
            strategy,
            tau: Some(tau),
            accuracy,
            last_exit_accuracy: last_acc,
            flops,
            infeasible: false,
        },
        None => TraditionalSelection {
            strategy: last,
            tau: None,
            accuracy: last_acc,
            last_exit_accuracy: last_acc,
            flops: last_flops,
            infeasible: true,
        },
    })
}
