//! The attacker pipeline: query-set construction, exit estimation from
//! timings, and substitute training under the performance and strategy losses.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::changepoint::{assign_exit, detect_changepoints, BcdConfig, ChangepointResult};
use crate::error::{contract, Result};
use crate::multiexit::MultiExitNet;
use crate::numerics::{hinge, kl_div, minibatches, Sgd, Tape, Tensor, Var};
use crate::victimlab::BlackBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Drawn from the victim's training distribution.
    Iid,
    Unrelated,
}

/// Inputs the attacker will submit, tagged by origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub inputs: Tensor,
    pub provenance: Vec<Provenance>,
}

/// Samples `n_iid` rows from `iid` and `n_unrelated` from `unrelated`
/// without replacement and interleaves them in a seeded random order.
pub fn build_query_set(
    iid: &Tensor,
    unrelated: &Tensor,
    n_iid: usize,
    n_unrelated: usize,
    seed: u64,
) -> Result<QuerySet> {
    if iid.is_empty() && unrelated.is_empty() {
        return Err(contract("both query sources are empty"));
    }
    if n_iid > iid.rows() || n_unrelated > unrelated.rows() {
        return Err(contract(format!(
            "requested {n_iid} iid / {n_unrelated} unrelated samples from sources of {} / {}",
            iid.rows(),
            unrelated.rows()
        )));
    }
    if n_iid > 0 && n_unrelated > 0 && iid.shape()[1..] != unrelated.shape()[1..] {
        return Err(contract(format!(
            "source sample shapes differ: {:?} vs {:?}",
            iid.shape(),
            unrelated.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = index::sample(&mut rng, iid.rows(), n_iid).into_vec();
    let b = index::sample(&mut rng, unrelated.rows(), n_unrelated).into_vec();
    let mut picks: Vec<(Provenance, usize)> = a
        .into_iter()
        .map(|i| (Provenance::Iid, i))
        .chain(b.into_iter().map(|i| (Provenance::Unrelated, i)))
        .collect();
    picks.shuffle(&mut rng);
    let template = if n_iid > 0 { iid } else { unrelated };
    let mut data = Vec::with_capacity(picks.len() * template.row_len());
    for &(p, i) in &picks {
        let src = if p == Provenance::Iid { iid } else { unrelated };
        data.extend_from_slice(src.row(i));
    }
    let mut shape = template.shape().to_vec();
    shape[0] = picks.len();
    Ok(QuerySet {
        inputs: Tensor::new(shape, data)?,
        provenance: picks.into_iter().map(|(p, _)| p).collect(),
    })
}

/// One query sample with the victim's response and its estimated exit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub input: Tensor,
    pub victim_probs: Tensor,
    pub runtime: f64,
    /// 1-based exit label from changepoint assignment.
    pub estimated_exit: usize,
}

/// Fits changepoints on the calibration runtimes only, then queries every
/// sample of `queries` and labels it with an estimated exit.
pub fn estimate_exit_labels<B: BlackBox>(
    victim: &mut B,
    calibration: &Tensor,
    queries: &Tensor,
    cfg: &BcdConfig,
) -> Result<(ChangepointResult, Vec<QueryRecord>)> {
    let calib_times: Vec<f64> = victim
        .query_timed(calibration)?
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    let cp = detect_changepoints(&calib_times, cfg)?;
    let responses = victim.query_timed(queries)?;
    let records = responses
        .into_iter()
        .enumerate()
        .map(|(r, (probs, runtime))| QueryRecord {
            input: queries.row_tensor(r),
            victim_probs: probs,
            runtime,
            estimated_exit: assign_exit(runtime, &cp),
        })
        .collect();
    Ok((cp, records))
}

/// Substitute training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub phi1: f64,
    pub phi2: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            phi1: 0.95,
            phi2: 0.9,
            lambda: 0.5,
            epochs: 30,
            lr: 0.02,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        check_phis(self.phi1, self.phi2)?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(contract(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        Ok(())
    }
}

fn check_phis(phi1: f64, phi2: f64) -> Result<()> {
    if !(phi1.is_finite() && phi2.is_finite()) || phi1 < phi2 {
        return Err(contract(format!("phi1 ({phi1}) must be >= phi2 ({phi2})")));
    }
    Ok(())
}

/// Sum over exits of the batch-mean `KL(victim || exit)`.
pub fn performance_loss_on_tape(tape: &mut Tape, exit_probs: &[Var], victim_probs: &Tensor) -> Result<Var> {
    let mut terms = Vec::with_capacity(exit_probs.len());
    for &p in exit_probs {
        let kl = tape.kl_to_target(p, victim_probs.clone())?;
        terms.push(tape.mean(kl));
    }
    tape.add_all(&terms)
}

/// Margin loss pushing each sample's confidence above `phi1` at its own exit
/// and below `phi2` at every earlier exit. Empty exit groups contribute 0.
pub fn strategy_loss_on_tape(
    tape: &mut Tape,
    exit_probs: &[Var],
    exit_labels: &[usize],
    phi1: f64,
    phi2: f64,
) -> Result<Var> {
    check_phis(phi1, phi2)?;
    let k = exit_probs.len();
    check_labels(exit_labels, k)?;
    let mut terms = Vec::new();
    for (i, &p) in exit_probs.iter().enumerate().take(k - 1) {
        let conf = tape.row_max(p)?;
        let own = tape.hinge_below(conf, phi1);
        let mask: Vec<bool> = exit_labels.iter().map(|&e| e == i + 1).collect();
        terms.push(tape.masked_mean(own, mask)?);
        let early = tape.hinge_above(conf, phi2);
        for j in i + 2..=k {
            let mask: Vec<bool> = exit_labels.iter().map(|&e| e == j).collect();
            terms.push(tape.masked_mean(early, mask)?);
        }
    }
    tape.add_all(&terms)
}

fn check_labels(exit_labels: &[usize], k: usize) -> Result<()> {
    match exit_labels.iter().find(|&&e| e == 0 || e > k) {
        Some(e) => Err(contract(format!("exit label {e} outside 1..={k}"))),
        None => Ok(()),
    }
}

/// Stacked inputs, victim outputs and exit labels of a record slice.
pub struct RecordBatch {
    pub inputs: Tensor,
    pub victim_probs: Tensor,
    pub exits: Vec<usize>,
}

impl RecordBatch {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a QueryRecord>) -> Result<Self> {
        let (mut xs, mut ps, mut exits) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            xs.push(r.input.clone());
            ps.push(r.victim_probs.clone());
            exits.push(r.estimated_exit);
        }
        if exits.is_empty() {
            return Err(contract("empty record batch"));
        }
        Ok(Self {
            inputs: Tensor::stack(&xs)?,
            victim_probs: Tensor::stack(&ps)?,
            exits,
        })
    }
}

/// Value of the performance loss, evaluated without a tape.
pub fn performance_loss(sub: &MultiExitNet, records: &[QueryRecord]) -> Result<f64> {
    let batch = RecordBatch::from_records(records)?;
    let outs = sub.forward_batch(&batch.inputs)?;
    let mut total = 0.0;
    for out in &outs {
        let mut sum = 0.0;
        for (r, rec) in records.iter().enumerate() {
            sum += kl_div(&rec.victim_probs, &out.row_tensor(r))?;
        }
        total += sum / records.len() as f64;
    }
    Ok(total)
}

/// Value of the strategy loss, evaluated without a tape.
pub fn strategy_loss(sub: &MultiExitNet, records: &[QueryRecord], phi1: f64, phi2: f64) -> Result<f64> {
    check_phis(phi1, phi2)?;
    let batch = RecordBatch::from_records(records)?;
    check_labels(&batch.exits, sub.exit_count())?;
    let conf = sub.confidences(&batch.inputs)?;
    Ok(strategy_loss_from_confidences(&conf, &batch.exits, phi1, phi2))
}

/// Strategy loss from per-sample exit confidences (`conf[sample][exit]`).
pub fn strategy_loss_from_confidences(conf: &[Vec<f64>], exits: &[usize], phi1: f64, phi2: f64) -> f64 {
    let k = conf.first().map_or(0, Vec::len);
    let group_mean = |exit: usize, f: &dyn Fn(&[f64]) -> f64| {
        let vals: Vec<f64> = conf
            .iter()
            .zip(exits)
            .filter(|(_, &e)| e == exit)
            .map(|(c, _)| f(c))
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mut total = 0.0;
    for i in 0..k.saturating_sub(1) {
        total += group_mean(i + 1, &|c| hinge(phi1, c[i]));
        for j in i + 2..=k {
            total += group_mean(j, &|c| hinge(c[i], phi2));
        }
    }
    total
}

/// Per-epoch full-dataset loss values; epoch 0 is before any update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<LossRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub performance_loss: f64,
    pub strategy_loss: f64,
    pub total: f64,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,performance_loss,strategy_loss,total\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.performance_loss, r.strategy_loss, r.total);
        }
        s
    }
}

const EVAL_CHUNK: usize = 512;

fn full_losses(sub: &MultiExitNet, records: &[QueryRecord], cfg: &AttackConfig) -> Result<(f64, f64)> {
    // Both losses are means, so chunk values are weighted by chunk size.
    let mut perf = 0.0;
    let mut conf = Vec::with_capacity(records.len());
    let mut exits = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let batch = RecordBatch::from_records(chunk)?;
        let outs = sub.forward_batch(&batch.inputs)?;
        for out in &outs {
            for r in 0..chunk.len() {
                perf += crate::numerics::kl_terms(batch.victim_probs.row(r), out.row(r));
            }
        }
        for r in 0..chunk.len() {
            conf.push(outs.iter().map(|o| o.row(r).iter().copied().fold(0.0, f64::max)).collect());
        }
        exits.extend(batch.exits);
    }
    let strat = strategy_loss_from_confidences(&conf, &exits, cfg.phi1, cfg.phi2);
    Ok((perf / records.len() as f64, strat))
}

/// Minimizes `performance_loss + lambda * strategy_loss` by mini-batch SGD.
pub fn train_substitute(
    mut sub: MultiExitNet,
    records: &[QueryRecord],
    cfg: &AttackConfig,
) -> Result<(MultiExitNet, LossTrace)> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(contract("no query records to train on"));
    }
    check_labels(
        &records.iter().map(|r| r.estimated_exit).collect::<Vec<_>>(),
        sub.exit_count(),
    )?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = LossTrace::default();
    let mut record_epoch = |sub: &MultiExitNet, epoch| -> Result<()> {
        let (p, s) = full_losses(sub, records, cfg)?;
        trace.rows.push(LossRow {
            epoch,
            performance_loss: p,
            strategy_loss: s,
            total: p + cfg.lambda * s,
        });
        Ok(())
    };
    record_epoch(&sub, 0)?;
    for epoch in 1..=cfg.epochs {
        for idx in minibatches(records.len(), cfg.batch_size, &mut rng) {
            let batch = RecordBatch::from_records(idx.iter().map(|&i| &records[i]))?;
            let mut tape = Tape::new();
            let x = tape.constant(batch.inputs);
            let exits = sub.forward_on_tape(&mut tape, x)?;
            let mut loss = performance_loss_on_tape(&mut tape, &exits, &batch.victim_probs)?;
            if cfg.lambda > 0.0 {
                let s = strategy_loss_on_tape(&mut tape, &exits, &batch.exits, cfg.phi1, cfg.phi2)?;
                let s = tape.scale(s, cfg.lambda);
                loss = tape.add(loss, s)?;
            }
            let grads = tape.grad(loss)?;
            opt.step(sub.params_mut(), &grads)?;
        }
        record_epoch(&sub, epoch)?;
    }
    Ok((sub, trace))
}

/// Conventional multi-exit training on the victim's pseudo-labels only.
pub fn train_baseline(
    sub: MultiExitNet,
    records: &[QueryRecord],
    cfg: &AttackConfig,
) -> Result<(MultiExitNet, LossTrace)> {
    let cfg = AttackConfig {
        lambda: 0.0,
        ..cfg.clone()
    };
    train_substitute(sub, records, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiexit::{Activation, BackboneSpec};

    #[test]
    fn query_set_mix_and_determinism() {
        let iid = Tensor::new(vec![20, 2], (0..40).map(f64::from).collect()).unwrap();
        let unrel = Tensor::new(vec![50, 2], (0..100).map(|v| -f64::from(v) - 1.0).collect()).unwrap();
        let q = build_query_set(&iid, &unrel, 10, 40, 3).unwrap();
        assert_eq!(q.inputs.rows(), 50);
        assert_eq!(q.provenance.iter().filter(|&&p| p == Provenance::Iid).count(), 10);
        for (r, p) in q.provenance.iter().enumerate() {
            assert_eq!(*p == Provenance::Iid, q.inputs.row(r)[0] >= 0.0);
        }
        assert_eq!(q, build_query_set(&iid, &unrel, 10, 40, 3).unwrap());
        let pure = build_query_set(&iid, &unrel, 20, 0, 1).unwrap();
        assert!(pure.provenance.iter().all(|&p| p == Provenance::Iid));
        assert!(build_query_set(&iid, &unrel, 21, 0, 1).is_err());
    }

    fn fixed_exit_tape(outputs: &[&[f64]]) -> (Tape, Vec<Var>) {
        let mut tape = Tape::new();
        let vars = outputs
            .iter()
            .map(|o| {
                let rows = o.len() / 2;
                tape.constant(Tensor::new(vec![rows, 2], o.to_vec()).unwrap())
            })
            .collect();
        (tape, vars)
    }

    #[test]
    fn performance_loss_closed_form() {
        let (mut tape, exits) = fixed_exit_tape(&[&[0.5, 0.5], &[0.25, 0.75]]);
        let victim = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let l = performance_loss_on_tape(&mut tape, &exits, &victim).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn strategy_loss_hand_example() {
        // x in D_1 with conf_1 = 0.90, y in D_2 with conf_1 = 0.93.
        let (mut tape, exits) = fixed_exit_tape(&[&[0.9, 0.1, 0.93, 0.07], &[0.5, 0.5, 0.5, 0.5]]);
        let l = strategy_loss_on_tape(&mut tape, &exits, &[1, 2], 0.95, 0.9).unwrap();
        assert!((tape.value(l).item().unwrap() - 0.08).abs() < 1e-12);
        let conf = vec![vec![0.9, 0.5], vec![0.93, 0.5]];
        assert!((strategy_loss_from_confidences(&conf, &[1, 2], 0.95, 0.9) - 0.08).abs() < 1e-12);
    }

    #[test]
    fn strategy_loss_edge_cases() {
        let conf = vec![vec![0.97, 0.6, 0.5], vec![0.85, 0.99, 0.5], vec![0.2, 0.3, 0.9]];
        assert_eq!(strategy_loss_from_confidences(&conf, &[1, 2, 3], 0.95, 0.9), 0.0);
        // Only last-exit samples: just the "not too early" terms.
        let conf = vec![vec![0.95, 0.92, 0.5]];
        let l = strategy_loss_from_confidences(&conf, &[3], 0.95, 0.9);
        assert!((l - (0.05 + 0.02)).abs() < 1e-12);
        let (mut tape, exits) = fixed_exit_tape(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!(strategy_loss_on_tape(&mut tape, &exits, &[1], 0.8, 0.9).is_err());
        assert!(strategy_loss_on_tape(&mut tape, &exits, &[3], 0.95, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.phi1 = 0.8;
        assert!(cfg.validate().is_err());
        let cfg = AttackConfig {
            lambda: -1.0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn toy_records() -> (MultiExitNet, Vec<QueryRecord>) {
        let spec = BackboneSpec::dense(3, &[8, 8], Activation::Tanh);
        let sub = MultiExitNet::build_evenly_partitioned(spec, 2, 2, 1).unwrap();
        let records = (0..24)
            .map(|i| {
                let a = i as f64 / 24.0 - 0.5;
                let hot = if a > 0.0 { [0.97, 0.03] } else { [0.2, 0.8] };
                QueryRecord {
                    input: Tensor::from_slice(&[a, -a, a * a]),
                    victim_probs: Tensor::from_slice(&hot),
                    runtime: 0.0,
                    estimated_exit: if a > 0.0 { 1 } else { 2 },
                }
            })
            .collect();
        (sub, records)
    }

    #[test]
    fn plain_and_tape_losses_agree() {
        let (sub, records) = toy_records();
        let batch = RecordBatch::from_records(&records).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(batch.inputs.clone());
        let exits = sub.forward_on_tape(&mut tape, x).unwrap();
        let p = performance_loss_on_tape(&mut tape, &exits, &batch.victim_probs).unwrap();
        let s = strategy_loss_on_tape(&mut tape, &exits, &batch.exits, 0.95, 0.9).unwrap();
        let pv = performance_loss(&sub, &records).unwrap();
        let sv = strategy_loss(&sub, &records, 0.95, 0.9).unwrap();
        assert!((tape.value(p).item().unwrap() - pv).abs() < 1e-12);
        assert!((tape.value(s).item().unwrap() - sv).abs() < 1e-12);
    }

    #[test]
    fn baseline_equals_lambda_zero_and_training_reduces_loss() {
        let (sub, records) = toy_records();
        let cfg = AttackConfig {
            epochs: 40,
            batch_size: 8,
            lr: 0.05,
            ..AttackConfig::default()
        };
        let zero = AttackConfig {
            lambda: 0.0,
            ..cfg.clone()
        };
        let (a, _) = train_baseline(sub.clone(), &records, &cfg).unwrap();
        let (b, _) = train_substitute(sub.clone(), &records, &zero).unwrap();
        assert_eq!(a, b);
        let (_, trace) = train_substitute(sub, &records, &cfg).unwrap();
        let first = &trace.rows[0];
        let last = trace.rows.last().unwrap();
        assert_eq!(trace.rows.len(), 41);
        assert!(last.total < first.total);
        assert!(trace.to_csv().starts_with("epoch,performance_loss,strategy_loss,total\n0,"));
    }

    #[test]
    fn empty_records_rejected() {
        let (sub, _) = toy_records();
        assert!(train_substitute(sub, &[], &AttackConfig::default()).is_err());
    }
}
