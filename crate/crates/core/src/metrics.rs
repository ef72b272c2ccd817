//! Accuracy, closeness and computation-cost metrics.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{contract, Result};
use crate::multiexit::{ExitOutcome, MultiExitNet, OutputStrategy};
use crate::victimlab::VictimDeployment;

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(contract(format!("{what}: {a} vs {b} entries")));
    }
    Ok(())
}

/// Fraction of outcomes whose predicted class equals the label.
pub fn accuracy(outcomes: &[ExitOutcome], labels: &[usize]) -> Result<f64> {
    same_len(outcomes.len(), labels.len(), "accuracy")?;
    let hits = outcomes
        .iter()
        .zip(labels)
        .filter(|(o, &l)| o.predicted_class == l)
        .count();
    Ok(fraction(hits, labels.len()))
}

/// Fraction of samples where class AND exit both match.
pub fn closeness(sub: &[ExitOutcome], victim: &[ExitOutcome]) -> Result<f64> {
    same_len(sub.len(), victim.len(), "closeness")?;
    let hits = sub
        .iter()
        .zip(victim)
        .filter(|(s, v)| s.predicted_class == v.predicted_class && s.exit_index == v.exit_index)
        .count();
    Ok(fraction(hits, sub.len()))
}

/// Fraction of samples where the predicted classes match, regardless of exit.
pub fn class_agreement(sub: &[ExitOutcome], victim: &[ExitOutcome]) -> Result<f64> {
    same_len(sub.len(), victim.len(), "class agreement")?;
    let hits = sub
        .iter()
        .zip(victim)
        .filter(|(s, v)| s.predicted_class == v.predicted_class)
        .count();
    Ok(fraction(hits, sub.len()))
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Total FLOPs over a set of outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputationCost {
    pub flops: u64,
    /// `flops` in units of 10^9.
    pub gflops: f64,
}

pub fn computation_cost(outcomes: &[ExitOutcome]) -> Result<ComputationCost> {
    if outcomes.is_empty() {
        return Err(contract("computation cost of no outcomes"));
    }
    let flops = outcomes.iter().map(|o| o.flops).sum();
    Ok(ComputationCost {
        flops,
        gflops: flops as f64 * 1e-9,
    })
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub acc: f64,
    pub clo: f64,
    pub class_agreement: f64,
    /// Total FLOPs in units of 10^9.
    pub cc: f64,
    pub cc_flops: u64,
    pub victim_cc_flops: u64,
    pub cc_ratio: f64,
    /// Per victim exit: samples where both class and exit matched.
    pub per_exit_agreement: Vec<usize>,
    /// How many samples the evaluated model emitted at each of its exits.
    pub exit_histogram: Vec<usize>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "ACC,CLO,CC,CC-ratio";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.acc, self.clo, self.cc, self.cc_ratio)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Assembles a report from precomputed outcome lists.
pub fn report_from_outcomes(
    outcomes: &[ExitOutcome],
    victim: &[ExitOutcome],
    labels: &[usize],
    exit_count: usize,
) -> Result<EvalReport> {
    let cost = computation_cost(outcomes)?;
    let victim_cost = computation_cost(victim)?;
    let victim_exits = victim.iter().map(|o| o.exit_index).max().unwrap_or(1);
    let mut per_exit_agreement = vec![0; victim_exits];
    for (s, v) in outcomes.iter().zip(victim) {
        if s.predicted_class == v.predicted_class && s.exit_index == v.exit_index {
            per_exit_agreement[v.exit_index - 1] += 1;
        }
    }
    let mut exit_histogram = vec![0; exit_count];
    for o in outcomes {
        if o.exit_index == 0 || o.exit_index > exit_count {
            return Err(contract(format!("exit {} outside 1..={exit_count}", o.exit_index)));
        }
        exit_histogram[o.exit_index - 1] += 1;
    }
    Ok(EvalReport {
        samples: outcomes.len(),
        acc: accuracy(outcomes, labels)?,
        clo: closeness(outcomes, victim)?,
        class_agreement: class_agreement(outcomes, victim)?,
        cc: cost.gflops,
        cc_flops: cost.flops,
        victim_cc_flops: victim_cost.flops,
        cc_ratio: cost.flops as f64 / victim_cost.flops as f64,
        per_exit_agreement,
        exit_histogram,
    })
}

/// Runs both cascades on the test set and compares them.
pub fn make_report(
    sub: &MultiExitNet,
    strategy: &OutputStrategy,
    victim: &VictimDeployment,
    test: &LabeledSet,
) -> Result<EvalReport> {
    let ours = sub.infer_batch(test.inputs(), strategy)?;
    let theirs = victim.ground_truth(test.inputs())?;
    report_from_outcomes(&ours, &theirs, test.labels(), sub.exit_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn o(class: usize, exit: usize) -> ExitOutcome {
        ExitOutcome {
            predicted_class: class,
            exit_index: exit,
            probs: Tensor::from_slice(&[0.5, 0.5]),
            flops: 100 * exit as u64,
        }
    }

    #[test]
    fn accuracy_counts() {
        let outs: Vec<_> = [0, 1, 1, 0, 1].iter().map(|&c| o(c, 1)).collect();
        assert_eq!(accuracy(&outs, &[0, 1, 0, 0, 0]).unwrap(), 0.6);
        assert_eq!(accuracy(&outs, &[0, 1, 1, 0, 1]).unwrap(), 1.0);
        assert!(accuracy(&outs, &[0]).is_err());
    }

    #[test]
    fn closeness_requires_exit_match() {
        let victim = [o(0, 1), o(1, 2), o(0, 1)];
        let sub = [o(0, 1), o(1, 1), o(0, 1)];
        assert!((closeness(&sub, &victim).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(class_agreement(&sub, &victim).unwrap(), 1.0);
        assert_eq!(closeness(&victim, &victim).unwrap(), 1.0);
    }

    #[test]
    fn cost_is_histogram_dot_flops() {
        let outs = [o(0, 1), o(0, 3), o(0, 3), o(0, 2)];
        let c = computation_cost(&outs).unwrap();
        assert_eq!(c.flops, 100 + 2 * 300 + 200);
        assert!(computation_cost(&[]).is_err());
    }

    #[test]
    fn report_round_trip_and_self_comparison() {
        let v = [o(0, 1), o(1, 2), o(1, 3)];
        let r = report_from_outcomes(&v, &v, &[0, 1, 0], 3).unwrap();
        assert_eq!(r.clo, 1.0);
        assert_eq!(r.cc_ratio, 1.0);
        assert_eq!(r.per_exit_agreement, vec![1, 1, 1]);
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.csv_row(), format!("{},1,{},1", 2.0 / 3.0, 600.0 * 1e-9));
    }
}
