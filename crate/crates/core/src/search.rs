//! Output-strategy search over calibration confidences.
//!
//! For every early exit the candidate thresholds come from where the
//! confidences of samples that should leave there overlap with those of
//! samples that should continue; the Cartesian product of the per-exit
//! candidates is then traversed for the strategy whose cascade reproduces
//! the most target exits.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::multiexit::{OutputStrategy, NEVER_EXIT};

/// Default cap on the number of candidate vectors.
pub const SEARCH_BUDGET: u128 = 1_000_000;

/// Substitute confidences at every exit for one sample, plus the exit the
/// victim is believed to have used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub conf: Vec<f64>,
    pub target_exit: usize,
}

fn check_points(points: &[CalibrationPoint]) -> Result<usize> {
    let k = points
        .first()
        .ok_or_else(|| contract("no calibration points"))?
        .conf
        .len();
    for p in points {
        if p.conf.len() != k {
            return Err(contract("calibration points disagree on the exit count"));
        }
        if p.target_exit == 0 || p.target_exit > k {
            return Err(contract(format!("target exit {} outside 1..={k}", p.target_exit)));
        }
        if p.conf.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(contract(format!("confidence outside [0, 1]: {:?}", p.conf)));
        }
    }
    Ok(k)
}

/// Sorted, deduplicated candidate thresholds for exit `i` (1-based, `< K`).
pub fn candidate_thresholds(points: &[CalibrationPoint], i: usize) -> Result<Vec<f64>> {
    let k = check_points(points)?;
    if i == 0 || i >= k {
        return Err(contract(format!("candidate exit {i} outside 1..{k}")));
    }
    let a: Vec<f64> = points
        .iter()
        .filter(|p| p.target_exit == i)
        .map(|p| p.conf[i - 1])
        .collect();
    let b: Vec<f64> = points
        .iter()
        .filter(|p| p.target_exit > i)
        .map(|p| p.conf[i - 1])
        .collect();
    let Some(min_a) = a.iter().copied().reduce(f64::min) else {
        return Ok(vec![NEVER_EXIT]);
    };
    let max_b = match b.iter().copied().reduce(f64::max) {
        Some(m) if m >= min_a => m,
        _ => return Ok(vec![min_a]),
    };
    let mut all: Vec<f64> = a.into_iter().chain(b).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out: Vec<f64> = all
        .iter()
        .copied()
        .filter(|&v| v >= min_a && v <= max_b)
        .collect();
    out.push(all.iter().copied().find(|&v| v > max_b).unwrap_or(NEVER_EXIT));
    Ok(out)
}

/// Simulated cascade exit of one point under thresholds `t`.
fn cascade_exit(conf: &[f64], t: &[f64]) -> usize {
    t.iter()
        .zip(conf)
        .position(|(t, c)| c >= t)
        .map_or(t.len() + 1, |i| i + 1)
}

/// Fraction of points whose simulated exit equals their target exit.
pub fn evaluate_strategy(points: &[CalibrationPoint], strategy: &OutputStrategy) -> Result<f64> {
    let k = check_points(points)?;
    if strategy.exit_count() != k {
        return Err(contract(format!(
            "strategy for {} exits, points have {k}",
            strategy.exit_count()
        )));
    }
    let hits = points
        .iter()
        .filter(|p| cascade_exit(&p.conf, strategy.thresholds()) == p.target_exit)
        .count();
    Ok(hits as f64 / points.len() as f64)
}

/// Best strategy found by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub strategy: OutputStrategy,
    pub agreement: f64,
    pub candidate_counts: Vec<usize>,
}

/// Searches the Cartesian product of per-exit candidates with
/// [`SEARCH_BUDGET`].
pub fn search_strategy(points: &[CalibrationPoint]) -> Result<SearchOutcome> {
    search_strategy_with_budget(points, SEARCH_BUDGET)
}

/// Exact maximizer of [`evaluate_strategy`] over the candidate product;
/// ties go to the lexicographically smallest threshold vector.
pub fn search_strategy_with_budget(points: &[CalibrationPoint], budget: u128) -> Result<SearchOutcome> {
    let k = check_points(points)?;
    let cands = (1..k)
        .map(|i| candidate_thresholds(points, i))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = cands.iter().map(Vec::len).collect();
    let product = counts
        .iter()
        .try_fold(1u128, |acc, &c| acc.checked_mul(c as u128))
        .unwrap_or(u128::MAX);
    if product > budget {
        return Err(Error::Budget {
            product,
            limit: budget,
            counts,
        });
    }

    // Depth-first traversal in lexicographic order. Points that already left
    // the cascade are final; the remainder bounds what deeper levels can add.
    struct Dfs<'a> {
        points: &'a [CalibrationPoint],
        cands: &'a [Vec<f64>],
        current: Vec<f64>,
        best: Option<(usize, Vec<f64>)>,
    }
    impl Dfs<'_> {
        fn visit(&mut self, depth: usize, alive: &[usize], hits: usize) {
            let best_hits = self.best.as_ref().map(|b| b.0);
            if best_hits.is_some_and(|b| hits + alive.len() <= b) {
                return;
            }
            if depth == self.cands.len() {
                let last = depth + 1;
                let total = hits + alive.iter().filter(|&&p| self.points[p].target_exit == last).count();
                if best_hits.is_none_or(|b| total > b) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            for ci in 0..self.cands[depth].len() {
                let t = self.cands[depth][ci];
                let mut rest = Vec::with_capacity(alive.len());
                let mut gained = 0;
                for &p in alive {
                    let pt = &self.points[p];
                    if pt.conf[depth] >= t {
                        gained += usize::from(pt.target_exit == depth + 1);
                    } else {
                        rest.push(p);
                    }
                }
                self.current.push(t);
                self.visit(depth + 1, &rest, hits + gained);
                self.current.pop();
            }
        }
    }
    let mut dfs = Dfs {
        points,
        cands: &cands,
        current: Vec::with_capacity(k - 1),
        best: None,
    };
    let all: Vec<usize> = (0..points.len()).collect();
    dfs.visit(0, &all, 0);
    let (hits, t) = dfs.best.expect("the candidate product is never empty");
    Ok(SearchOutcome {
        strategy: OutputStrategy::new(t)?,
        agreement: hits as f64 / points.len() as f64,
        candidate_counts: counts,
    })
}

/// Brute force over every distinct observed confidence (plus "never") at
/// each exit. Test oracle for small instances only.
pub fn exhaustive_oracle(points: &[CalibrationPoint]) -> Result<f64> {
    let k = check_points(points)?;
    if k > 3 || points.len() > 50 {
        return Err(contract(format!(
            "exhaustive oracle limited to K <= 3 and 50 points, got K={k}, {} points",
            points.len()
        )));
    }
    let grids: Vec<Vec<f64>> = (0..k - 1)
        .map(|i| {
            let mut g: Vec<f64> = points.iter().map(|p| p.conf[i]).collect();
            g.push(NEVER_EXIT);
            g.sort_by(f64::total_cmp);
            g.dedup();
            g
        })
        .collect();
    let mut best = 0.0f64;
    let mut idx = vec![0usize; k - 1];
    loop {
        let t: Vec<f64> = idx.iter().zip(&grids).map(|(&i, g)| g[i]).collect();
        best = best.max(evaluate_strategy(points, &OutputStrategy::new(t)?)?);
        let mut d = 0;
        while d < idx.len() {
            idx[d] += 1;
            if idx[d] < grids[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == idx.len() {
            return Ok(best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(conf: &[f64], target_exit: usize) -> CalibrationPoint {
        CalibrationPoint {
            conf: conf.to_vec(),
            target_exit,
        }
    }

    fn four_points() -> Vec<CalibrationPoint> {
        vec![
            pt(&[0.97, 0.5], 1),
            pt(&[0.92, 0.5], 1),
            pt(&[0.94, 0.5], 2),
            pt(&[0.80, 0.5], 2),
        ]
    }

    #[test]
    fn overlap_candidates() {
        assert_eq!(candidate_thresholds(&four_points(), 1).unwrap(), vec![0.92, 0.94, 0.97]);
    }

    #[test]
    fn disjoint_and_empty_candidates() {
        let p = vec![pt(&[0.99, 0.2], 1), pt(&[0.5, 0.2], 2)];
        assert_eq!(candidate_thresholds(&p, 1).unwrap(), vec![0.99]);
        let p = vec![pt(&[0.99, 0.2], 2)];
        assert_eq!(candidate_thresholds(&p, 1).unwrap(), vec![NEVER_EXIT]);
        assert!(candidate_thresholds(&p, 2).is_err());
    }

    #[test]
    fn successor_falls_back_to_sentinel() {
        let p = vec![pt(&[0.9, 0.2], 1), pt(&[0.95, 0.2], 2)];
        assert_eq!(candidate_thresholds(&p, 1).unwrap(), vec![0.9, 0.95, NEVER_EXIT]);
    }

    #[test]
    fn earlier_targets_are_excluded() {
        let p = vec![
            pt(&[0.99, 0.1, 0.5], 1),
            pt(&[0.5, 0.8, 0.5], 2),
            pt(&[0.5, 0.6, 0.5], 3),
        ];
        assert_eq!(candidate_thresholds(&p, 2).unwrap(), vec![0.8]);
    }

    #[test]
    fn evaluate_hand_trace() {
        let s = OutputStrategy::new(vec![0.92]).unwrap();
        assert_eq!(evaluate_strategy(&four_points(), &s).unwrap(), 0.75);
        let all_last = OutputStrategy::last_exit_only(2);
        assert_eq!(evaluate_strategy(&four_points(), &all_last).unwrap(), 0.5);
    }

    #[test]
    fn search_tie_break_and_oracle() {
        let out = search_strategy(&four_points()).unwrap();
        assert_eq!(out.strategy.thresholds(), &[0.92]);
        assert_eq!(out.agreement, 0.75);
        assert_eq!(exhaustive_oracle(&four_points()).unwrap(), 0.75);
    }

    #[test]
    fn perfect_separation() {
        let p = vec![
            pt(&[0.99, 0.9, 0.3], 1),
            pt(&[0.6, 0.97, 0.3], 2),
            pt(&[0.6, 0.7, 0.3], 3),
        ];
        assert_eq!(search_strategy(&p).unwrap().agreement, 1.0);
        assert_eq!(exhaustive_oracle(&p[..1]).unwrap(), 1.0);
    }

    #[test]
    fn identical_multisets_counting() {
        // A and B are both {0.6, 0.9}: every threshold exits equal numbers
        // from each side, so no choice beats 2 of 4.
        let p = vec![
            pt(&[0.6, 0.5], 1),
            pt(&[0.9, 0.5], 1),
            pt(&[0.6, 0.5], 2),
            pt(&[0.9, 0.5], 2),
        ];
        assert_eq!(exhaustive_oracle(&p).unwrap(), 0.5);
        assert_eq!(search_strategy(&p).unwrap().agreement, 0.5);
    }

    #[test]
    fn budget_error_names_counts() {
        let p: Vec<_> = (0..40)
            .map(|i| {
                let c = 0.5 + i as f64 / 100.0;
                pt(&[c, c, 0.1], if i % 2 == 0 { 1 } else { 3 })
            })
            .collect();
        match search_strategy_with_budget(&p, 10) {
            Err(Error::Budget { counts, limit, .. }) => {
                assert_eq!(counts.len(), 2);
                assert_eq!(limit, 10);
            }
            other => panic!("expected a budget error, got {other:?}"),
        }
    }

    #[test]
    fn oracle_size_guard() {
        let p = vec![pt(&[0.5, 0.5, 0.5, 0.5], 1)];
        assert!(exhaustive_oracle(&p).is_err());
    }
}
