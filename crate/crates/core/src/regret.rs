//! Temperature-zero selectors, regret and disagreement over finite banks.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{gap_stats, ProblemInstance};
use crate::score::{argmax_lowest, center, RewardModel};

/// Lowest-index argmax of the model over a bank.
pub fn top_action(model: &RewardModel, user: usize, context: &[f64], bank: &DMatrix<f64>) -> Result<usize> {
    let scores = model.bank_scores(user, context, bank)?;
    argmax_lowest(&scores).ok_or(Error::EmptyBank)
}

/// Argmax action per (user, context), lowest index on ties.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectorMap {
    pub selectors: Vec<Vec<usize>>,
}

impl SelectorMap {
    pub fn from_tables(tables: &[DMatrix<f64>]) -> Self {
        let selectors = tables
            .iter()
            .map(|t| {
                (0..t.nrows())
                    .map(|c| {
                        let row: Vec<f64> = t.row(c).iter().copied().collect();
                        argmax_lowest(&row).unwrap_or(0)
                    })
                    .collect()
            })
            .collect();
        Self { selectors }
    }

    pub fn from_model(model: &RewardModel, inst: &ProblemInstance) -> Self {
        Self::from_tables(&model.score_table(inst))
    }

    pub fn get(&self, user: usize, context: usize) -> usize {
        self.selectors[user][context]
    }
}

/// Precomputed truth tables for fast regret lookups.
#[derive(Debug, Clone)]
pub struct RegretOracle {
    truth: Vec<DMatrix<f64>>,
    best: Vec<Vec<f64>>,
    pub truth_selectors: SelectorMap,
}

impl RegretOracle {
    pub fn new(inst: &ProblemInstance) -> Self {
        let truth = inst.reward_table();
        let truth_selectors = SelectorMap::from_tables(&truth);
        let best = truth
            .iter()
            .enumerate()
            .map(|(u, t)| (0..t.nrows()).map(|c| t[(c, truth_selectors.get(u, c))]).collect())
            .collect();
        Self {
            truth,
            best,
            truth_selectors,
        }
    }

    /// Regret of recommending `action` to `user` in `context`.
    pub fn regret_of(&self, user: usize, context: usize, action: usize) -> f64 {
        (self.best[user][context] - self.truth[user][(context, action)]).max(0.0)
    }

    pub fn truth_table(&self, user: usize) -> &DMatrix<f64> {
        &self.truth[user]
    }
}

pub fn one_step_regret(inst: &ProblemInstance, model: &RewardModel, user: usize, context: usize) -> Result<f64> {
    model.check_compatible(inst)?;
    if user >= inst.num_users {
        return Err(Error::IndexOutOfRange { index: user, len: inst.num_users });
    }
    if context >= inst.n_ctx(user) {
        return Err(Error::IndexOutOfRange { index: context, len: inst.n_ctx(user) });
    }
    let x = inst.context(user, context);
    let chosen = top_action(model, user, &x, &inst.actions[user])?;
    let truth = inst.truth_model().bank_scores(user, &x, &inst.actions[user])?;
    let best = truth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((best - truth[chosen]).max(0.0))
}

/// How (user, context) pairs are weighted in full-bank averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Users by the instance's user distribution, contexts uniform within a user.
    #[default]
    UserDist,
    /// Every (user, context) pair equally.
    UniformPairs,
}

/// Weight of every (user, context) pair; sums to 1.
pub fn pair_weights(inst: &ProblemInstance, averaging: Averaging) -> Vec<Vec<f64>> {
    let n_pairs = inst.num_pairs() as f64;
    (0..inst.num_users)
        .map(|u| {
            let n = inst.n_ctx(u);
            let w = match averaging {
                Averaging::UserDist => inst.user_dist[u] / n as f64,
                Averaging::UniformPairs => 1.0 / n_pairs,
            };
            vec![w; n]
        })
        .collect()
}

pub fn expected_regret_with(oracle: &RegretOracle, selectors: &SelectorMap, weights: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (u, row) in weights.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            total += w * oracle.regret_of(u, c, selectors.get(u, c));
        }
    }
    total
}

pub fn expected_regret(inst: &ProblemInstance, model: &RewardModel, averaging: Averaging) -> Result<f64> {
    model.check_compatible(inst)?;
    let oracle = RegretOracle::new(inst);
    let selectors = SelectorMap::from_model(model, inst);
    Ok(expected_regret_with(&oracle, &selectors, &pair_weights(inst, averaging)))
}

pub fn disagreement_mass(inst: &ProblemInstance, model: &RewardModel, averaging: Averaging) -> Result<f64> {
    model.check_compatible(inst)?;
    let truth = SelectorMap::from_tables(&inst.reward_table());
    let mine = SelectorMap::from_model(model, inst);
    let weights = pair_weights(inst, averaging);
    let mut total = 0.0;
    for (u, row) in weights.iter().enumerate() {
        for (c, w) in row.iter().enumerate() {
            if truth.get(u, c) != mine.get(u, c) {
                total += w;
            }
        }
    }
    Ok(total)
}

/// Per-instance regret constants: smallest top-two gap and largest within-bank reward range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretBounds {
    pub delta_min: f64,
    pub delta_max: f64,
}

pub fn regret_bounds(inst: &ProblemInstance) -> RegretBounds {
    let delta_max = inst
        .reward_table()
        .iter()
        .flat_map(|t| {
            (0..t.nrows())
                .map(|c| {
                    let row = t.row(c);
                    row.max() - row.min()
                })
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    RegretBounds {
        delta_min: gap_stats(inst).min_gap,
        delta_max,
    }
}

/// Whether every misrecommended pair carries a centered score error of at least half the
/// instance's minimum gap somewhere on its bank.
pub fn misrec_score_error_check(inst: &ProblemInstance, model: &RewardModel) -> Result<bool> {
    Ok(misrec_counterexample(inst, model)?.is_none())
}

/// First misrecommended pair violating the score-error bound, with its largest error.
pub fn misrec_counterexample(inst: &ProblemInstance, model: &RewardModel) -> Result<Option<(usize, usize, f64)>> {
    model.check_compatible(inst)?;
    let delta = gap_stats(inst).min_gap;
    let truth = inst.reward_table();
    let fitted = model.score_table(inst);
    let (ts, fs) = (SelectorMap::from_tables(&truth), SelectorMap::from_tables(&fitted));
    for u in 0..inst.num_users {
        for c in 0..inst.n_ctx(u) {
            if ts.get(u, c) == fs.get(u, c) {
                continue;
            }
            let t = center(&truth[u].row(c).iter().copied().collect::<Vec<_>>());
            let f = center(&fitted[u].row(c).iter().copied().collect::<Vec<_>>());
            let err = t.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if err < delta / 2.0 {
                return Ok(Some((u, c, err)));
            }
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretRecord {
    pub round: usize,
    pub user: usize,
    pub context: usize,
    pub one_step_regret: f64,
    pub cumulative: f64,
    pub refit_occurred: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub records: Vec<RegretRecord>,
}

impl RegretTrace {
    pub fn push(&mut self, round: usize, user: usize, context: usize, regret: f64, refit_occurred: bool) {
        let cumulative = self.cumulative() + regret;
        self.records.push(RegretRecord {
            round,
            user,
            context,
            one_step_regret: regret,
            cumulative,
            refit_occurred,
        });
    }

    pub fn cumulative(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Largest gap between the stored cumulative column and an independent re-summation.
    pub fn prefix_sum_error(&self) -> f64 {
        let mut s = 0.0;
        let mut worst: f64 = 0.0;
        for r in &self.records {
            s += r.one_step_regret;
            worst = worst.max((s - r.cumulative).abs());
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}
