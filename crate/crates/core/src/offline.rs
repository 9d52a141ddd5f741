//! Offline prefix sweeps on reference-logged data.
//!
//! One dataset is logged per seed under the uniform reference policy; record `s` comes from
//! its own random stream, so every prefix of a longer log is the shorter log. The model is
//! refit on nested prefixes and its exact full-bank temperature-zero regret is recorded at
//! each checkpoint.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, PreferenceRecord};
use crate::instance::ProblemInstance;
use crate::io::SCHEMA_VERSION;
use crate::online::Learner;
use crate::policy::sample_choice;
use crate::regret::{expected_regret_with, pair_weights, Averaging, RegretOracle, SelectorMap};
use crate::rng::{stream_rng, Stream};
use crate::score::RewardModel;
use crate::stats::{linear_fit, LinearFit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    pub n_total: usize,
    pub n_checkpoints: usize,
    pub slate_k: usize,
    pub seeds: Vec<u64>,
    pub warm_start_across_prefixes: bool,
    pub averaging: Averaging,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            n_total: 100_000,
            n_checkpoints: 100,
            slate_k: 2,
            seeds: vec![0],
            warm_start_across_prefixes: true,
            averaging: Averaging::UserDist,
        }
    }
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slate_k < 2 {
            return Err(Error::InvalidConfig("slate_k must be at least 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one seed is required".into()));
        }
        checkpoints(self.n_total, self.n_checkpoints).map(|_| ())
    }
}

/// `n_checkpoints` evenly spaced prefix sizes from 0 to `n_total`, rounded down.
pub fn checkpoints(n_total: usize, n_checkpoints: usize) -> Result<Vec<usize>> {
    if n_checkpoints < 2 {
        return Err(Error::InvalidConfig("n_checkpoints must be at least 2".into()));
    }
    if n_total < n_checkpoints - 1 {
        return Err(Error::InvalidConfig(format!(
            "n_total = {n_total} is too small for {n_checkpoints} distinct checkpoints"
        )));
    }
    let steps = (n_checkpoints - 1) as u128;
    Ok((0..n_checkpoints)
        .map(|k| (k as u128 * n_total as u128 / steps) as usize)
        .collect())
}

struct Logger<'a> {
    inst: &'a ProblemInstance,
    users: WeightedIndex<f64>,
    oracle: RegretOracle,
    slate_k: usize,
    run_seed: u64,
}

impl<'a> Logger<'a> {
    fn new(inst: &'a ProblemInstance, slate_k: usize, run_seed: u64) -> Result<Self> {
        if slate_k < 2 {
            return Err(Error::InvalidMode(format!("slate size {slate_k} (need >= 2)")));
        }
        let users = WeightedIndex::new(&inst.user_dist)
            .map_err(|e| Error::InvalidConfig(format!("user distribution: {e}")))?;
        Ok(Self {
            inst,
            users,
            oracle: RegretOracle::new(inst),
            slate_k,
            run_seed,
        })
    }

    fn record(&self, index: usize) -> PreferenceRecord {
        let mut rng = stream_rng(self.run_seed, index as u64, Stream::Offline);
        let user = self.users.sample(&mut rng);
        let context = rng.random_range(0..self.inst.n_ctx(user));
        let n_act = self.inst.n_act(user);
        let slate: smallvec::SmallVec<[usize; 4]> = (0..self.slate_k).map(|_| rng.random_range(0..n_act)).collect();
        let truth = self.oracle.truth_table(user);
        let scores: Vec<f64> = slate.iter().map(|&a| truth[(context, a)]).collect();
        let chosen = sample_choice(&scores, &mut rng);
        PreferenceRecord {
            user,
            context,
            slate,
            chosen,
        }
    }
}

/// `n` reference-logged records: users from the user distribution, contexts and slate
/// coordinates uniform, labels from the true MNL law.
pub fn log_offline_dataset(inst: &ProblemInstance, n: usize, slate_k: usize, run_seed: u64) -> Result<Vec<PreferenceRecord>> {
    let logger = Logger::new(inst, slate_k, run_seed)?;
    Ok((0..n).map(|s| logger.record(s)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub mean_regret: f64,
    pub zero_flag: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl SeedSweep {
    pub fn zero_model_regret(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.mean_regret)
    }

    pub fn final_regret(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.mean_regret)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub runs: Vec<SeedSweep>,
}

pub fn run_sweep(inst: &ProblemInstance, fit_cfg: &FitConfig, cfg: &OfflineConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| run_sweep_seed(inst, fit_cfg, cfg, seed, Learner::Erm))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        schema_version: SCHEMA_VERSION,
        runs,
    })
}

/// Sweep of one seed. Fit failures are recorded on their checkpoint (with NaN regret) and
/// the sweep continues from the last successful model.
pub fn run_sweep_seed(
    inst: &ProblemInstance,
    fit_cfg: &FitConfig,
    cfg: &OfflineConfig,
    seed: u64,
    learner: Learner,
) -> Result<SeedSweep> {
    cfg.validate()?;
    fit_cfg.validate()?;
    let ns = checkpoints(cfg.n_total, cfg.n_checkpoints)?;
    let logger = Logger::new(inst, cfg.slate_k, seed)?;
    let data: Vec<PreferenceRecord> = (0..cfg.n_total).map(|s| logger.record(s)).collect();
    let weights = pair_weights(inst, cfg.averaging);
    let zero = RewardModel::zeros(inst.dim_d, inst.dim_j, inst.num_users);
    let mut last_fit: Option<RewardModel> = None;
    let mut points = Vec::with_capacity(ns.len());
    for &n in &ns {
        let model = match learner {
            Learner::Oracle => Ok(inst.truth_model()),
            Learner::FrozenZero => Ok(zero.clone()),
            Learner::Erm if n == 0 => Ok(zero.clone()),
            Learner::Erm => {
                let warm = last_fit
                    .as_ref()
                    .filter(|m| cfg.warm_start_across_prefixes && m.heads_hat.iter().any(|&h| h != 0.0));
                fit(&data[..n], inst, fit_cfg, warm).map(|(m, _)| {
                    last_fit = Some(m.clone());
                    m
                })
            }
        };
        points.push(match model {
            Ok(m) => {
                let regret = expected_regret_with(&logger.oracle, &SelectorMap::from_model(&m, inst), &weights);
                SweepPoint {
                    n,
                    mean_regret: regret,
                    zero_flag: regret == 0.0,
                    error: None,
                }
            }
            Err(e) => SweepPoint {
                n,
                mean_regret: f64::NAN,
                zero_flag: false,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(SeedSweep { seed, points })
}

const MIN_DECAY_POINTS: usize = 5;

fn positive_log_points(points: &[SweepPoint]) -> (Vec<f64>, Vec<f64>) {
    points
        .iter()
        .filter(|p| p.mean_regret > 0.0 && p.mean_regret.is_finite())
        .map(|p| (p.n as f64, p.mean_regret.ln()))
        .unzip()
}

/// Least-squares fit of `ln(mean_regret)` on `n` over the positive-regret checkpoints.
pub fn fit_decay_rate(points: &[SweepPoint]) -> Result<LinearFit> {
    let (xs, ys) = positive_log_points(points);
    if xs.len() < MIN_DECAY_POINTS {
        return Err(Error::InsufficientPositivePoints {
            needed: MIN_DECAY_POINTS,
            found: xs.len(),
        });
    }
    linear_fit(&xs, &ys).ok_or(Error::InsufficientPositivePoints {
        needed: MIN_DECAY_POINTS,
        found: xs.len(),
    })
}

/// The same regression with the positive-regret checkpoints of every seed pooled.
pub fn pooled_decay_rate(result: &SweepResult) -> Result<LinearFit> {
    let all: Vec<SweepPoint> = result.runs.iter().flat_map(|r| r.points.iter().cloned()).collect();
    fit_decay_rate(&all)
}

/// Smallest checkpoint from which the regret is exactly zero at every later checkpoint.
pub fn zero_regret_burn_in(points: &[SweepPoint]) -> Option<usize> {
    let mut burn_in = None;
    for p in points.iter().rev() {
        if p.mean_regret == 0.0 {
            burn_in = Some(p.n);
        } else {
            break;
        }
    }
    burn_in
}

#[derive(Debug, Clone, Serialize)]
struct SweepCsvRow {
    seed: u64,
    n: usize,
    mean_regret: f64,
    zero_flag: bool,
}

pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for run in &result.runs {
        for p in &run.points {
            w.serialize(SweepCsvRow {
                seed: run.seed,
                n: p.n,
                mean_regret: p.mean_regret,
                zero_flag: p.zero_flag,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDecay {
    pub seed: u64,
    pub fit: Option<LinearFit>,
    pub fit_error: Option<String>,
    pub zero_model_regret: f64,
    pub final_regret: f64,
    pub burn_in: Option<usize>,
    pub failed_checkpoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySummary {
    pub schema_version: u32,
    pub seeds: Vec<SeedDecay>,
    pub pooled: Option<LinearFit>,
    pub pooled_error: Option<String>,
}

pub fn decay_summary(result: &SweepResult) -> DecaySummary {
    let seeds = result
        .runs
        .iter()
        .map(|r| {
            let fit = fit_decay_rate(&r.points);
            SeedDecay {
                seed: r.seed,
                fit_error: fit.as_ref().err().map(ToString::to_string),
                fit: fit.ok(),
                zero_model_regret: r.zero_model_regret(),
                final_regret: r.final_regret(),
                burn_in: zero_regret_burn_in(&r.points),
                failed_checkpoints: r.points.iter().filter(|p| p.error.is_some()).count(),
            }
        })
        .collect();
    let pooled = pooled_decay_rate(result);
    DecaySummary {
        schema_version: SCHEMA_VERSION,
        seeds,
        pooled_error: pooled.as_ref().err().map(ToString::to_string),
        pooled: pooled.ok(),
    }
}
