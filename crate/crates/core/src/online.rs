//! Greedy personalized alignment loop.
//!
//! Each round draws a user from the user distribution and a context uniformly from that
//! user's bank, builds a slate from the deployed model's tilted policy, draws the label from
//! the true MNL law, and records the temperature-zero regret of the deployed model on the
//! realized arrival. On refit rounds the model is refit on the full history and deployed
//! from the next round on.

use std::collections::BTreeMap;
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit, FitConfig, FitReport, PreferenceRecord};
use crate::instance::ProblemInstance;
use crate::io::SCHEMA_VERSION;
use crate::policy::{sample_choice, sample_online_slate, SlateMode, TiltedPolicy};
use crate::regret::{expected_regret_with, pair_weights, Averaging, RegretOracle, RegretTrace, SelectorMap};
use crate::rng::{stream_rng, Stream};
use crate::score::RewardModel;
use crate::stats::{linear_fit, LinearFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// Refit by empirical risk minimization on the schedule.
    #[default]
    Erm,
    /// Deploys the true model and never refits.
    Oracle,
    /// Deploys the zero model and never refits.
    FrozenZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub horizon: usize,
    pub eta: f64,
    pub slate_mode: SlateMode,
    pub refit_divisor: usize,
    pub warm_start: bool,
    pub run_seed: u64,
    /// Full-bank expected regret of the deployed model is recorded every `eval_cadence`
    /// rounds; 0 disables it. Per-round arrival regret is always logged.
    pub eval_cadence: usize,
    pub learner: Learner,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            horizon: 400_000,
            eta: 1.0,
            slate_mode: SlateMode::TiltedUniform,
            refit_divisor: 5000,
            warm_start: true,
            run_seed: 0,
            eval_cadence: 1,
            learner: Learner::Erm,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if self.refit_divisor == 0 {
            return Err(Error::InvalidConfig("refit_divisor must be at least 1".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        self.slate_mode.validate()
    }
}

/// Round after a refit at `round`: every round up to `divisor`, then gaps of
/// `⌈round / divisor⌉`.
pub fn next_refit_round(round: usize, divisor: usize) -> usize {
    round + round.div_ceil(divisor.max(1)).max(1)
}

/// Refit rounds in increasing order, starting at round 1.
#[derive(Debug, Clone)]
pub struct RefitSchedule {
    next: usize,
    divisor: usize,
}

impl RefitSchedule {
    pub fn new(divisor: usize) -> Self {
        Self { next: 1, divisor }
    }
}

impl Iterator for RefitSchedule {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let r = self.next;
        self.next = next_refit_round(r, self.divisor);
        Some(r)
    }
}

pub fn refit_schedule(round: usize, divisor: usize) -> bool {
    RefitSchedule::new(divisor)
        .take_while(|&r| r <= round)
        .any(|r| r == round)
}

pub fn refit_count(horizon: usize, divisor: usize) -> usize {
    RefitSchedule::new(divisor).take_while(|&r| r <= horizon).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLogRow {
    pub round: usize,
    pub iterations_used: usize,
    pub final_objective: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

impl FitLogRow {
    pub fn new(round: usize, report: &FitReport) -> Self {
        Self {
            round,
            iterations_used: report.iterations_used,
            final_objective: report.final_objective,
            grad_norm: report.grad_norm,
            converged: report.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub round: usize,
    pub expected_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineRunSummary {
    pub schema_version: u32,
    pub horizon: usize,
    pub rounds_completed: usize,
    #[serde(rename = "G_at_checkpoints")]
    pub g_at_checkpoints: BTreeMap<usize, f64>,
    pub final_cumulative: f64,
    pub last_positive_round: usize,
    pub substantial_fraction: f64,
    pub refit_count: usize,
    /// Share of the final cumulative regret accrued after the midpoint of the run.
    pub tail_fraction: f64,
    pub abort_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub trace: RegretTrace,
    pub summary: OnlineRunSummary,
    pub fit_log: Vec<FitLogRow>,
    pub evals: Vec<EvalRow>,
    pub final_model: RewardModel,
}

pub fn run_online(inst: &ProblemInstance, fit_cfg: &FitConfig, cfg: &OnlineConfig) -> Result<OnlineRun> {
    cfg.validate()?;
    fit_cfg.validate()?;
    inst.validate()?;
    let oracle = RegretOracle::new(inst);
    let eval_weights = pair_weights(inst, Averaging::UserDist);
    let users = WeightedIndex::new(&inst.user_dist)
        .map_err(|e| Error::InvalidConfig(format!("user distribution: {e}")))?;

    let mut model = match cfg.learner {
        Learner::Oracle => inst.truth_model(),
        _ => RewardModel::zeros(inst.dim_d, inst.dim_j, inst.num_users),
    };
    let mut fitted_once = false;
    let mut policy = TiltedPolicy::new(model.clone(), inst, cfg.eta)?;
    let mut selectors = SelectorMap::from_model(&model, inst);
    let mut deployed_regret: Option<f64> = None;

    let mut schedule = RefitSchedule::new(cfg.refit_divisor);
    let mut next_refit = match cfg.learner {
        Learner::Erm => schedule.next().unwrap_or(usize::MAX),
        _ => usize::MAX,
    };

    let mut data: Vec<PreferenceRecord> = Vec::with_capacity(cfg.horizon);
    let mut trace = RegretTrace::default();
    trace.records.reserve(cfg.horizon);
    let mut fit_log = Vec::new();
    let mut evals = Vec::new();
    let mut refits = 0;
    let mut abort_reason = None;

    for round in 1..=cfg.horizon {
        let mut rng = stream_rng(cfg.run_seed, round as u64, Stream::Online);
        let user = users.sample(&mut rng);
        let context = rng.random_range(0..inst.n_ctx(user));
        let slate = sample_online_slate(policy.weights(user, context), &mut rng, cfg.slate_mode)?;
        let truth = oracle.truth_table(user);
        let truth_scores: Vec<f64> = slate.iter().map(|&a| truth[(context, a)]).collect();
        let chosen = sample_choice(&truth_scores, &mut rng);
        data.push(PreferenceRecord {
            user,
            context,
            slate,
            chosen,
        });

        let regret = oracle.regret_of(user, context, selectors.get(user, context));
        let refit = round == next_refit;
        trace.push(round, user, context, regret, refit);
        if cfg.eval_cadence > 0 && round % cfg.eval_cadence == 0 {
            let value = *deployed_regret.get_or_insert_with(|| expected_regret_with(&oracle, &selectors, &eval_weights));
            evals.push(EvalRow {
                round,
                expected_regret: value,
            });
        }

        if refit {
            // All-zero heads are a stationary point of the objective; restart from the
            // initializer instead.
            let informative = model.heads_hat.iter().any(|&h| h != 0.0);
            let warm = (cfg.warm_start && fitted_once && informative).then_some(&model);
            match fit(&data, inst, fit_cfg, warm) {
                Ok((m, report)) => {
                    fit_log.push(FitLogRow::new(round, &report));
                    model = m;
                    fitted_once = true;
                    policy = TiltedPolicy::new(model.clone(), inst, cfg.eta)?;
                    selectors = SelectorMap::from_model(&model, inst);
                    deployed_regret = None;
                    refits += 1;
                }
                Err(e) => {
                    abort_reason = Some(format!("fit failed at round {round}: {e}"));
                    break;
                }
            }
            next_refit = schedule.next().unwrap_or(usize::MAX);
        }
    }

    let mut summary = summarize(&trace, cfg.horizon);
    summary.refit_count = refits;
    summary.abort_reason = abort_reason;
    Ok(OnlineRun {
        trace,
        summary,
        fit_log,
        evals,
        final_model: model,
    })
}

/// Checkpoint rounds: every tenth of the horizon.
pub fn checkpoint_rounds(horizon: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=10).map(|k| k * horizon / 10).filter(|&r| r > 0).collect();
    out.dedup();
    out
}

/// Summary statistics of a trace over a planned horizon (the trace may be shorter if the
/// run aborted). `refit_count` counts refit flags in the trace.
pub fn summarize(trace: &RegretTrace, horizon: usize) -> OnlineRunSummary {
    let mut g_at_checkpoints = BTreeMap::new();
    for r in checkpoint_rounds(horizon) {
        if let Some(rec) = trace.records.get(r - 1) {
            g_at_checkpoints.insert(r, rec.cumulative);
        }
    }
    let positives = trace.records.iter().filter(|r| r.one_step_regret > 0.0);
    let last_positive_round = positives.clone().map(|r| r.round).max().unwrap_or(0);
    let n_pos = positives.count();
    OnlineRunSummary {
        schema_version: SCHEMA_VERSION,
        horizon,
        rounds_completed: trace.len(),
        g_at_checkpoints,
        final_cumulative: trace.cumulative(),
        last_positive_round,
        substantial_fraction: n_pos as f64 / horizon.max(1) as f64,
        refit_count: trace.records.iter().filter(|r| r.refit_occurred).count(),
        tail_fraction: tail_fraction(trace),
        abort_reason: None,
    }
}

/// `(G_T − G_{T/2}) / G_T`, 0 when no regret was accrued.
pub fn tail_fraction(trace: &RegretTrace) -> f64 {
    let total = trace.cumulative();
    if total <= 0.0 {
        return 0.0;
    }
    let half = trace.len() / 2;
    let at_half = if half == 0 { 0.0 } else { trace.records[half - 1].cumulative };
    (total - at_half) / total
}

/// Regression of cumulative regret on `ln t` over rounds `t ∈ [T/10, T]`.
pub fn log_t_fit(trace: &RegretTrace) -> Option<LinearFit> {
    let n = trace.len();
    let start = (n / 10).max(1);
    let (xs, ys): (Vec<f64>, Vec<f64>) = trace.records[start - 1..]
        .iter()
        .map(|r| ((r.round as f64).ln(), r.cumulative))
        .unzip();
    linear_fit(&xs, &ys)
}

pub fn write_rows_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
