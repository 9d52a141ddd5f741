//! Reference and KL-tilted sampling policies, slate construction and label draws.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::score::{mnl_probs, RewardModel};

pub type Slate = SmallVec<[usize; 4]>;

/// Weights proportional to `exp(eta * score)` (uniform reference times the tilt).
pub fn tilted_weights_from_scores(scores: &[f64], eta: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyBank);
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (eta * (s - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    Ok(w)
}

pub fn tilted_weights(
    model: &RewardModel,
    user: usize,
    context: &[f64],
    bank: &DMatrix<f64>,
    eta: f64,
) -> Result<Vec<f64>> {
    let scores = model.bank_scores(user, context, bank)?;
    tilted_weights_from_scores(&scores, eta)
}

/// The greedy tilted policy of one deployed model over an instance's banks. Weight vectors
/// are computed on first use per (user, context) and kept until the policy is replaced.
#[derive(Debug, Clone)]
pub struct TiltedPolicy {
    pub eta: f64,
    pub model: RewardModel,
    tables: Vec<DMatrix<f64>>,
    cache: Vec<Vec<Option<Vec<f64>>>>,
}

impl TiltedPolicy {
    pub fn new(model: RewardModel, inst: &ProblemInstance, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
        }
        model.check_compatible(inst)?;
        let tables = model.score_table(inst);
        let cache = (0..inst.num_users).map(|u| vec![None; inst.n_ctx(u)]).collect();
        Ok(Self {
            eta,
            model,
            tables,
            cache,
        })
    }

    pub fn scores(&self, user: usize, context: usize) -> Vec<f64> {
        self.tables[user].row(context).iter().copied().collect()
    }

    pub fn weights(&mut self, user: usize, context: usize) -> &[f64] {
        let slot = &mut self.cache[user][context];
        if slot.is_none() {
            let scores: Vec<f64> = self.tables[user].row(context).iter().copied().collect();
            *slot = Some(
                tilted_weights_from_scores(&scores, self.eta)
                    .expect("bank and eta validated at construction"),
            );
        }
        slot.as_deref().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SlateMode {
    /// Two actions: the first from the tilted policy, the second uniform.
    #[default]
    TiltedUniform,
    /// `k` actions drawn i.i.d. from the tilted policy.
    IidTilted { k: usize },
}

impl SlateMode {
    pub fn slate_size(&self) -> usize {
        match *self {
            SlateMode::TiltedUniform => 2,
            SlateMode::IidTilted { k } => k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slate_size() < 2 {
            return Err(Error::InvalidMode(format!("slate size {} (need >= 2)", self.slate_size())));
        }
        Ok(())
    }
}

fn draw_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<usize> {
    if weights.len() == 1 {
        return Ok(0);
    }
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::NumericalFailure(format!("invalid sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Draws a slate of indices into a bank of `weights.len()` actions. Indices may repeat.
pub fn sample_online_slate<R: Rng + ?Sized>(
    weights: &[f64],
    rng: &mut R,
    mode: SlateMode,
) -> Result<Slate> {
    mode.validate()?;
    if weights.is_empty() {
        return Err(Error::EmptyBank);
    }
    let n = weights.len();
    let mut slate = Slate::new();
    match mode {
        SlateMode::TiltedUniform => {
            slate.push(draw_weighted(weights, rng)?);
            slate.push(rng.random_range(0..n));
        }
        SlateMode::IidTilted { k } => {
            for _ in 0..k {
                slate.push(draw_weighted(weights, rng)?);
            }
        }
    }
    Ok(slate)
}

/// Categorical draw from the MNL law of the truth scores on a slate.
pub fn sample_choice<R: Rng + ?Sized>(truth_scores: &[f64], rng: &mut R) -> usize {
    let p = mnl_probs(truth_scores);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}
