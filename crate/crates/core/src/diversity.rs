//! User-head diversity: the head second-moment spectrum and the hard-subset DRD score.
//!
//! DRD contracts the centered covariance of the true heads against the average outer
//! product of best-minus-runner-up representation differences over the hardest pairs
//! (smallest true top-two gaps). It is zero when all users share one head and scales
//! quadratically with a uniform rescaling of the heads.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{pair_gaps, ProblemInstance};
use crate::io::SCHEMA_VERSION;

pub const DEFAULT_HARD_FRACTION: f64 = 0.10;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Normalizer of the head covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovDivisor {
    /// Divide by `U`.
    #[default]
    Population,
    /// Divide by `U - 1`.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub schema_version: u32,
    /// Eigenvalues of the head second-moment matrix, descending.
    pub g_lambda_eigs: Vec<f64>,
    pub min_eig: f64,
    pub numerical_rank: usize,
    pub drd: f64,
    pub drd_scale_free: f64,
    pub hard_fraction: f64,
    pub hard_pairs: usize,
    pub rank_tol: f64,
    pub cov_divisor: CovDivisor,
    pub verdict_full_rank: bool,
}

/// `Σ_i ρ_i λ_i λ_iᵀ`.
pub fn head_second_moment(heads: &DMatrix<f64>, user_dist: &[f64]) -> Result<DMatrix<f64>> {
    if heads.ncols() != user_dist.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} heads but {} user weights",
            heads.ncols(),
            user_dist.len()
        )));
    }
    let scaled = DMatrix::from_fn(heads.nrows(), heads.ncols(), |j, i| heads[(j, i)] * user_dist[i]);
    let g = scaled * heads.transpose();
    Ok((&g + g.transpose()) * 0.5)
}

/// Centered covariance of the head columns, computed from pairwise differences
/// (`Σ_{i<k} (λ_i − λ_k)(λ_i − λ_k)ᵀ / U²` for the population form) so identical heads
/// give exactly zero.
pub fn head_covariance(heads: &DMatrix<f64>, divisor: CovDivisor) -> DMatrix<f64> {
    let (dim_j, u) = heads.shape();
    let mut c = DMatrix::zeros(dim_j, dim_j);
    for i in 0..u {
        for k in i + 1..u {
            let diff = heads.column(i) - heads.column(k);
            c += &diff * diff.transpose();
        }
    }
    let denom = match divisor {
        CovDivisor::Population => (u * u) as f64,
        CovDivisor::Sample => (u * u.max(2).saturating_sub(1)) as f64,
    };
    c / denom
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut e: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}

/// True representation features `(xᵀ W_j a)_j` of one bank entry.
fn true_features(inst: &ProblemInstance, user: usize, context: usize, action: usize) -> DVector<f64> {
    let d = inst.dim_d;
    let x = inst.contexts[user].row(context);
    let a = inst.actions[user].row(action);
    DVector::from_fn(inst.dim_j, |j, _| {
        let mut s = 0.0;
        for p in 0..d {
            for q in 0..d {
                s += x[p] * inst.w_true[(j, p * d + q)] * a[q];
            }
        }
        s
    })
}

/// Average of `Δφ Δφᵀ` over the hardest `⌈hard_fraction · #pairs⌉` pairs, with the
/// number of pairs used.
pub fn hard_subset_matrix(inst: &ProblemInstance, hard_fraction: f64) -> Result<(DMatrix<f64>, usize)> {
    if !(hard_fraction > 0.0 && hard_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("hard_fraction must lie in (0, 1], got {hard_fraction}")));
    }
    if let Some(user) = (0..inst.num_users).find(|&u| inst.n_act(u) < 2) {
        return Err(Error::DegenerateBank { user });
    }
    let mut gaps = pair_gaps(inst);
    // stable sort keeps pair order on ties
    gaps.sort_by(|a, b| a.gap.total_cmp(&b.gap));
    let k = ((hard_fraction * gaps.len() as f64).ceil() as usize).clamp(1, gaps.len());
    let mut h = DMatrix::zeros(inst.dim_j, inst.dim_j);
    for g in &gaps[..k] {
        let diff = true_features(inst, g.user, g.context, g.best) - true_features(inst, g.user, g.context, g.second);
        h += &diff * diff.transpose();
    }
    Ok((h / k as f64, k))
}

pub fn drd(inst: &ProblemInstance, hard_fraction: f64) -> Result<DiversityReport> {
    drd_with(inst, hard_fraction, CovDivisor::Population, DEFAULT_RANK_TOL)
}

pub fn drd_with(
    inst: &ProblemInstance,
    hard_fraction: f64,
    divisor: CovDivisor,
    rank_tol: f64,
) -> Result<DiversityReport> {
    let (h, hard_pairs) = hard_subset_matrix(inst, hard_fraction)?;
    let cov = head_covariance(&inst.heads_true, divisor);
    let drd = (cov * h).trace().max(0.0);
    let g = head_second_moment(&inst.heads_true, &inst.user_dist)?;
    let eigs = sorted_eigs(&g);
    let max_eig = eigs.first().copied().unwrap_or(0.0);
    let min_eig = eigs.last().copied().unwrap_or(0.0);
    let numerical_rank = eigs.iter().filter(|&&e| e > rank_tol * max_eig).count();
    let mut report = DiversityReport {
        schema_version: SCHEMA_VERSION,
        g_lambda_eigs: eigs,
        min_eig,
        numerical_rank,
        drd,
        drd_scale_free: drd / (inst.head_scale * inst.head_scale),
        hard_fraction,
        hard_pairs,
        rank_tol,
        cov_divisor: divisor,
        verdict_full_rank: false,
    };
    report.verdict_full_rank = diversity_verdict(&report, rank_tol);
    Ok(report)
}

/// Sufficient-condition check: the head second moment is numerically full rank.
pub fn diversity_verdict(report: &DiversityReport, rank_tol: f64) -> bool {
    let max_eig = report.g_lambda_eigs.first().copied().unwrap_or(0.0);
    max_eig > 0.0 && report.min_eig > rank_tol * max_eig
}
