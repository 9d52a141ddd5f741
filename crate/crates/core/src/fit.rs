//! Empirical MNL risk minimization over the bilinear shared-representation class.
//!
//! The objective is
//!
//! ```text
//! L(W, Λ) = (1/t) Σ_s [ log Σ_k exp(R(x_s, a_{s,k}, i_s)) − R(x_s, a_{s,y_s}, i_s) ]
//!           + (ridge / 2) (‖W‖² + ‖Λ‖²)
//! ```
//!
//! Every evaluation first materializes the per-user score tables `X_i V_i A_iᵀ`, where
//! `V_i = Σ_j λ_{j,i} W_j`; a record then costs a table lookup and a log-sum-exp. Gradients
//! flow back through the same tables: with `dS_i` the accumulated score residuals of user
//! `i`, the gradient of the effective form is `M_i = X_iᵀ dS_i A_i`, which feeds both the
//! representation gradient `Λ G` and the head gradient `W Gᵀ` (rows of `G` are `vec(M_i)/t`).
//!
//! The optimizer alternates a per-user Newton step on the heads (with per-user
//! backtracking) and a full-batch gradient step on the representation with Armijo
//! backtracking, stopping at the iteration caps or when the relative objective decrease of
//! an outer iteration falls below the tolerance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;
use crate::score::RewardModel;

/// One logged interaction: a user, a context index into that user's bank, a slate of
/// action indices into that user's action bank, and the position chosen within the slate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub user: usize,
    pub context: usize,
    pub slate: SmallVec<[usize; 4]>,
    pub chosen: usize,
}

impl PreferenceRecord {
    pub fn new(user: usize, context: usize, slate: &[usize], chosen: usize) -> Self {
        Self {
            user,
            context,
            slate: SmallVec::from_slice(slate),
            chosen,
        }
    }
}

pub fn validate_records(data: &[PreferenceRecord], inst: &ProblemInstance) -> Result<()> {
    for r in data {
        let oob = |index, len| Error::IndexOutOfRange { index, len };
        if r.user >= inst.num_users {
            return Err(oob(r.user, inst.num_users));
        }
        if r.context >= inst.n_ctx(r.user) {
            return Err(oob(r.context, inst.n_ctx(r.user)));
        }
        if r.slate.len() < 2 {
            return Err(Error::InvalidMode(format!("slate of size {} (need >= 2)", r.slate.len())));
        }
        if r.chosen >= r.slate.len() {
            return Err(oob(r.chosen, r.slate.len()));
        }
        let n_act = inst.n_act(r.user);
        if let Some(&a) = r.slate.iter().find(|&&a| a >= n_act) {
            return Err(oob(a, n_act));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RepStepRule {
    #[default]
    BacktrackingArmijo,
}

/// Where the ridge penalty attaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RidgeScaling {
    /// Penalty on the summed negative log-likelihood; on the averaged objective the
    /// coefficient is `ridge / t`.
    #[default]
    Summed,
    /// Penalty on the averaged loss with coefficient `ridge` at every sample size.
    PerRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub ridge: f64,
    pub ridge_scaling: RidgeScaling,
    pub max_rep_updates: usize,
    pub max_head_updates: usize,
    pub tolerance: f64,
    pub rep_step_rule: RepStepRule,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-3,
            ridge_scaling: RidgeScaling::Summed,
            max_rep_updates: 40,
            max_head_updates: 25,
            tolerance: 1e-9,
            rep_step_rule: RepStepRule::BacktrackingArmijo,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidConfig("ridge must be nonnegative".into()));
        }
        if self.max_rep_updates == 0 || self.max_head_updates == 0 {
            return Err(Error::InvalidConfig("iteration caps must be at least 1".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Penalty coefficient on the averaged objective for `t` records.
    pub fn effective_ridge(&self, t: usize) -> f64 {
        match self.ridge_scaling {
            RidgeScaling::Summed => self.ridge / t.max(1) as f64,
            RidgeScaling::PerRecord => self.ridge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub final_objective: f64,
    pub iterations_used: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective after initialization and after every outer iteration.
    pub objective_history: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 50;
const HEAD_BACKTRACKS: usize = 30;

struct Problem<'a> {
    inst: &'a ProblemInstance,
    data: &'a [PreferenceRecord],
    ridge: f64,
    t: f64,
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of one record and, optionally, the score residuals `p_k − 1[k = y]`.
#[inline]
fn record_loss(scores: &[f64], chosen: usize, residuals: Option<&mut [f64]>) -> f64 {
    if scores.len() == 2 {
        let other = 1 - chosen;
        let z = scores[other] - scores[chosen];
        if let Some(r) = residuals {
            let p_other = sigmoid(z);
            r[other] = p_other;
            r[chosen] = -p_other;
        }
        return softplus(z);
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores {
        z += (s - m).exp();
    }
    let lse = m + z.ln();
    if let Some(r) = residuals {
        for (k, s) in scores.iter().enumerate() {
            r[k] = (s - lse).exp() - if k == chosen { 1.0 } else { 0.0 };
        }
    }
    lse - scores[chosen]
}

impl<'a> Problem<'a> {
    fn new(inst: &'a ProblemInstance, data: &'a [PreferenceRecord], ridge: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        validate_records(data, inst)?;
        Ok(Self {
            inst,
            data,
            ridge,
            t: data.len() as f64,
        })
    }

    fn penalty(&self, model: &RewardModel) -> f64 {
        0.5 * self.ridge * (model.w_hat.norm_squared() + model.heads_hat.norm_squared())
    }

    /// Per-user sums of record losses (not divided by t).
    fn user_losses(&self, tables: &[DMatrix<f64>], active: Option<&[bool]>) -> Vec<f64> {
        let mut out = vec![0.0; self.inst.num_users];
        let mut scores: SmallVec<[f64; 4]> = SmallVec::new();
        for r in self.data {
            if let Some(act) = active {
                if !act[r.user] {
                    continue;
                }
            }
            let table = &tables[r.user];
            scores.clear();
            scores.extend(r.slate.iter().map(|&a| table[(r.context, a)]));
            out[r.user] += record_loss(&scores, r.chosen, None);
        }
        out
    }

    fn objective(&self, model: &RewardModel) -> f64 {
        let tables = model.score_table(self.inst);
        self.user_losses(&tables, None).iter().sum::<f64>() / self.t + self.penalty(model)
    }

    /// Objective plus the gradient matrix `G` (U x d², rows `vec(M_i)/t`).
    fn loss_and_effective_gradient(&self, model: &RewardModel) -> (f64, DMatrix<f64>) {
        let inst = self.inst;
        let tables = model.score_table(inst);
        let mut dscore: Vec<DMatrix<f64>> = tables
            .iter()
            .map(|t| DMatrix::zeros(t.nrows(), t.ncols()))
            .collect();
        let mut total = 0.0;
        let mut scores: SmallVec<[f64; 4]> = SmallVec::new();
        let mut resid: SmallVec<[f64; 4]> = SmallVec::new();
        for r in self.data {
            let table = &tables[r.user];
            scores.clear();
            scores.extend(r.slate.iter().map(|&a| table[(r.context, a)]));
            resid.clear();
            resid.resize(scores.len(), 0.0);
            total += record_loss(&scores, r.chosen, Some(&mut resid));
            let ds = &mut dscore[r.user];
            for (k, &a) in r.slate.iter().enumerate() {
                ds[(r.context, a)] += resid[k];
            }
        }
        let d = inst.dim_d;
        let mut g = DMatrix::zeros(inst.num_users, d * d);
        for i in 0..inst.num_users {
            let m = inst.contexts[i].transpose() * &dscore[i] * &inst.actions[i];
            for p in 0..d {
                for q in 0..d {
                    g[(i, p * d + q)] = m[(p, q)] / self.t;
                }
            }
        }
        (total / self.t + self.penalty(model), g)
    }

    /// Objective with its gradients with respect to `w_hat` and `heads_hat`.
    fn gradient(&self, model: &RewardModel) -> (f64, DMatrix<f64>, DMatrix<f64>) {
        let (obj, g) = self.loss_and_effective_gradient(model);
        let grad_w = &model.heads_hat * &g + &model.w_hat * self.ridge;
        let grad_heads = &model.w_hat * g.transpose() + &model.heads_hat * self.ridge;
        (obj, grad_w, grad_heads)
    }

    /// `phi(x_c, a)` for every bank entry, laid out `[user][(c * n_act + a) * J + j]`.
    fn feature_table(&self, model: &RewardModel) -> Vec<Vec<f64>> {
        let dim_j = model.dim_j();
        let ws: Vec<DMatrix<f64>> = (0..dim_j).map(|j| model.w_matrix(j)).collect();
        (0..self.inst.num_users)
            .map(|i| {
                let x = &self.inst.contexts[i];
                let a = &self.inst.actions[i];
                let (nc, na) = (x.nrows(), a.nrows());
                let mut out = vec![0.0; nc * na * dim_j];
                for (j, w) in ws.iter().enumerate() {
                    let phi = x * w * a.transpose();
                    for c in 0..nc {
                        for k in 0..na {
                            out[(c * na + k) * dim_j + j] = phi[(c, k)];
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// One damped Newton step on every user head. Returns the new objective.
    fn head_newton_step(&self, model: &mut RewardModel) -> Result<f64> {
        let inst = self.inst;
        let dim_j = model.dim_j();
        let n_users = inst.num_users;
        let features = self.feature_table(model);
        let tables = model.score_table(inst);

        let mut grad = vec![DVector::<f64>::zeros(dim_j); n_users];
        let mut hess = vec![DMatrix::<f64>::zeros(dim_j, dim_j); n_users];
        let mut losses = vec![0.0; n_users];
        let mut scores: SmallVec<[f64; 4]> = SmallVec::new();
        let mut resid: SmallVec<[f64; 4]> = SmallVec::new();
        let mut diff = vec![0.0; dim_j];
        let mut mean_phi = vec![0.0; dim_j];
        for r in self.data {
            let table = &tables[r.user];
            scores.clear();
            scores.extend(r.slate.iter().map(|&a| table[(r.context, a)]));
            resid.clear();
            resid.resize(scores.len(), 0.0);
            losses[r.user] += record_loss(&scores, r.chosen, Some(&mut resid));
            let feats = &features[r.user];
            let na = inst.n_act(r.user);
            let phi = |a: usize| {
                let off = (r.context * na + a) * dim_j;
                &feats[off..off + dim_j]
            };
            let g = &mut grad[r.user];
            let h = &mut hess[r.user];
            for (k, &a) in r.slate.iter().enumerate() {
                let f = phi(a);
                for j in 0..dim_j {
                    g[j] += resid[k] * f[j];
                }
            }
            if r.slate.len() == 2 {
                // p(1-p) (phi_1 - phi_2)(phi_1 - phi_2)^T
                let q = resid[0].abs();
                let w = q * (1.0 - q);
                let (f0, f1) = (phi(r.slate[0]), phi(r.slate[1]));
                for j in 0..dim_j {
                    diff[j] = f0[j] - f1[j];
                }
                for a in 0..dim_j {
                    let wa = w * diff[a];
                    for b in a..dim_j {
                        h[(a, b)] += wa * diff[b];
                    }
                }
            } else {
                mean_phi.iter_mut().for_each(|v| *v = 0.0);
                for (k, &a) in r.slate.iter().enumerate() {
                    let pk = resid[k] + if k == r.chosen { 1.0 } else { 0.0 };
                    let f = phi(a);
                    for j in 0..dim_j {
                        mean_phi[j] += pk * f[j];
                    }
                    for x in 0..dim_j {
                        let px = pk * f[x];
                        for y in x..dim_j {
                            h[(x, y)] += px * f[y];
                        }
                    }
                }
                for x in 0..dim_j {
                    for y in x..dim_j {
                        h[(x, y)] -= mean_phi[x] * mean_phi[y];
                    }
                }
            }
        }

        let w_penalty = 0.5 * self.ridge * model.w_hat.norm_squared();
        let mut steps: Vec<Option<DVector<f64>>> = Vec::with_capacity(n_users);
        let mut user_obj = vec![0.0; n_users];
        for i in 0..n_users {
            let head = model.heads_hat.column(i).into_owned();
            user_obj[i] = losses[i] / self.t + 0.5 * self.ridge * head.norm_squared();
            let mut a = hess[i].clone();
            for x in 0..dim_j {
                for y in 0..x {
                    a[(x, y)] = a[(y, x)];
                }
            }
            a /= self.t;
            for x in 0..dim_j {
                a[(x, x)] += self.ridge;
            }
            let b = &grad[i] / self.t + &head * self.ridge;
            if b.iter().all(|v| *v == 0.0) {
                steps.push(None);
                continue;
            }
            steps.push(solve_spd(a, &b));
        }

        let mut pending: Vec<bool> = steps.iter().map(Option::is_some).collect();
        let mut alpha = 1.0;
        let base = model.heads_hat.clone();
        for _ in 0..HEAD_BACKTRACKS {
            if !pending.iter().any(|p| *p) {
                break;
            }
            let mut trial = model.clone();
            for i in 0..n_users {
                if let (true, Some(step)) = (pending[i], &steps[i]) {
                    let col = base.column(i) - step * alpha;
                    trial.heads_hat.set_column(i, &col);
                }
            }
            let trial_tables: Vec<DMatrix<f64>> = (0..n_users)
                .map(|i| {
                    if pending[i] {
                        trial.user_score_table(inst, i)
                    } else {
                        DMatrix::zeros(0, 0)
                    }
                })
                .collect();
            let trial_losses = self.user_losses(&trial_tables, Some(&pending));
            for i in 0..n_users {
                if !pending[i] {
                    continue;
                }
                let obj = trial_losses[i] / self.t
                    + 0.5 * self.ridge * trial.heads_hat.column(i).norm_squared();
                if obj.is_finite() && obj <= user_obj[i] {
                    model.heads_hat.set_column(i, &trial.heads_hat.column(i));
                    user_obj[i] = obj;
                    pending[i] = false;
                }
            }
            alpha *= 0.5;
        }
        Ok(user_obj.iter().sum::<f64>() + w_penalty)
    }

    /// One Armijo-backtracked gradient step on the representation. Returns the new objective.
    fn rep_step(&self, model: &mut RewardModel) -> f64 {
        let (obj, grad_w, _) = self.gradient(model);
        let g2 = grad_w.norm_squared();
        if g2 == 0.0 || !g2.is_finite() {
            return obj;
        }
        let mut alpha = 1.0;
        let mut trial = model.clone();
        for _ in 0..MAX_HALVINGS {
            trial.w_hat = &model.w_hat - &grad_w * alpha;
            let f = self.objective(&trial);
            if f.is_finite() && f <= obj - ARMIJO_C * alpha * g2 {
                model.w_hat = trial.w_hat;
                return f;
            }
            alpha *= 0.5;
        }
        obj
    }
}

/// Cholesky solve with a jitter fallback for numerically singular systems.
fn solve_spd(mut a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|k| a[(k, k)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(ch) = a.clone().cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        let next = if jitter == 0.0 { scale * 1e-12 } else { jitter * 100.0 };
        for k in 0..n {
            a[(k, k)] += next - jitter;
        }
        jitter = next;
    }
    None
}

/// Regularized empirical MNL risk of `model` on `data`.
pub fn empirical_loss(
    model: &RewardModel,
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    ridge: f64,
) -> Result<f64> {
    model.check_compatible(inst)?;
    Ok(Problem::new(inst, data, ridge)?.objective(model))
}

/// Objective and analytic gradients `(∂/∂w_hat, ∂/∂heads_hat)`.
pub fn objective_gradient(
    model: &RewardModel,
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    ridge: f64,
) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
    model.check_compatible(inst)?;
    Ok(Problem::new(inst, data, ridge)?.gradient(model))
}

/// Gradient of the unregularized loss at the zero model with respect to a free per-user
/// bilinear parameter, one row `vec(B_i)` per user (U x d²).
pub fn zero_model_gradient(data: &[PreferenceRecord], inst: &ProblemInstance) -> Result<DMatrix<f64>> {
    let problem = Problem::new(inst, data, 0.0)?;
    let zero = RewardModel::zeros(inst.dim_d, 1, inst.num_users);
    Ok(problem.loss_and_effective_gradient(&zero).1)
}

/// Rank-`rank_j` factorization `G ≈ headsᵀ · rep` with `rep` rows orthonormal: `rep` holds
/// the leading right singular vectors of `G` (eigenvectors of `GᵀG`, completed to an
/// orthonormal basis) and `heads = (G repᵀ)ᵀ` carries the singular values. Rows beyond
/// `d²` are zero.
pub fn factor_gradient(g: &DMatrix<f64>, rank_j: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let dd = g.ncols();
    let gram = g.transpose() * g;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..dd).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut rep = DMatrix::zeros(rank_j, dd);
    for (j, &k) in order.iter().take(rank_j).enumerate() {
        let v = eig.eigenvectors.column(k);
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for c in 0..dd {
            rep[(j, c)] = sign * v[c];
        }
    }
    let heads = (g * rep.transpose()).transpose();
    (heads, rep)
}

/// Gradient-SVD initializer: factor the zero-model gradient at rank `rank_j`, then scale
/// the heads along the descent direction by a one-dimensional line search on the
/// regularized objective.
pub fn init_gradient_svd(
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    rank_j: usize,
    ridge: f64,
) -> Result<RewardModel> {
    if rank_j == 0 {
        return Err(Error::InvalidConfig("rank must be positive".into()));
    }
    let problem = Problem::new(inst, data, ridge)?;
    let zero = RewardModel::zeros(inst.dim_d, 1, inst.num_users);
    let g = problem.loss_and_effective_gradient(&zero).1;
    let (heads, rep) = factor_gradient(&g, rank_j);
    let at = |alpha: f64| RewardModel {
        dim_d: inst.dim_d,
        w_hat: rep.clone(),
        heads_hat: &heads * (-alpha),
    };
    let f = |alpha: f64| problem.objective(&at(alpha));
    let alpha = line_search_positive(f);
    if alpha == 0.0 {
        // No descent along the gradient: the zero model is the better start.
        return Ok(RewardModel::zeros(inst.dim_d, rank_j, inst.num_users));
    }
    let mut model = at(alpha);
    balance_gauge(&mut model);
    Ok(model)
}

/// Rescales each pair (representation row `j`, head row `j`) by `(c_j, 1/c_j)` so both have
/// equal norm. Scores are unchanged and the squared-norm penalty cannot increase. Rows with
/// a zero factor are left alone. Returns the decrease of `‖w‖² + ‖heads‖²`.
pub fn balance_gauge(model: &mut RewardModel) -> f64 {
    let mut decrease = 0.0;
    for j in 0..model.dim_j() {
        let nw = model.w_hat.row(j).norm();
        let nh = model.heads_hat.row(j).norm();
        if nw == 0.0 || nh == 0.0 {
            continue;
        }
        let c = (nh / nw).sqrt();
        model.w_hat.row_mut(j).scale_mut(c);
        model.heads_hat.row_mut(j).scale_mut(1.0 / c);
        decrease += (nw * nw + nh * nh - 2.0 * nw * nh).max(0.0);
    }
    decrease
}

/// Minimizes a convex function of `alpha >= 0` by bracketing then golden-section search.
fn line_search_positive(f: impl Fn(f64) -> f64) -> f64 {
    let f0 = f(0.0);
    let mut a = 1.0;
    let mut fa = f(a);
    if fa < f0 {
        for _ in 0..60 {
            let f2 = f(2.0 * a);
            if !(f2 < fa) {
                break;
            }
            a *= 2.0;
            fa = f2;
        }
    } else {
        let mut found = false;
        for _ in 0..60 {
            a *= 0.5;
            fa = f(a);
            if fa < f0 {
                found = true;
                break;
            }
        }
        if !found {
            return 0.0;
        }
    }
    let (mut lo, mut hi) = (0.5 * a, 2.0 * a);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let (mut best, mut fbest) = (a, fa);
    for _ in 0..30 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
        for (x, fx) in [(x1, f1), (x2, f2)] {
            if fx < fbest {
                best = x;
                fbest = fx;
            }
        }
    }
    best
}

/// Fits a rank-`J` model, where `J = inst.dim_j`, minimizing the averaged loss plus
/// `cfg.effective_ridge(t)` times half the squared parameter norm. Warm-starts from `warm_start` when
/// given and from the gradient-SVD initializer otherwise.
pub fn fit(
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    cfg: &FitConfig,
    warm_start: Option<&RewardModel>,
) -> Result<(RewardModel, FitReport)> {
    fit_rank(data, inst, inst.dim_j, cfg, warm_start)
}

pub fn fit_rank(
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    rank_j: usize,
    cfg: &FitConfig,
    warm_start: Option<&RewardModel>,
) -> Result<(RewardModel, FitReport)> {
    cfg.validate()?;
    let ridge = cfg.effective_ridge(data.len());
    let problem = Problem::new(inst, data, ridge)?;
    let mut model = match warm_start {
        Some(m) => {
            m.check_compatible(inst)?;
            m.clone()
        }
        None => init_gradient_svd(data, inst, rank_j, ridge)?,
    };
    let mut obj = problem.objective(&model);
    if !obj.is_finite() {
        return Err(Error::NumericalFailure(format!("initial objective is {obj}")));
    }
    let mut history = vec![obj];
    let mut converged = false;
    let outer = cfg.max_rep_updates.max(cfg.max_head_updates);
    let mut iterations = 0;
    for it in 0..outer {
        let prev = obj;
        if it < cfg.max_head_updates {
            obj = problem.head_newton_step(&mut model)?;
        }
        if it < cfg.max_rep_updates {
            match cfg.rep_step_rule {
                RepStepRule::BacktrackingArmijo => obj = problem.rep_step(&mut model),
            }
        }
        if ridge > 0.0 {
            obj -= 0.5 * ridge * balance_gauge(&mut model);
        }
        iterations = it + 1;
        if !obj.is_finite() || !model.is_finite() {
            return Err(Error::NumericalFailure(format!("objective became {obj} at iteration {iterations}")));
        }
        history.push(obj);
        if prev - obj <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let (final_obj, gw, gh) = problem.gradient(&model);
    let report = FitReport {
        final_objective: final_obj,
        iterations_used: iterations,
        converged,
        grad_norm: (gw.norm_squared() + gh.norm_squared()).sqrt(),
        objective_history: history,
    };
    Ok((model, report))
}

/// Heads-only fit with a frozen representation; used to probe the Newton step in isolation.
pub fn fit_heads_only(
    data: &[PreferenceRecord],
    inst: &ProblemInstance,
    mut model: RewardModel,
    cfg: &FitConfig,
) -> Result<(RewardModel, FitReport)> {
    cfg.validate()?;
    model.check_compatible(inst)?;
    let problem = Problem::new(inst, data, cfg.effective_ridge(data.len()))?;
    let mut obj = problem.objective(&model);
    let mut history = vec![obj];
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..cfg.max_head_updates {
        let prev = obj;
        obj = problem.head_newton_step(&mut model)?;
        history.push(obj);
        iterations = it + 1;
        if prev - obj <= cfg.tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    let (final_obj, _, gh) = problem.gradient(&model);
    Ok((
        model,
        FitReport {
            final_objective: final_obj,
            iterations_used: iterations,
            converged,
            grad_norm: gh.norm(),
            objective_history: history,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaugeFixed {
    pub model: RewardModel,
    pub rank_deficient: bool,
}

/// Re-expresses the model with orthonormal representation rows (`w = R̃ᵀ Q̃ᵀ` by QR of
/// `wᵀ`, heads absorb `R̃`), leaving every score unchanged.
pub fn gauge_fix(model: &RewardModel) -> GaugeFixed {
    let dim_j = model.dim_j();
    let dd = model.w_hat.ncols();
    let qr = model.w_hat.transpose().qr();
    let mut q = qr.q(); // dd x m
    let mut r = qr.r(); // m x J
    let m = r.nrows();
    for k in 0..m {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
            r.row_mut(k).neg_mut();
        }
    }
    let max_diag = (0..m).map(|k| r[(k, k)].abs()).fold(0.0, f64::max);
    let rank_deficient = m < dim_j || (0..m).any(|k| r[(k, k)].abs() <= 1e-12 * max_diag.max(1e-300));
    let mut w_hat = DMatrix::zeros(dim_j, dd);
    let mut heads_hat = DMatrix::zeros(dim_j, model.num_users());
    let new_heads = &r * &model.heads_hat;
    for k in 0..m {
        w_hat.set_row(k, &q.column(k).transpose());
        heads_hat.set_row(k, &new_heads.row(k));
    }
    GaugeFixed {
        model: RewardModel {
            dim_d: model.dim_d,
            w_hat,
            heads_hat,
        },
        rank_deficient,
    }
}
