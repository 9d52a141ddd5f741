//! Bilinear scores and multinomial-logit choice laws.
//!
//! A [`RewardModel`] scores action `a` for user `i` in context `x` as
//! `sum_j heads[j, i] * (x^T W_j a)`. The representation matrices `W_j` are stored as the
//! rows of `w_hat`, each row being the row-major flattening of a `d x d` matrix, so the
//! whole representation is a `J x d^2` matrix and the per-user effective bilinear form is
//! `w_hat^T * heads[:, i]`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::instance::ProblemInstance;

#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub dim_d: usize,
    /// `J x d^2`; row `j` is `vec(W_j)` in row-major order.
    pub w_hat: DMatrix<f64>,
    /// `J x U`; column `i` is the head of user `i`.
    pub heads_hat: DMatrix<f64>,
}

impl RewardModel {
    pub fn zeros(dim_d: usize, dim_j: usize, num_users: usize) -> Self {
        Self {
            dim_d,
            w_hat: DMatrix::zeros(dim_j, dim_d * dim_d),
            heads_hat: DMatrix::zeros(dim_j, num_users),
        }
    }

    /// Builds a model from explicit `d x d` representation matrices.
    pub fn from_matrices(w: &[DMatrix<f64>], heads: DMatrix<f64>) -> Result<Self> {
        let dim_j = w.len();
        if dim_j == 0 || heads.nrows() != dim_j {
            return Err(Error::DimensionMismatch(format!(
                "{} representation matrices but heads have {} rows",
                dim_j,
                heads.nrows()
            )));
        }
        let d = w[0].nrows();
        let mut w_hat = DMatrix::zeros(dim_j, d * d);
        for (j, wj) in w.iter().enumerate() {
            if wj.nrows() != d || wj.ncols() != d {
                return Err(Error::DimensionMismatch(format!("W_{j} is not {d}x{d}")));
            }
            for p in 0..d {
                for q in 0..d {
                    w_hat[(j, p * d + q)] = wj[(p, q)];
                }
            }
        }
        Ok(Self {
            dim_d: d,
            w_hat,
            heads_hat: heads,
        })
    }

    pub fn dim_j(&self) -> usize {
        self.w_hat.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.heads_hat.ncols()
    }

    /// The `d x d` matrix `W_j`.
    pub fn w_matrix(&self, j: usize) -> DMatrix<f64> {
        let d = self.dim_d;
        DMatrix::from_fn(d, d, |p, q| self.w_hat[(j, p * d + q)])
    }

    /// Effective bilinear form `V_i = sum_j heads[j, i] W_j` of one user.
    pub fn user_bilinear(&self, user: usize) -> DMatrix<f64> {
        let d = self.dim_d;
        let flat = self.w_hat.tr_mul(&self.heads_hat.column(user));
        DMatrix::from_fn(d, d, |p, q| flat[p * d + q])
    }

    pub fn is_finite(&self) -> bool {
        self.w_hat.iter().chain(self.heads_hat.iter()).all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, inst: &ProblemInstance) -> Result<()> {
        if self.dim_d != inst.dim_d
            || self.w_hat.ncols() != inst.dim_d * inst.dim_d
            || self.num_users() != inst.num_users
            || self.heads_hat.nrows() != self.w_hat.nrows()
        {
            return Err(Error::DimensionMismatch(format!(
                "model (d={}, J={}, U={}) does not match instance (d={}, U={})",
                self.dim_d,
                self.dim_j(),
                self.num_users(),
                inst.dim_d,
                inst.num_users
            )));
        }
        Ok(())
    }

    /// Representation features `phi(x, a)_j = x^T W_j a`.
    pub fn features(&self, context: &[f64], action: &[f64]) -> Result<DVector<f64>> {
        self.check_vectors(context, action)?;
        let d = self.dim_d;
        Ok(DVector::from_fn(self.dim_j(), |j, _| {
            let mut acc = 0.0;
            for p in 0..d {
                for q in 0..d {
                    acc += context[p] * self.w_hat[(j, p * d + q)] * action[q];
                }
            }
            acc
        }))
    }

    /// `R(x, a, i) = sum_j heads[j, i] (x^T W_j a)`.
    pub fn raw_score(&self, user: usize, context: &[f64], action: &[f64]) -> Result<f64> {
        if user >= self.num_users() {
            return Err(Error::IndexOutOfRange {
                index: user,
                len: self.num_users(),
            });
        }
        let phi = self.features(context, action)?;
        Ok(phi.dot(&self.heads_hat.column(user)))
    }

    /// Scores of every action in `bank` (rows) for one user and context.
    pub fn bank_scores(&self, user: usize, context: &[f64], bank: &DMatrix<f64>) -> Result<Vec<f64>> {
        if bank.nrows() == 0 {
            return Err(Error::EmptyBank);
        }
        if user >= self.num_users() {
            return Err(Error::IndexOutOfRange {
                index: user,
                len: self.num_users(),
            });
        }
        if context.len() != self.dim_d || bank.ncols() != self.dim_d {
            return Err(Error::DimensionMismatch(format!(
                "context/bank dimension {}/{} != {}",
                context.len(),
                bank.ncols(),
                self.dim_d
            )));
        }
        let v = self.user_bilinear(user);
        let x = DVector::from_column_slice(context);
        let u = v.tr_mul(&x);
        Ok((bank * u).iter().copied().collect())
    }

    /// Full score tables: one `n_ctx x n_act` matrix per user.
    pub fn score_table(&self, inst: &ProblemInstance) -> Vec<DMatrix<f64>> {
        (0..inst.num_users)
            .map(|i| self.user_score_table(inst, i))
            .collect()
    }

    pub fn user_score_table(&self, inst: &ProblemInstance, user: usize) -> DMatrix<f64> {
        let v = self.user_bilinear(user);
        let xv = &inst.contexts[user] * v;
        xv * inst.actions[user].transpose()
    }

    fn check_vectors(&self, context: &[f64], action: &[f64]) -> Result<()> {
        if context.len() != self.dim_d || action.len() != self.dim_d {
            return Err(Error::DimensionMismatch(format!(
                "context/action lengths {}/{} != d = {}",
                context.len(),
                action.len(),
                self.dim_d
            )));
        }
        Ok(())
    }
}

/// Raw scores over a bank minus their bank mean (uniform reference policy).
pub fn centered_score(
    model: &RewardModel,
    user: usize,
    context: &[f64],
    bank: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let raw = model.bank_scores(user, context, bank)?;
    Ok(center(&raw))
}

pub fn center(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    scores.iter().map(|s| s - mean).collect()
}

pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

/// Multinomial-logit choice probabilities with max-subtraction.
pub fn mnl_probs(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// MNL negative log-likelihood `log(sum_k e^{v_k}) - v_y`.
pub fn mnl_loss(scores: &[f64], chosen: usize) -> Result<f64> {
    let v = scores.get(chosen).ok_or(Error::IndexOutOfRange {
        index: chosen,
        len: scores.len(),
    })?;
    Ok((log_sum_exp(scores) - v).max(0.0))
}

/// `KL(softmax(truth) || softmax(candidate))`.
///
/// # Panics
/// If the two score vectors differ in length.
pub fn choice_kl(truth: &[f64], candidate: &[f64]) -> f64 {
    assert_eq!(truth.len(), candidate.len(), "score vectors differ in length");
    let lt = log_sum_exp(truth);
    let lc = log_sum_exp(candidate);
    let kl: f64 = truth
        .iter()
        .zip(candidate)
        .map(|(u, v)| {
            let log_p = u - lt;
            log_p.exp() * (log_p - (v - lc))
        })
        .sum();
    kl.max(0.0)
}

/// Index of the maximum, lowest index on exact ties. `None` for an empty slice.
pub fn argmax_lowest(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((k, v)),
        }
    }
    best.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn scalar_bilinear_score() {
        let m = RewardModel::from_matrices(&[DMatrix::from_element(1, 1, 1.0)], DMatrix::from_element(1, 1, 2.0))
            .unwrap();
        assert_eq!(m.raw_score(0, &[3.0], &[4.0]).unwrap(), 24.0);
    }

    #[test]
    fn zero_heads_score_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = RewardModel::zeros(3, 2, 2);
        m.w_hat = DMatrix::from_fn(2, 9, |_, _| rng.random::<f64>());
        assert_eq!(m.raw_score(1, &[1.0, 2.0, 3.0], &[0.5, -1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn raw_score_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (d, j) = (2, 3);
        let ws: Vec<DMatrix<f64>> = (0..j)
            .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5))
            .collect();
        let heads = DMatrix::from_fn(j, 2, |_, _| rng.random::<f64>() - 0.5);
        let m = RewardModel::from_matrices(&ws, heads.clone()).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            let a: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
            for user in 0..2 {
                let mut oracle = 0.0;
                for jj in 0..j {
                    for p in 0..d {
                        for q in 0..d {
                            oracle += heads[(jj, user)] * x[p] * ws[jj][(p, q)] * a[q];
                        }
                    }
                }
                assert_abs_diff_eq!(m.raw_score(user, &x, &a).unwrap(), oracle, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = RewardModel::zeros(2, 1, 1);
        assert!(matches!(m.raw_score(0, &[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn centering_examples() {
        assert_eq!(center(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 1.0]);
        assert_eq!(center(&[4.0, 4.0]), vec![0.0, 0.0]);
        let m = RewardModel::zeros(1, 1, 1);
        let empty = DMatrix::<f64>::zeros(0, 1);
        assert!(matches!(centered_score(&m, 0, &[1.0], &empty), Err(Error::EmptyBank)));
    }

    #[test]
    fn mnl_examples() {
        let p = mnl_probs(&[0.0, 3f64.ln()]);
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-15);
        let p = mnl_probs(&[2.0; 4]);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (s1, s2) = (rng.random::<f64>() * 20.0 - 10.0, rng.random::<f64>() * 20.0 - 10.0);
            assert_abs_diff_eq!(mnl_probs(&[s1, s2])[0], sigmoid(s1 - s2), epsilon = 1e-14);
        }
    }

    #[test]
    fn mnl_probs_survive_huge_scores() {
        let p = mnl_probs(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0);
    }

    #[test]
    fn mnl_loss_examples() {
        assert_abs_diff_eq!(mnl_loss(&[0.0, 0.0], 0).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let mut last = f64::INFINITY;
        for b in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let l = mnl_loss(&[b, -b], 0).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-15);
        assert!(matches!(mnl_loss(&[0.0, 0.0], 2), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn choice_kl_of_identical_scores_is_zero() {
        assert_eq!(choice_kl(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]), 0.0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_lowest(&[1.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax_lowest(&[5.0, 5.0, 5.0]), Some(0));
        assert_eq!(argmax_lowest(&[]), None);
    }
}
