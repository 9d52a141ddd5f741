//! Ground-truth problem instances.
//!
//! An instance fixes the true bilinear representation, the true user heads, and a finite
//! context bank and action bank per user. Construction is accept/reject over consecutive
//! seeds: a candidate is kept only when every (user, context) pair has a unique best
//! action whose margin over the runner-up reaches `raw_gap_target * head_scale`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, SCHEMA_VERSION};
use crate::rng::{stream_rng, Stream};
use crate::score::RewardModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InstanceConfig {
    pub dim_d: usize,
    pub dim_j: usize,
    pub num_users: usize,
    pub n_ctx: usize,
    pub n_act: usize,
    pub raw_gap_target: f64,
    pub head_scale: f64,
    pub max_retries: u32,
    /// All users share one context bank and one action bank.
    pub shared_banks: bool,
    /// User distribution; uniform when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_dist: Option<Vec<f64>>,
    /// When set, true heads are confined to a subspace of this dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_rank: Option<usize>,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            dim_d: 5,
            dim_j: 10,
            num_users: 10,
            n_ctx: 100,
            n_act: 100,
            raw_gap_target: 0.01,
            head_scale: 100.0,
            max_retries: 500,
            shared_banks: false,
            user_dist: None,
            head_rank: None,
        }
    }
}

impl InstanceConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim_d", self.dim_d),
            ("dim_j", self.dim_j),
            ("num_users", self.num_users),
            ("n_ctx", self.n_ctx),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.n_act < 2 {
            return Err(Error::InvalidConfig("n_act must be at least 2".into()));
        }
        if !(self.raw_gap_target > 0.0 && self.raw_gap_target.is_finite()) {
            return Err(Error::InvalidConfig("raw_gap_target must be positive".into()));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return Err(Error::InvalidConfig("head_scale must be positive".into()));
        }
        if self.max_retries == 0 {
            return Err(Error::InvalidConfig("max_retries must be at least 1".into()));
        }
        if let Some(dist) = &self.user_dist {
            validate_user_dist(dist, self.num_users)?;
        }
        Ok(())
    }
}

fn validate_user_dist(dist: &[f64], num_users: usize) -> Result<()> {
    if dist.len() != num_users {
        return Err(Error::InvalidConfig(format!(
            "user_dist has {} entries for {} users",
            dist.len(),
            num_users
        )));
    }
    if dist.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::InvalidConfig("user_dist has a negative entry".into()));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidConfig(format!("user_dist sums to {total}, not 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub dim_d: usize,
    pub dim_j: usize,
    pub num_users: usize,
    /// `J x d^2`, row `j` is `vec(W_j^*)` row-major.
    pub w_true: DMatrix<f64>,
    /// `J x U`.
    pub heads_true: DMatrix<f64>,
    /// Per user, `n_ctx x d` (one context per row).
    pub contexts: Vec<DMatrix<f64>>,
    /// Per user, `n_act x d` (one action per row).
    pub actions: Vec<DMatrix<f64>>,
    pub user_dist: Vec<f64>,
    pub head_scale: f64,
    pub seed: u64,
}

/// Top-two structure of one (user, context) pair under the true reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGap {
    pub user: usize,
    pub context: usize,
    pub best: usize,
    pub second: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub min_gap: f64,
    pub pct5_gap: f64,
    pub median_gap: f64,
    pub mean_gap: f64,
}

impl ProblemInstance {
    /// Assembles an instance from explicit parts and checks the structural invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        w: &[DMatrix<f64>],
        heads_true: DMatrix<f64>,
        contexts: Vec<DMatrix<f64>>,
        actions: Vec<DMatrix<f64>>,
        user_dist: Option<Vec<f64>>,
        head_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let model = RewardModel::from_matrices(w, heads_true)?;
        let num_users = model.num_users();
        let user_dist = user_dist.unwrap_or_else(|| vec![1.0 / num_users as f64; num_users]);
        let inst = Self {
            dim_d: model.dim_d,
            dim_j: model.dim_j(),
            num_users,
            w_true: model.w_hat,
            heads_true: model.heads_hat,
            contexts,
            actions,
            user_dist,
            head_scale,
            seed,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim_d;
        if self.w_true.nrows() != self.dim_j || self.w_true.ncols() != d * d {
            return Err(Error::DimensionMismatch("w_true must be J x d^2".into()));
        }
        if self.heads_true.nrows() != self.dim_j || self.heads_true.ncols() != self.num_users {
            return Err(Error::DimensionMismatch("heads_true must be J x U".into()));
        }
        if self.contexts.len() != self.num_users || self.actions.len() != self.num_users {
            return Err(Error::DimensionMismatch("one context and action bank per user".into()));
        }
        for (i, (c, a)) in self.contexts.iter().zip(&self.actions).enumerate() {
            if c.nrows() == 0 || a.nrows() == 0 {
                return Err(Error::InvalidConfig(format!("user {i} has an empty bank")));
            }
            if c.ncols() != d || a.ncols() != d {
                return Err(Error::DimensionMismatch(format!("user {i} bank vectors are not length {d}")));
            }
        }
        validate_user_dist(&self.user_dist, self.num_users)?;
        if !(self.head_scale > 0.0) {
            return Err(Error::InvalidConfig("head_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn truth_model(&self) -> RewardModel {
        RewardModel {
            dim_d: self.dim_d,
            w_hat: self.w_true.clone(),
            heads_hat: self.heads_true.clone(),
        }
    }

    pub fn n_ctx(&self, user: usize) -> usize {
        self.contexts[user].nrows()
    }

    pub fn n_act(&self, user: usize) -> usize {
        self.actions[user].nrows()
    }

    pub fn num_pairs(&self) -> usize {
        self.contexts.iter().map(|c| c.nrows()).sum()
    }

    pub fn context(&self, user: usize, ctx: usize) -> Vec<f64> {
        self.contexts[user].row(ctx).iter().copied().collect()
    }

    pub fn action(&self, user: usize, act: usize) -> Vec<f64> {
        self.actions[user].row(act).iter().copied().collect()
    }

    /// True rewards, one `n_ctx x n_act` table per user.
    pub fn reward_table(&self) -> Vec<DMatrix<f64>> {
        self.truth_model().score_table(self)
    }

    /// Copy with every head multiplied by `c` (and `head_scale` updated accordingly).
    pub fn scale_heads(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.heads_true *= c;
        out.head_scale *= c;
        out
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        io::to_json_bytes(&InstanceDoc::from(self))
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let doc: InstanceDoc = serde_json::from_slice(bytes)?;
        doc.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_json_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_slice(&std::fs::read(path)?)
    }
}

/// Top-two gaps of every (user, context) pair, user-major order.
pub fn pair_gaps(inst: &ProblemInstance) -> Vec<PairGap> {
    let tables = inst.reward_table();
    let mut out = Vec::with_capacity(inst.num_pairs());
    for (user, table) in tables.iter().enumerate() {
        for ctx in 0..table.nrows() {
            let row: Vec<f64> = table.row(ctx).iter().copied().collect();
            out.push(top_two(user, ctx, &row));
        }
    }
    out
}

fn top_two(user: usize, context: usize, row: &[f64]) -> PairGap {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    let mut second: Option<usize> = None;
    for k in 0..row.len() {
        if k == best {
            continue;
        }
        if second.map_or(true, |s| row[k] > row[s]) {
            second = Some(k);
        }
    }
    match second {
        Some(s) => PairGap {
            user,
            context,
            best,
            second: s,
            gap: row[best] - row[s],
        },
        None => PairGap {
            user,
            context,
            best,
            second: best,
            gap: f64::INFINITY,
        },
    }
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn gap_stats(inst: &ProblemInstance) -> GapStats {
    stats_from_gaps(pair_gaps(inst).iter().map(|g| g.gap))
}

pub(crate) fn stats_from_gaps(gaps: impl Iterator<Item = f64>) -> GapStats {
    let mut gaps: Vec<f64> = gaps.collect();
    gaps.sort_by(f64::total_cmp);
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    GapStats {
        min_gap: gaps[0],
        pct5_gap: quantile_sorted(&gaps, 0.05),
        median_gap: quantile_sorted(&gaps, 0.5),
        mean_gap: mean,
    }
}

/// Full-rank or degenerate instance depending on `cfg.head_rank`.
pub fn build_instance(cfg: &InstanceConfig, seed: u64) -> Result<ProblemInstance> {
    match cfg.head_rank {
        Some(r) => generate_degenerate_instance(cfg, r, seed),
        None => generate_instance(cfg, seed),
    }
}

pub fn generate_instance(cfg: &InstanceConfig, seed: u64) -> Result<ProblemInstance> {
    cfg.validate()?;
    search_seeds(cfg, seed, sample_full_heads)
}

/// Instance whose true heads all lie in a `head_rank`-dimensional subspace of `R^J`
/// (a randomly rotated coordinate subspace).
pub fn generate_degenerate_instance(
    cfg: &InstanceConfig,
    head_rank: usize,
    seed: u64,
) -> Result<ProblemInstance> {
    cfg.validate()?;
    if head_rank == 0 || head_rank >= cfg.dim_j {
        return Err(Error::InvalidConfig(format!(
            "head_rank must be in [1, {}), got {head_rank}",
            cfg.dim_j
        )));
    }
    if head_rank > cfg.num_users {
        return Err(Error::InvalidConfig(format!(
            "head_rank {head_rank} exceeds num_users {}",
            cfg.num_users
        )));
    }
    search_seeds(cfg, seed, |rng, cfg| sample_low_rank_heads(rng, cfg, head_rank))
}

fn search_seeds<F>(cfg: &InstanceConfig, seed: u64, mut heads: F) -> Result<ProblemInstance>
where
    F: FnMut(&mut rand_chacha::ChaCha8Rng, &InstanceConfig) -> DMatrix<f64>,
{
    let target = cfg.raw_gap_target * cfg.head_scale;
    let mut best_gap = f64::NEG_INFINITY;
    for k in 0..u64::from(cfg.max_retries) {
        let candidate_seed = seed.wrapping_add(k);
        let mut rng = stream_rng(candidate_seed, 0, Stream::Instance);
        let w = normal_matrix(&mut rng, cfg.dim_j, cfg.dim_d * cfg.dim_d);
        let heads = heads(&mut rng, cfg) * cfg.head_scale;
        let (contexts, actions) = sample_banks(&mut rng, cfg);
        let inst = ProblemInstance {
            dim_d: cfg.dim_d,
            dim_j: cfg.dim_j,
            num_users: cfg.num_users,
            w_true: w,
            heads_true: heads,
            contexts,
            actions,
            user_dist: cfg
                .user_dist
                .clone()
                .unwrap_or_else(|| vec![1.0 / cfg.num_users as f64; cfg.num_users]),
            head_scale: cfg.head_scale,
            seed: candidate_seed,
        };
        let min_gap = pair_gaps(&inst)
            .iter()
            .map(|g| g.gap)
            .fold(f64::INFINITY, f64::min);
        if min_gap >= target {
            return Ok(inst);
        }
        best_gap = best_gap.max(min_gap);
    }
    Err(Error::GapUnreachable {
        start_seed: seed,
        retries: cfg.max_retries,
        target,
        best_gap,
    })
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order does not depend on nalgebra's storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = rng.sample(StandardNormal);
        }
    }
    m
}

fn sample_full_heads(rng: &mut impl Rng, cfg: &InstanceConfig) -> DMatrix<f64> {
    normal_matrix(rng, cfg.dim_j, cfg.num_users)
}

fn sample_low_rank_heads(rng: &mut impl Rng, cfg: &InstanceConfig, rank: usize) -> DMatrix<f64> {
    let rotation = random_orthogonal(rng, cfg.dim_j);
    let coeffs = normal_matrix(rng, rank, cfg.num_users);
    rotation.columns(0, rank) * coeffs
}

/// Haar-distributed orthogonal matrix via QR of a Gaussian matrix with sign correction.
pub(crate) fn random_orthogonal(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let g = normal_matrix(rng, n, n);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..n {
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    q
}

fn sample_banks(rng: &mut impl Rng, cfg: &InstanceConfig) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    if cfg.shared_banks {
        let c = normal_matrix(rng, cfg.n_ctx, cfg.dim_d);
        let a = normal_matrix(rng, cfg.n_act, cfg.dim_d);
        return (vec![c; cfg.num_users], vec![a; cfg.num_users]);
    }
    let mut contexts = Vec::with_capacity(cfg.num_users);
    let mut actions = Vec::with_capacity(cfg.num_users);
    for _ in 0..cfg.num_users {
        contexts.push(normal_matrix(rng, cfg.n_ctx, cfg.dim_d));
        actions.push(normal_matrix(rng, cfg.n_act, cfg.dim_d));
    }
    (contexts, actions)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceDoc {
    schema_version: u32,
    dim_d: usize,
    dim_j: usize,
    num_users: usize,
    w_true: Vec<Vec<Vec<f64>>>,
    heads_true: Vec<Vec<f64>>,
    contexts: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<Vec<f64>>>,
    user_dist: Vec<f64>,
    head_scale: f64,
    seed: u64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch(format!("{what}: ragged rows, expected {ncols} columns")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

impl From<&ProblemInstance> for InstanceDoc {
    fn from(inst: &ProblemInstance) -> Self {
        let model = inst.truth_model();
        Self {
            schema_version: SCHEMA_VERSION,
            dim_d: inst.dim_d,
            dim_j: inst.dim_j,
            num_users: inst.num_users,
            w_true: (0..inst.dim_j).map(|j| rows_of(&model.w_matrix(j))).collect(),
            heads_true: rows_of(&inst.heads_true),
            contexts: inst.contexts.iter().map(rows_of).collect(),
            actions: inst.actions.iter().map(rows_of).collect(),
            user_dist: inst.user_dist.clone(),
            head_scale: inst.head_scale,
            seed: inst.seed,
        }
    }
}

impl TryFrom<InstanceDoc> for ProblemInstance {
    type Error = Error;

    fn try_from(doc: InstanceDoc) -> Result<Self> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported instance schema_version {}",
                doc.schema_version
            )));
        }
        let d = doc.dim_d;
        if doc.w_true.len() != doc.dim_j {
            return Err(Error::DimensionMismatch("w_true must hold J matrices".into()));
        }
        let w = doc
            .w_true
            .iter()
            .map(|m| {
                if m.len() != d {
                    return Err(Error::DimensionMismatch("W_j must be d x d".into()));
                }
                matrix_from_rows(m, d, "w_true")
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = matrix_from_rows(&doc.heads_true, doc.num_users, "heads_true")?;
        let contexts = doc
            .contexts
            .iter()
            .map(|b| matrix_from_rows(b, d, "contexts"))
            .collect::<Result<Vec<_>>>()?;
        let actions = doc
            .actions
            .iter()
            .map(|b| matrix_from_rows(b, d, "actions"))
            .collect::<Result<Vec<_>>>()?;
        let inst = ProblemInstance::from_parts(
            &w,
            heads,
            contexts,
            actions,
            Some(doc.user_dist),
            doc.head_scale,
            doc.seed,
        )?;
        if inst.dim_j != doc.dim_j || inst.num_users != doc.num_users {
            return Err(Error::DimensionMismatch("declared dimensions disagree with arrays".into()));
        }
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cfg() -> InstanceConfig {
        InstanceConfig {
            dim_d: 2,
            dim_j: 2,
            num_users: 3,
            n_ctx: 3,
            n_act: 4,
            raw_gap_target: 0.05,
            head_scale: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn one_by_one_instance_has_gap_two() {
        let inst = ProblemInstance::from_parts(
            &[DMatrix::from_element(1, 1, 1.0)],
            DMatrix::from_element(1, 1, 1.0),
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::from_row_slice(2, 1, &[1.0, -1.0])],
            None,
            1.0,
            0,
        )
        .unwrap();
        let table = inst.reward_table();
        assert_eq!(table[0][(0, 0)], 1.0);
        assert_eq!(table[0][(0, 1)], -1.0);
        assert_eq!(gap_stats(&inst).min_gap, 2.0);
    }

    #[test]
    fn single_pair_stats() {
        // rewards (3, 1, 0) from a 1-d bank with unit weights
        let inst = ProblemInstance::from_parts(
            &[DMatrix::from_element(1, 1, 1.0)],
            DMatrix::from_element(1, 1, 1.0),
            vec![DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::from_row_slice(3, 1, &[3.0, 1.0, 0.0])],
            None,
            1.0,
            0,
        )
        .unwrap();
        let s = gap_stats(&inst);
        assert_eq!((s.min_gap, s.median_gap, s.mean_gap), (2.0, 2.0, 2.0));
    }

    #[test]
    fn constructor_stats_match_exhaustive_rescan() {
        let cfg = small_cfg();
        let inst = generate_instance(&cfg, 11).unwrap();
        let stats = gap_stats(&inst);
        // Independent rescan: evaluate every reward from the raw vectors.
        let model = inst.truth_model();
        let mut gaps = Vec::new();
        for u in 0..inst.num_users {
            for c in 0..inst.n_ctx(u) {
                let mut r: Vec<f64> = (0..inst.n_act(u))
                    .map(|a| model.raw_score(u, &inst.context(u, c), &inst.action(u, a)).unwrap())
                    .collect();
                r.sort_by(|x, y| y.total_cmp(x));
                gaps.push(r[0] - r[1]);
            }
        }
        assert_eq!(gaps.len(), 9);
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        assert_relative_eq!(stats.min_gap, sorted[0], max_relative = 1e-12);
        assert_relative_eq!(stats.median_gap, sorted[4], max_relative = 1e-12);
        assert_relative_eq!(stats.mean_gap, gaps.iter().sum::<f64>() / 9.0, max_relative = 1e-12);
        assert!(stats.min_gap >= cfg.raw_gap_target * cfg.head_scale);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        assert_eq!(generate_instance(&cfg, 5).unwrap(), generate_instance(&cfg, 5).unwrap());
    }

    #[test]
    fn head_scale_does_not_change_accepted_seed() {
        let cfg = small_cfg();
        let a = generate_instance(&cfg, 40).unwrap();
        let b = generate_instance(&InstanceConfig { head_scale: 7.0, ..cfg }, 40).unwrap();
        assert_eq!(a.seed, b.seed);
        assert_relative_eq!(a.heads_true.clone() * 7.0, b.heads_true, max_relative = 1e-15);
    }

    #[test]
    fn gap_stats_are_positively_homogeneous() {
        let inst = generate_instance(&small_cfg(), 3).unwrap();
        let base = gap_stats(&inst);
        for c in [0.5, 2.0, 37.0] {
            let s = gap_stats(&inst.scale_heads(c));
            assert_relative_eq!(s.min_gap, c * base.min_gap, max_relative = 1e-9);
            assert_relative_eq!(s.pct5_gap, c * base.pct5_gap, max_relative = 1e-9);
            assert_relative_eq!(s.median_gap, c * base.median_gap, max_relative = 1e-9);
            assert_relative_eq!(s.mean_gap, c * base.mean_gap, max_relative = 1e-9);
        }
    }

    #[test]
    fn unreachable_gap_is_an_error() {
        let cfg = InstanceConfig {
            raw_gap_target: 1e6,
            max_retries: 3,
            ..small_cfg()
        };
        assert!(matches!(generate_instance(&cfg, 0), Err(Error::GapUnreachable { retries: 3, .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = InstanceConfig { dim_d: 0, ..small_cfg() };
        assert!(matches!(generate_instance(&cfg, 0), Err(Error::InvalidConfig(_))));
        let cfg = InstanceConfig {
            user_dist: Some(vec![0.5, 0.6, -0.1]),
            ..small_cfg()
        };
        assert!(matches!(generate_instance(&cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn degenerate_heads_have_forced_rank() {
        let cfg = InstanceConfig {
            dim_d: 2,
            dim_j: 4,
            num_users: 8,
            n_ctx: 4,
            n_act: 5,
            raw_gap_target: 0.01,
            head_scale: 1.0,
            ..Default::default()
        };
        let inst = generate_degenerate_instance(&cfg, 2, 9).unwrap();
        let g = &inst.heads_true * inst.heads_true.transpose() / 8.0;
        let mut eig: Vec<f64> = g.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        assert!(eig[1] > 1e-8 * eig[0]);
        assert!(eig[2].abs() < 1e-10 && eig[3].abs() < 1e-10);
        assert!(matches!(
            generate_degenerate_instance(&cfg, 4, 9),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let inst = generate_instance(&small_cfg(), 21).unwrap();
        let bytes = inst.to_json_bytes().unwrap();
        let back = ProblemInstance::from_json_slice(&bytes).unwrap();
        assert_eq!(inst, back);
        assert_eq!(bytes, back.to_json_bytes().unwrap());
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("{\"schema_version\":1,"));
    }

    #[test]
    fn shared_banks_are_identical_across_users() {
        let cfg = InstanceConfig {
            shared_banks: true,
            ..small_cfg()
        };
        let inst = generate_instance(&cfg, 2).unwrap();
        assert_eq!(inst.contexts[0], inst.contexts[2]);
        assert_eq!(inst.actions[0], inst.actions[1]);
    }
}
