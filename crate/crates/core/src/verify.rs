//! Randomized property suites for the choice-model and regret identities the simulator
//! relies on. Every suite is deterministic given its seed and reports the first
//! counterexample it finds.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diversity::drd;
use crate::error::Result;
use crate::fit::{objective_gradient, PreferenceRecord};
use crate::instance::{gap_stats, generate_instance, InstanceConfig, ProblemInstance};
use crate::io::SCHEMA_VERSION;
use crate::policy::{sample_choice, tilted_weights_from_scores};
use crate::regret::{
    disagreement_mass, expected_regret, misrec_counterexample, one_step_regret, pair_weights,
    regret_bounds, Averaging, SelectorMap,
};
use crate::rng::{stream_rng, Stream};
use crate::score::{argmax_lowest, center, choice_kl, log_sum_exp, mnl_loss, mnl_probs, RewardModel};

pub const DEFAULT_VERIFY_SEED: u64 = 20_240_611;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub violations: usize,
    /// Description of the first violation.
    pub counterexample: Option<String>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }

    pub fn total_violations(&self) -> usize {
        self.suites.iter().map(|s| s.violations).sum()
    }
}

struct Tally {
    name: &'static str,
    trials: usize,
    violations: usize,
    counterexample: Option<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            violations: 0,
            counterexample: None,
            start: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.violations += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            trials: self.trials,
            violations: self.violations,
            counterexample: self.counterexample,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

type Suite = fn(u64) -> Result<SuiteReport>;

/// Every suite with its name, in the order [`run_all`] executes them.
pub const SUITES: &[(&str, Suite)] = &[
    ("softmax-kl-quadratic-bound", softmax_kl_quadratic_bound),
    ("excess-loss-equals-choice-kl", excess_loss_equals_kl),
    ("mnl-loss-envelope-and-lipschitz", loss_envelope_and_lipschitz),
    ("centering-invariance", centering_invariance),
    ("tilt-likelihood-ratio-envelope", tilt_envelope),
    ("choice-kl-variance-lower-bound", choice_kl_variance_bound),
    ("regret-disagreement-sandwich", regret_disagreement_sandwich),
    ("misrecommendation-score-error", misrecommendation_score_error),
    ("selector-stability", selector_stability),
    ("bradley-terry-reduction", bradley_terry_reduction),
    ("loss-gradient-finite-difference", gradient_finite_difference),
    ("gap-positive-homogeneity", gap_homogeneity),
    ("drd-quadratic-scale-law", drd_scale_law),
    ("regret-enumeration", regret_enumeration),
];

pub fn run_all(seed: u64) -> Result<VerifyReport> {
    let suites = SUITES
        .iter()
        .map(|(_, suite)| suite(seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        seed,
        suites,
    })
}

fn rng_for(seed: u64, suite: u64) -> ChaCha8Rng {
    stream_rng(seed, suite, Stream::Verify)
}

fn gaussian_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn uniform_vec(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_model(rng: &mut impl Rng, d: usize, j: usize, u: usize, scale: f64) -> RewardModel {
    let mut m = RewardModel::zeros(d, j, u);
    m.w_hat = DMatrix::from_fn(j, d * d, |_, _| rng.sample::<f64, _>(StandardNormal));
    m.heads_hat = DMatrix::from_fn(j, u, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    m
}

/// Small accepted instances shared by the regret suites.
pub fn verify_instances(seed: u64, count: usize) -> Result<Vec<ProblemInstance>> {
    let cfg = InstanceConfig {
        dim_d: 3,
        dim_j: 2,
        num_users: 4,
        n_ctx: 8,
        n_act: 5,
        raw_gap_target: 0.01,
        head_scale: 1.0,
        max_retries: 5000,
        ..InstanceConfig::default()
    };
    let mut out = Vec::with_capacity(count);
    let mut next = seed;
    for _ in 0..count {
        let inst = generate_instance(&cfg, next)?;
        next = inst.seed + 1;
        out.push(inst);
    }
    Ok(out)
}

fn softmax_kl_quadratic_bound(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("softmax-kl-quadratic-bound");
    let mut rng = rng_for(seed, 1);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let u = gaussian_vec(&mut rng, k, scale);
        let v = gaussian_vec(&mut rng, k, scale);
        let kl = choice_kl(&u, &v);
        let bound = 0.5 * u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        t.check(kl <= bound + 1e-12 * (1.0 + bound), || {
            format!("u={u:?} v={v:?} kl={kl} bound={bound}")
        });
    }
    Ok(t.finish())
}

fn excess_loss_equals_kl(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("excess-loss-equals-choice-kl");
    let mut rng = rng_for(seed, 2);
    for case in 0..500 {
        let k = 2 + case % 5;
        let truth = gaussian_vec(&mut rng, k, 2.0);
        let cand = gaussian_vec(&mut rng, k, 2.0);
        let p = mnl_probs(&truth);
        let mut excess = 0.0;
        for (y, py) in p.iter().enumerate() {
            excess += py * (mnl_loss(&cand, y)? - mnl_loss(&truth, y)?);
        }
        let kl = choice_kl(&truth, &cand);
        t.check((excess - kl).abs() <= 1e-12 * (1.0 + kl), || {
            format!("truth={truth:?} cand={cand:?} excess={excess} kl={kl}")
        });
    }
    Ok(t.finish())
}

fn loss_envelope_and_lipschitz(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("mnl-loss-envelope-and-lipschitz");
    let mut rng = rng_for(seed, 3);
    for _ in 0..1000 {
        let k = rng.random_range(2..=8);
        let b = rng.random_range(0.01..5.0);
        let v = uniform_vec(&mut rng, k, b);
        let w = uniform_vec(&mut rng, k, b);
        let y = rng.random_range(0..k);
        let (lv, lw) = (mnl_loss(&v, y)?, mnl_loss(&w, y)?);
        let upper = (k as f64).ln() + 2.0 * b;
        t.check((0.0..=upper + 1e-12).contains(&lv), || {
            format!("envelope: v={v:?} y={y} loss={lv} upper={upper}")
        });
        let lip = 2.0 * sup_dist(&v, &w);
        t.check((lv - lw).abs() <= lip + 1e-12, || {
            format!("lipschitz: v={v:?} w={w:?} y={y} diff={} bound={lip}", (lv - lw).abs())
        });
    }
    Ok(t.finish())
}

fn centering_invariance(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("centering-invariance");
    let mut rng = rng_for(seed, 4);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let shift = rng.random_range(-50.0..50.0);
        let raw: Vec<f64> = gaussian_vec(&mut rng, k, 3.0).iter().map(|s| s + shift).collect();
        let centered = center(&raw);
        let eta = rng.random_range(0.1..3.0);
        let pr = sup_dist(&mnl_probs(&raw), &mnl_probs(&centered));
        t.check(pr <= 1e-12, || format!("probabilities: raw={raw:?} sup diff {pr}"));
        let wr = sup_dist(
            &tilted_weights_from_scores(&raw, eta)?,
            &tilted_weights_from_scores(&centered, eta)?,
        );
        t.check(wr <= 1e-12, || format!("tilt: raw={raw:?} eta={eta} sup diff {wr}"));
        let (ar, ac) = (argmax_lowest(&raw), argmax_lowest(&centered));
        t.check(ar == ac, || format!("argmax: raw={raw:?} {ar:?} vs {ac:?}"));
    }
    Ok(t.finish())
}

fn tilt_envelope(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("tilt-likelihood-ratio-envelope");
    let mut rng = rng_for(seed, 5);
    for _ in 0..1000 {
        let n = rng.random_range(2..=50);
        let b = rng.random_range(0.01..3.0);
        let eta = rng.random_range(0.05..3.0);
        let scores = uniform_vec(&mut rng, n, b);
        let w = tilted_weights_from_scores(&scores, eta)?;
        let (lo, hi) = ((-2.0 * eta * b).exp(), (2.0 * eta * b).exp());
        let nf = n as f64;
        let bad = w.iter().find(|&&wi| {
            let ratio = wi * nf;
            ratio < lo * (1.0 - 1e-12) || ratio > hi * (1.0 + 1e-12)
        });
        t.check(bad.is_none(), || {
            format!("n={n} B={b} eta={eta} ratio={} outside [{lo}, {hi}]", bad.unwrap() * nf)
        });
    }
    Ok(t.finish())
}

fn choice_kl_variance_bound(seed: u64) -> Result<SuiteReport> {
    const SLATES: usize = 100_000;
    let mut t = Tally::new("choice-kl-variance-lower-bound");
    let mut rng = rng_for(seed, 6);
    for &k in &[2usize, 5] {
        for &b in &[0.25, 0.5, 1.0] {
            let n = 12;
            let truth = uniform_vec(&mut rng, n, b);
            let cand = uniform_vec(&mut rng, n, b);
            let delta: Vec<f64> = cand.iter().zip(&truth).map(|(s, s0)| s - s0).collect();
            let mean_d = delta.iter().sum::<f64>() / n as f64;
            let var_d = delta.iter().map(|x| (x - mean_d).powi(2)).sum::<f64>() / n as f64;
            let c = (-2.0 * b).exp() / 2.0 * (k as f64 - 1.0) / k as f64;
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            let mut st = vec![0.0; k];
            let mut sc = vec![0.0; k];
            for _ in 0..SLATES {
                for slot in 0..k {
                    let a = rng.random_range(0..n);
                    st[slot] = truth[a];
                    sc[slot] = cand[a];
                }
                let kl = choice_kl(&st, &sc);
                sum += kl;
                sum_sq += kl * kl;
            }
            let m = SLATES as f64;
            let mean = sum / m;
            let se = ((sum_sq / m - mean * mean).max(0.0) / m).sqrt();
            let bound = c * var_d;
            t.check(mean >= bound - 3.0 * se, || {
                format!("K={k} B={b} mean={mean} se={se} bound={bound}")
            });
        }
    }
    Ok(t.finish())
}

/// Models spanning far-from-truth, near-truth and head-perturbed regimes, so that the
/// disagreement mass covers the whole of `[0, 1]`.
fn trial_model(rng: &mut impl Rng, inst: &ProblemInstance, trial: usize) -> RewardModel {
    let (d, j, u) = (inst.dim_d, inst.dim_j, inst.num_users);
    match trial % 3 {
        0 => random_model(rng, d, j, u, inst.head_scale),
        1 => {
            let mut m = inst.truth_model();
            let eps = 10f64.powf(rng.random_range(-3.0..0.0));
            let noise = random_model(rng, d, j, u, 1.0);
            m.w_hat += noise.w_hat * eps;
            m.heads_hat += noise.heads_hat * (eps * inst.head_scale);
            m
        }
        _ => {
            let mut m = inst.truth_model();
            let eps = 10f64.powf(rng.random_range(-2.0..0.5)) * inst.head_scale;
            m.heads_hat += DMatrix::from_fn(j, u, |_, _| eps * rng.sample::<f64, _>(StandardNormal));
            m
        }
    }
}

fn regret_disagreement_sandwich(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("regret-disagreement-sandwich");
    let mut rng = rng_for(seed, 7);
    let insts = verify_instances(seed, 5)?;
    for trial in 0..500 {
        let inst = &insts[trial % insts.len()];
        let bounds = regret_bounds(inst);
        let model = trial_model(&mut rng, inst, trial);
        for averaging in [Averaging::UserDist, Averaging::UniformPairs] {
            let g = expected_regret(inst, &model, averaging)?;
            let mass = disagreement_mass(inst, &model, averaging)?;
            let (lo, hi) = (bounds.delta_min * mass, bounds.delta_max * mass);
            let tol = 1e-12 * (1.0 + hi);
            t.check(lo - tol <= g && g <= hi + tol, || {
                format!("instance seed {} trial {trial}: {lo} <= {g} <= {hi} fails", inst.seed)
            });
        }
    }
    Ok(t.finish())
}

fn misrecommendation_score_error(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("misrecommendation-score-error");
    let mut rng = rng_for(seed, 8);
    let insts = verify_instances(seed, 5)?;
    for trial in 0..500 {
        let inst = &insts[trial % insts.len()];
        let model = trial_model(&mut rng, inst, trial);
        let found = misrec_counterexample(inst, &model)?;
        t.check(found.is_none(), || {
            let (u, c, err) = found.unwrap();
            format!("instance seed {} user {u} context {c}: sup error {err}", inst.seed)
        });
    }
    Ok(t.finish())
}

fn selector_stability(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("selector-stability");
    let mut rng = rng_for(seed, 9);
    let insts = verify_instances(seed, 5)?;
    for trial in 0..500 {
        let inst = &insts[trial % insts.len()];
        let delta_min = gap_stats(inst).min_gap;
        // Scores are linear in the heads, so a head perturbation can be rescaled to an
        // exact sup-norm budget just below half the minimum gap.
        let dir = DMatrix::from_fn(inst.dim_j, inst.num_users, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let mut pert = RewardModel::zeros(inst.dim_d, inst.dim_j, inst.num_users);
        pert.w_hat = inst.w_true.clone();
        pert.heads_hat = dir.clone();
        let sup = pert
            .score_table(inst)
            .iter()
            .map(|tb| tb.amax())
            .fold(0.0, f64::max);
        if sup == 0.0 {
            continue;
        }
        let budget = rng.random_range(0.0..0.499) * delta_min;
        let mut model = inst.truth_model();
        model.heads_hat += dir * (budget / sup);
        let truth = SelectorMap::from_tables(&inst.reward_table());
        let mine = SelectorMap::from_model(&model, inst);
        let flips = (0..inst.num_users)
            .flat_map(|u| (0..inst.n_ctx(u)).map(move |c| (u, c)))
            .filter(|&(u, c)| truth.get(u, c) != mine.get(u, c))
            .count();
        t.check(flips == 0, || {
            format!("instance seed {} budget {budget} < {}: {flips} flips", inst.seed, delta_min / 2.0)
        });
    }
    Ok(t.finish())
}

fn bradley_terry_reduction(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("bradley-terry-reduction");
    let mut rng = rng_for(seed, 10);
    for _ in 0..1000 {
        let v = gaussian_vec(&mut rng, 2, 5.0);
        let z = v[0] - v[1];
        let sigma = 1.0 / (1.0 + (-z).exp());
        let p = mnl_probs(&v)[0];
        t.check((p - sigma).abs() <= 1e-12, || format!("v={v:?} p={p} sigmoid={sigma}"));
        let softplus = (1.0 + (-z).exp()).ln();
        let l = mnl_loss(&v, 0)?;
        t.check((l - softplus).abs() <= 1e-12 * (1.0 + softplus), || {
            format!("v={v:?} loss={l} softplus={softplus}")
        });
        let lse = log_sum_exp(&v);
        t.check((lse - v[0] - softplus).abs() <= 1e-12 * (1.0 + lse.abs()), || {
            format!("v={v:?} log-sum-exp={lse}")
        });
    }
    // The preference label law depends only on the truth scores.
    let truth = [0.3, -0.2];
    let mut counts = [0usize; 2];
    for i in 0..20_000u64 {
        counts[sample_choice(&truth, &mut stream_rng(seed, i, Stream::Verify))] += 1;
    }
    let p0 = mnl_probs(&truth)[0];
    let n = 20_000.0;
    let se = (p0 * (1.0 - p0) / n).sqrt();
    let freq = counts[0] as f64 / n;
    t.check((freq - p0).abs() <= 4.0 * se, || format!("label frequency {freq} vs {p0}"));
    Ok(t.finish())
}

fn gradient_finite_difference(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("loss-gradient-finite-difference");
    let mut rng = rng_for(seed, 11);
    let insts = verify_instances(seed, 2)?;
    const H: f64 = 1e-5;
    for (ii, inst) in insts.iter().enumerate() {
        for rep in 0..3 {
            let data: Vec<PreferenceRecord> = (0..40)
                .map(|_| {
                    let user = rng.random_range(0..inst.num_users);
                    let context = rng.random_range(0..inst.n_ctx(user));
                    let k = rng.random_range(2..=4);
                    let slate: Vec<usize> = (0..k).map(|_| rng.random_range(0..inst.n_act(user))).collect();
                    let chosen = rng.random_range(0..k);
                    PreferenceRecord::new(user, context, &slate, chosen)
                })
                .collect();
            let model = random_model(&mut rng, inst.dim_d, inst.dim_j, inst.num_users, 0.5);
            let ridge = 0.05 * rep as f64;
            let (_, gw, gh) = objective_gradient(&model, &data, inst, ridge)?;
            let objective = |m: &RewardModel| objective_gradient(m, &data, inst, ridge).map(|r| r.0);
            let mut coords: Vec<(bool, usize)> = (0..gw.len()).map(|i| (true, i)).collect();
            coords.extend((0..gh.len()).map(|i| (false, i)));
            for (is_w, i) in coords {
                let mut plus = model.clone();
                let mut minus = model.clone();
                let analytic = if is_w {
                    plus.w_hat[i] += H;
                    minus.w_hat[i] -= H;
                    gw[i]
                } else {
                    plus.heads_hat[i] += H;
                    minus.heads_hat[i] -= H;
                    gh[i]
                };
                let numeric = (objective(&plus)? - objective(&minus)?) / (2.0 * H);
                let scale = analytic.abs().max(numeric.abs()).max(1.0);
                t.check((analytic - numeric).abs() <= 1e-6 * scale, || {
                    let which = if is_w { "w_hat" } else { "heads_hat" };
                    format!("instance {ii} rep {rep} {which}[{i}]: analytic {analytic} numeric {numeric}")
                });
            }
        }
    }
    Ok(t.finish())
}

fn gap_homogeneity(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("gap-positive-homogeneity");
    let mut rng = rng_for(seed, 12);
    let insts = verify_instances(seed, 3)?;
    for inst in &insts {
        let base = gap_stats(inst);
        for _ in 0..20 {
            let c = 10f64.powf(rng.random_range(-2.0..3.0));
            let scaled = gap_stats(&inst.scale_heads(c));
            let pairs = [
                (scaled.min_gap, base.min_gap),
                (scaled.pct5_gap, base.pct5_gap),
                (scaled.median_gap, base.median_gap),
            ];
            let worst = pairs
                .iter()
                .map(|(s, b)| (s - c * b).abs() / (c * b).abs().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            t.check(worst <= 1e-9, || format!("instance seed {} c={c}: relative error {worst}", inst.seed));
        }
    }
    Ok(t.finish())
}

fn drd_scale_law(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("drd-quadratic-scale-law");
    let mut rng = rng_for(seed, 13);
    let insts = verify_instances(seed, 3)?;
    for inst in &insts {
        let base = drd(inst, 0.25)?.drd;
        for _ in 0..20 {
            let c = 10f64.powf(rng.random_range(-2.0..2.0));
            let scaled = drd(&inst.scale_heads(c), 0.25)?.drd;
            let want = c * c * base;
            let rel = (scaled - want).abs() / want.abs().max(f64::MIN_POSITIVE);
            t.check(base >= 0.0 && rel <= 1e-9, || {
                format!("instance seed {} c={c}: drd {scaled} vs {want}", inst.seed)
            });
        }
        let mut same = inst.clone();
        for u in 1..same.num_users {
            let first = same.heads_true.column(0).clone_owned();
            same.heads_true.set_column(u, &first);
        }
        let flat = drd(&same, 0.25)?.drd;
        t.check(flat == 0.0, || format!("identical heads give drd {flat}"));
    }
    Ok(t.finish())
}

fn regret_enumeration(seed: u64) -> Result<SuiteReport> {
    let mut t = Tally::new("regret-enumeration");
    let mut rng = rng_for(seed, 14);
    let insts = verify_instances(seed, 3)?;
    for trial in 0..60 {
        let inst = &insts[trial % insts.len()];
        let model = trial_model(&mut rng, inst, trial);
        let truth = inst.truth_model();
        let weights = pair_weights(inst, Averaging::UserDist);
        let mut brute = 0.0;
        for u in 0..inst.num_users {
            for c in 0..inst.n_ctx(u) {
                let x = inst.context(u, c);
                let (mut best, mut chosen, mut chosen_score) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
                for a in 0..inst.n_act(u) {
                    let act = inst.action(u, a);
                    best = best.max(truth.raw_score(u, &x, &act)?);
                    let s = model.raw_score(u, &x, &act)?;
                    if s > chosen_score {
                        chosen_score = s;
                        chosen = a;
                    }
                }
                let r = best - truth.raw_score(u, &x, &inst.action(u, chosen))?;
                let step = one_step_regret(inst, &model, u, c)?;
                t.check((r - step).abs() <= 1e-12 * (1.0 + best.abs()), || {
                    format!("instance seed {} user {u} context {c}: {step} vs brute {r}", inst.seed)
                });
                brute += weights[u][c] * r;
            }
        }
        let g = expected_regret(inst, &model, Averaging::UserDist)?;
        t.check((g - brute).abs() <= 1e-12 * (1.0 + brute), || {
            format!("instance seed {} trial {trial}: expected {g} vs brute {brute}", inst.seed)
        });
    }
    Ok(t.finish())
}
