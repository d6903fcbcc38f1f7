//! Executable certification of the performance, safety and structural bounds
//! on exactly solvable instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::absorbing::{build_absorbing, intervention_probability, intervention_probability_segments, AbsorbingMdp};
use crate::env::random::{random_cmdp_with, random_deterministic_policy, random_policy, RandomMdpSpec};
use crate::env::toy::{appendix_b_counterexample, fig2_toy};
use crate::error::{structural, Result, SailrError};
use crate::mdp::{
    chance_constraint_value, discounted_average_value, evaluate_policy, occupancy, performance_difference,
    value_iteration, FiniteMdp, RewardKind, TabularPolicy,
};
use crate::rules::{
    build_intervention_set, certify_admissibility, compose_rules, is_partial, make_baseline_rule, make_optimal_rule,
    perturb_rule, pessimism_gap, shield, shield_with_set, value_iterate_rule, InterventionRule, InterventionSet,
};

/// Default tolerance on `slack`.
pub const DEFAULT_TOL: f64 = 1e-6;
/// Tolerance for the certified-slack claims of the rule constructions.
pub const SIGMA_TOL: f64 = 1e-8;
/// Occupancy entries above this count as support.
pub const SUPPORT_TOL: f64 = 1e-12;
const VI_TOL: f64 = 1e-13;
const OPTIMAL_GAP: f64 = 1e-10;
const MAX_ENUMERATED_POLICIES: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub check_name: String,
    pub instance_fingerprint: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub holds: bool,
    pub expected_failure: bool,
}

impl BoundCheck {
    /// Checks `lhs <= rhs` up to `tol`.
    pub fn le(name: &str, fingerprint: &str, lhs: f64, rhs: f64, tol: f64) -> Self {
        let slack = rhs - lhs;
        Self {
            check_name: name.to_string(),
            instance_fingerprint: fingerprint.to_string(),
            lhs,
            rhs,
            slack,
            holds: slack >= -tol && slack.is_finite(),
            expected_failure: false,
        }
    }

    pub fn expecting_failure(mut self, expected: bool) -> Self {
        self.expected_failure = expected;
        self
    }

    /// A failure nobody predicted, or a predicted failure that did not occur.
    pub fn is_unexpected(&self) -> bool {
        self.holds == self.expected_failure
    }
}

/// `seed=<n>;cfg=<first 16 hex digits of sha256(config)>`.
pub fn fingerprint(seed: u64, config: &str) -> String {
    let digest = Sha256::digest(config.as_bytes());
    format!("seed={seed};cfg={}", &hex::encode(digest)[..16])
}

fn d0_value(mdp: &impl AsRef<crate::mdp::TabularModel>, policy: &TabularPolicy, kind: RewardKind) -> Result<f64> {
    let m = mdp.as_ref();
    Ok(evaluate_policy(m, policy, kind)?.at(m.d0()))
}

/// Exact optimum of `M~` restricted back to the base states, with `Vtilde*(d0)`.
fn solve_absorbing(abs: &AbsorbingMdp) -> Result<(TabularPolicy, f64)> {
    let (vf, pi) = value_iteration(abs, RewardKind::Reward, VI_TOL)?;
    Ok((abs.restrict_policy(&pi)?, vf.at(abs.d0())))
}

/// Coefficients of the deployment bounds for a general penalty. At
/// `penalty = -1` they reduce to `2 / (1 - gamma)` and `1`.
fn deployment_coefficients(gamma: f64, penalty: f64) -> (f64, f64) {
    let r = penalty.abs();
    let perf = (2.0 / (1.0 - gamma)).max(r + 1.0 / (1.0 - gamma));
    let eps = if r > 0.0 { (1.0f64).max(1.0 / r) } else { f64::INFINITY };
    (perf, eps)
}

/// Deployment bounds for an arbitrary learned policy `pi_hat`:
/// `V^{pi*}(d0) - V^{pi_hat}(d0) <= c P_G(pi*) + eps` and
/// `Vbar^{pi_hat}(d0) <= Qbar(d0,mu) + min(sigma + eta, 2 gamma)/(1-gamma) + eps'`,
/// with `eps` measured exactly on `M~`.
pub fn check_deployment_bounds_with_policy(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    comparator: &TabularPolicy,
    pi_hat: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 2]> {
    if !(penalty < 0.0) {
        return Err(SailrError::Contract("deployment bounds need a negative penalty".into()));
    }
    let set = build_intervention_set(rule);
    let abs = build_absorbing(mdp, &set, penalty)?;
    let (_, v_star) = solve_absorbing(&abs)?;
    let v_hat_tilde = d0_value(&abs, &abs.extend_policy(pi_hat)?, RewardKind::Reward)?;
    let eps = (v_star - v_hat_tilde).max(0.0);
    let g = mdp.gamma();
    let (perf_coef, eps_coef) = deployment_coefficients(g, penalty);
    let pg = intervention_probability(mdp, &set, comparator)?;
    let v_cmp = d0_value(mdp, comparator, RewardKind::Reward)?;
    let v_hat = d0_value(mdp, pi_hat, RewardKind::Reward)?;
    let perf = BoundCheck::le(
        "deployment.performance",
        fp,
        v_cmp - v_hat,
        perf_coef * pg + eps,
        DEFAULT_TOL,
    );
    let sigma = certify_admissibility(mdp, rule)?.sigma_min;
    let cost_hat = d0_value(mdp, pi_hat, RewardKind::Cost)?;
    let rhs = rule.qbar_mu_at(mdp.d0()) + (sigma + rule.eta()).min(2.0 * g) / (1.0 - g) + eps_coef * eps;
    let safety = BoundCheck::le("deployment.safety", fp, cost_hat, rhs, DEFAULT_TOL);
    Ok([perf, safety])
}

/// Deployment bounds with `pi_hat` the exact optimum of `M~`.
pub fn check_deployment_bounds(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    comparator: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 2]> {
    let set = build_intervention_set(rule);
    let abs = build_absorbing(mdp, &set, penalty)?;
    let (pi_hat, _) = solve_absorbing(&abs)?;
    check_deployment_bounds_with_policy(mdp, rule, comparator, &pi_hat, penalty, fp)
}

/// `Vbar^{pi'}(d0) <= Qbar(d0,mu) + min(sigma + eta, 2 gamma)/(1-gamma)`.
pub fn check_shielded_safety(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    policy: &TabularPolicy,
    fp: &str,
) -> Result<BoundCheck> {
    let shielded = shield(policy, rule)?;
    let lhs = d0_value(mdp, &shielded.policy, RewardKind::Cost)?;
    let g = mdp.gamma();
    let sigma = certify_admissibility(mdp, rule)?.sigma_min;
    let rhs = rule.qbar_mu_at(mdp.d0()) + (sigma + rule.eta()).min(2.0 * g) / (1.0 - g);
    Ok(BoundCheck::le("shielded.safety", fp, lhs, rhs, DEFAULT_TOL))
}

/// With the rule `(Qbar^mu, mu, 0)` the shielded policy is no less safe than `mu`.
pub fn check_motivating_example(
    mdp: &FiniteMdp,
    mu: &TabularPolicy,
    policy: &TabularPolicy,
    fp: &str,
) -> Result<BoundCheck> {
    let rule = make_baseline_rule(mdp, mu, 0.0, false)?;
    let shielded = shield(policy, &rule)?;
    let lhs = d0_value(mdp, &shielded.policy, RewardKind::Cost)?;
    let rhs = d0_value(mdp, mu, RewardKind::Cost)?;
    Ok(BoundCheck::le("shielded.baseline_no_worse", fp, lhs, rhs, DEFAULT_TOL))
}

/// `|R~| P_G <= V - Vtilde <= (|R~| + 1/(1-gamma)) P_G`.
pub fn check_value_offset_set(
    mdp: &FiniteMdp,
    set: &InterventionSet,
    policy: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 2]> {
    let abs = build_absorbing(mdp, set, penalty)?;
    let v = d0_value(mdp, policy, RewardKind::Reward)?;
    let vt = d0_value(&abs, &abs.extend_policy(policy)?, RewardKind::Reward)?;
    let pg = intervention_probability(mdp, set, policy)?;
    let r = penalty.abs();
    let lower = BoundCheck::le("lemma.value_offset.lower", fp, r * pg, v - vt, 1e-8);
    let upper = BoundCheck::le(
        "lemma.value_offset.upper",
        fp,
        v - vt,
        (r + 1.0 / (1.0 - mdp.gamma())) * pg,
        1e-8,
    );
    Ok([lower, upper])
}

pub fn check_value_offset(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    policy: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 2]> {
    check_value_offset_set(mdp, &build_intervention_set(rule), policy, penalty, fp)
}

/// Every deterministic policy over the safe states, in lexicographic order.
fn deterministic_policies(mdp: &FiniteMdp) -> Option<Vec<TabularPolicy>> {
    let safe: Vec<usize> = mdp.safe_states().collect();
    let na = mdp.num_actions();
    let count = (na as f64).powi(safe.len() as i32);
    if count > MAX_ENUMERATED_POLICIES as f64 {
        return None;
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut digits = vec![0usize; safe.len()];
    loop {
        let mut actions = vec![0usize; mdp.num_states()];
        for (i, &s) in safe.iter().enumerate() {
            actions[s] = digits[i];
        }
        out.push(TabularPolicy::deterministic(mdp.num_states(), na, &actions).expect("in range"));
        let mut i = 0;
        loop {
            if i == digits.len() {
                return Some(out);
            }
            digits[i] += 1;
            if digits[i] < na {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

/// Largest `P_G` over optimal policies of `M~`: the value-iteration policy
/// and, when `|S| * |A| <= 30`, every deterministic policy whose value at
/// `d0` is within `1e-10` of the optimum.
pub fn max_optimal_intervention_probability(mdp: &FiniteMdp, set: &InterventionSet, penalty: f64) -> Result<f64> {
    let abs = build_absorbing(mdp, set, penalty)?;
    let (pi_star, v_star) = solve_absorbing(&abs)?;
    let mut worst = intervention_probability(mdp, set, &pi_star)?;
    if mdp.num_states() * mdp.num_actions() <= 30 {
        if let Some(all) = deterministic_policies(mdp) {
            for pi in all {
                let v = d0_value(&abs, &abs.extend_policy(&pi)?, RewardKind::Reward)?;
                if v >= v_star - OPTIMAL_GAP {
                    worst = worst.max(intervention_probability(mdp, set, &pi)?);
                }
            }
        }
    }
    Ok(worst)
}

/// Optimal policies of `M~` never enter the set.
pub fn check_optimal_purity_set(
    mdp: &FiniteMdp,
    set: &InterventionSet,
    penalty: f64,
    expected_failure: bool,
    fp: &str,
) -> Result<BoundCheck> {
    let worst = max_optimal_intervention_probability(mdp, set, penalty)?;
    Ok(
        BoundCheck::le("proposition.optimal_policy_not_intervened", fp, worst, 0.0, 1e-9)
            .expecting_failure(expected_failure),
    )
}

pub fn check_optimal_purity(mdp: &FiniteMdp, rule: &InterventionRule, penalty: f64, fp: &str) -> Result<BoundCheck> {
    let set = build_intervention_set(rule);
    let expected = !is_partial(&set) || !(penalty < 0.0);
    check_optimal_purity_set(mdp, &set, penalty, expected, fp)
}

/// `max (Qbar^mu - Qbar) <= sigma / (1 - gamma)`.
pub fn check_pessimism(mdp: &FiniteMdp, rule: &InterventionRule, fp: &str) -> Result<BoundCheck> {
    let gap = pessimism_gap(mdp, rule)?;
    let sigma = certify_admissibility(mdp, rule)?.sigma_min;
    Ok(BoundCheck::le(
        "proposition.pessimism",
        fp,
        gap,
        sigma / (1.0 - mdp.gamma()),
        SIGMA_TOL,
    ))
}

/// Whether `(Qbar, mu, 0)` is admissible with `Qbar(d0, mu) = Vbar*(d0)`.
pub fn in_optimal_safety_class(mdp: &FiniteMdp, rule: &InterventionRule) -> Result<bool> {
    if rule.eta() != 0.0 {
        return Ok(false);
    }
    let (vf, _) = value_iteration(mdp, RewardKind::Cost, VI_TOL)?;
    let rep = certify_admissibility(mdp, rule)?;
    Ok(rep.sigma_min <= 1e-10 && (rule.qbar_mu_at(mdp.d0()) - vf.at(mdp.d0())).abs() <= 1e-9)
}

/// A member of the optimal-safety class built from a backup that follows
/// `pibar*` where `pibar*` goes from `d0` and acts randomly elsewhere.
pub fn make_optimal_class_member<R: Rng + ?Sized>(mdp: &FiniteMdp, rng: &mut R) -> Result<InterventionRule> {
    let (_, pi_star) = value_iteration(mdp, RewardKind::Cost, VI_TOL)?;
    let d = occupancy(mdp, &pi_star)?.state_marginal();
    let na = mdp.num_actions();
    let noise = random_policy(mdp.num_states(), na, 0.5, rng);
    let mut probs = noise.table().to_vec();
    for s in 0..mdp.num_states() {
        if d[s] > SUPPORT_TOL {
            probs[s * na..(s + 1) * na].copy_from_slice(pi_star.row(s));
        }
    }
    let mu = TabularPolicy::new(mdp.num_states(), na, probs)?;
    make_baseline_rule(mdp, &mu, 0.0, false)
}

/// Support of `d~^pi` on the base pairs under `rule` is contained in the
/// support under the optimal rule. `None` when the rule is outside the
/// optimal-safety class, where the claim is vacuous.
pub fn check_support_containment(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    policy: &TabularPolicy,
    fp: &str,
) -> Result<Option<BoundCheck>> {
    if !in_optimal_safety_class(mdp, rule)? {
        return Ok(None);
    }
    let opt = make_optimal_rule(mdp, 0.0)?;
    let support = |r: &InterventionRule| -> Result<Vec<bool>> {
        let abs = build_absorbing(mdp, &build_intervention_set(r), -1.0)?;
        let d = occupancy(&abs, &abs.extend_policy(policy)?)?;
        let n = mdp.num_states() * mdp.num_actions();
        Ok(d.d[..n].iter().map(|&x| x > SUPPORT_TOL).collect())
    };
    let sg = support(rule)?;
    let so = support(&opt)?;
    let missing = sg.iter().zip(&so).filter(|(a, b)| **a && !**b).count();
    Ok(Some(BoundCheck::le(
        "proposition.support_containment",
        fp,
        missing as f64,
        0.0,
        0.0,
    )))
}

/// Renormalizes the non-intervened mass of `pi`; states where `pi` puts all
/// of its mass on the set get a uniform row over the free actions.
pub fn safer_policy(policy: &TabularPolicy, set: &InterventionSet) -> Result<TabularPolicy> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let free: Vec<usize> = (0..na).filter(|&a| !set.contains(s, a)).collect();
        if free.is_empty() {
            return Err(structural(format!("state {s} has no free action")));
        }
        let mass: f64 = free.iter().map(|&a| policy.prob(s, a)).sum();
        for &a in &free {
            probs[s * na + a] = if mass > 0.0 {
                policy.prob(s, a) / mass
            } else {
                1.0 / free.len() as f64
            };
        }
    }
    TabularPolicy::new(ns, na, probs)
}

/// `Vtilde^{pi_f} >= Vtilde^pi`, with the gap at least `|R~| P_G(pi)` (so
/// strict whenever `pi` enters the set), and `P_G(pi_f) = 0`.
pub fn check_safer_policy(
    mdp: &FiniteMdp,
    set: &InterventionSet,
    policy: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 3]> {
    let pf = safer_policy(policy, set)?;
    let abs = build_absorbing(mdp, set, penalty)?;
    let v = d0_value(&abs, &abs.extend_policy(policy)?, RewardKind::Reward)?;
    let vf = d0_value(&abs, &abs.extend_policy(&pf)?, RewardKind::Reward)?;
    let pg = intervention_probability(mdp, set, policy)?;
    let pg_f = intervention_probability(mdp, set, &pf)?;
    Ok([
        BoundCheck::le("lemma.safer_policy.monotone", fp, v, vf, 1e-9),
        BoundCheck::le("lemma.safer_policy.strict_gap", fp, penalty.abs() * pg, vf - v, 1e-9),
        BoundCheck::le("lemma.safer_policy.never_intervened", fp, pg_f, 0.0, 1e-12),
    ])
}

/// For an arbitrary `pi` that is `eps`-suboptimal in `M~`:
/// `V^{pi*} - V^pi <= (|R~| + 1/(1-gamma)) P_G(pi*) + eps` and
/// `Vbar^pi <= Vbar^{pi'} + eps / |R~|`.
pub fn check_performance_and_safety(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    policy: &TabularPolicy,
    comparator: &TabularPolicy,
    penalty: f64,
    fp: &str,
) -> Result<[BoundCheck; 2]> {
    if !(penalty < 0.0) {
        return Err(SailrError::Contract("the reduction needs a negative penalty".into()));
    }
    let set = build_intervention_set(rule);
    let abs = build_absorbing(mdp, &set, penalty)?;
    let (_, v_star) = solve_absorbing(&abs)?;
    let vt = d0_value(&abs, &abs.extend_policy(policy)?, RewardKind::Reward)?;
    let eps = (v_star - vt).max(0.0);
    let r = penalty.abs();
    let g = mdp.gamma();
    let pg = intervention_probability(mdp, &set, comparator)?;
    let perf = BoundCheck::le(
        "proposition.reduction.performance",
        fp,
        d0_value(mdp, comparator, RewardKind::Reward)? - d0_value(mdp, policy, RewardKind::Reward)?,
        (r + 1.0 / (1.0 - g)) * pg + eps,
        1e-8,
    );
    let shielded = shield_with_set(policy, rule.backup(), &set)?;
    let safety = BoundCheck::le(
        "proposition.reduction.safety",
        fp,
        d0_value(mdp, policy, RewardKind::Cost)?,
        d0_value(mdp, &shielded.policy, RewardKind::Cost)? + eps / r,
        1e-8,
    );
    Ok([perf, safety])
}

/// `Abar(s, pi') <= eta` at every safe state.
pub fn check_shielded_advantage(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    policy: &TabularPolicy,
    fp: &str,
) -> Result<BoundCheck> {
    let shielded = shield(policy, rule)?;
    let mut worst = f64::NEG_INFINITY;
    for s in mdp.safe_states() {
        let adv: f64 = (0..mdp.num_actions())
            .map(|a| shielded.policy.prob(s, a) * rule.advantage(s, a))
            .sum();
        worst = worst.max(adv);
    }
    Ok(BoundCheck::le("lemma.shielded_advantage", fp, worst, rule.eta(), 1e-10))
}

/// `1 - chance_constraint_value = Vbar^pi(d0)` within truncation error.
pub fn check_cmdp_equivalence(mdp: &FiniteMdp, policy: &TabularPolicy, fp: &str) -> Result<BoundCheck> {
    let cap = horizon_for(mdp.gamma(), 1e-9);
    let chance = chance_constraint_value(mdp, policy, cap)?;
    let vbar = d0_value(mdp, policy, RewardKind::Cost)?;
    Ok(BoundCheck::le(
        "lemma.cmdp_equivalence",
        fp,
        ((1.0 - chance.value) - vbar).abs(),
        chance.truncation_error,
        1e-6,
    ))
}

/// Smallest `H` with `gamma^(H+1) <= target`.
pub fn horizon_for(gamma: f64, target: f64) -> usize {
    if gamma <= 0.0 {
        return 0;
    }
    ((target.ln() / gamma.ln()).ceil() as usize).saturating_sub(1).max(1)
}

/// Discounted-average identity, performance difference identity and the
/// occupancy identity `V(d0) = E_d[r] / (1-gamma)` for one policy.
pub fn check_core_identities<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    policy: &TabularPolicy,
    rng: &mut R,
    fp: &str,
) -> Result<[BoundCheck; 3]> {
    let g = mdp.gamma();
    let v = d0_value(mdp, policy, RewardKind::Reward)?;
    let h = horizon_for(g, 1e-12).max(50);
    let avg = discounted_average_value(mdp, policy, RewardKind::Reward, h, 1.0)?;
    let f: Vec<f64> = (0..mdp.num_states()).map(|_| rng.random::<f64>()).collect();
    let f_d0: f64 = mdp.d0().iter().zip(&f).map(|(p, x)| p * x).sum();
    let pdl = performance_difference(mdp, policy, &f)?;
    let d = occupancy(mdp, policy)?;
    let occ = d.expect(mdp.signal(RewardKind::Reward)) / (1.0 - g);
    Ok([
        BoundCheck::le(
            "lemma.discounted_average",
            fp,
            (v - avg.value).abs(),
            avg.truncation_error,
            1e-8,
        ),
        BoundCheck::le("lemma.performance_difference", fp, ((v - f_d0) - pdl).abs(), 0.0, 1e-8),
        BoundCheck::le("identity.occupancy_value", fp, (v - occ).abs(), 0.0, 1e-8),
    ])
}

/// Certified-slack claims of every rule construction plus partiality and
/// pessimism of the rules built along the way.
pub fn check_admissibility_family(mdp: &FiniteMdp, seed: u64, fp: &str) -> Result<Vec<BoundCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let g = mdp.gamma();
    let eta = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..0.1)
    };
    let sigma = |r: &InterventionRule| certify_admissibility(mdp, r).map(|x| x.sigma_min);
    let mut out = Vec::new();

    let mu1 = random_policy(ns, na, 0.3, &mut rng);
    let mu2 = random_deterministic_policy(ns, na, &mut rng);
    let base1 = make_baseline_rule(mdp, &mu1, eta, false)?;
    let base2 = make_baseline_rule(mdp, &mu2, eta, false)?;
    let improved = make_baseline_rule(mdp, &mu1, eta, true)?;
    out.push(BoundCheck::le(
        "admissibility.baseline",
        fp,
        sigma(&base1)?,
        0.0,
        SIGMA_TOL,
    ));
    out.push(BoundCheck::le(
        "admissibility.baseline",
        fp,
        sigma(&base2)?,
        0.0,
        SIGMA_TOL,
    ));
    out.push(BoundCheck::le(
        "admissibility.baseline_improved",
        fp,
        sigma(&improved)?,
        0.0,
        SIGMA_TOL,
    ));
    let worst_improvement = mdp
        .safe_states()
        .map(|s| improved.qbar_mu(s) - base1.qbar_mu(s))
        .fold(f64::NEG_INFINITY, f64::max);
    out.push(BoundCheck::le(
        "admissibility.improved_backup_no_worse",
        fp,
        worst_improvement,
        0.0,
        1e-12,
    ));

    let d1 = rng.random_range(0.0..0.1);
    let d2 = rng.random_range(0.0..0.1);
    let p1 = perturb_rule(mdp, &base1, d1, &mut rng)?;
    let p2 = perturb_rule(mdp, &base2, d2, &mut rng)?;
    let (s1, s2) = (sigma(&p1)?, sigma(&p2)?);
    out.push(BoundCheck::le(
        "admissibility.perturbation",
        fp,
        s1,
        sigma(&base1)? + (1.0 + g) * d1,
        SIGMA_TOL,
    ));
    out.push(BoundCheck::le(
        "admissibility.perturbation",
        fp,
        s2,
        sigma(&base2)? + (1.0 + g) * d2,
        SIGMA_TOL,
    ));

    let comp = compose_rules(mdp, &[p1.clone(), p2.clone()], eta)?;
    out.push(BoundCheck::le(
        "admissibility.composite",
        fp,
        sigma(&comp)?,
        s1.max(s2),
        SIGMA_TOL,
    ));

    let mut built = vec![base1, base2, improved, p1.clone(), p2, comp];
    for k in 0..=4usize {
        let vk = value_iterate_rule(mdp, &p1, k, eta)?;
        out.push(BoundCheck::le(
            &format!("admissibility.value_iteration.k{k}"),
            fp,
            sigma(&vk)?,
            g.powi(k as i32) * s1,
            SIGMA_TOL,
        ));
        built.push(vk);
    }
    let opt = make_optimal_rule(mdp, eta)?;
    out.push(BoundCheck::le(
        "admissibility.optimal",
        fp,
        sigma(&opt)?,
        0.0,
        SIGMA_TOL,
    ));
    built.push(opt);

    for r in &built {
        let partial = is_partial(&build_intervention_set(r));
        out.push(BoundCheck::le(
            "partiality",
            fp,
            if partial { 0.0 } else { 1.0 },
            0.0,
            0.0,
        ));
        out.push(check_pessimism(mdp, r, fp)?);
    }
    Ok(out)
}

/// How a sweep instance builds its rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Baseline,
    BaselineImproved,
    Optimal,
    Perturbed,
    ValueIterated,
    Composite,
}

impl RuleKind {
    pub const ALL: [RuleKind; 6] = [
        RuleKind::Baseline,
        RuleKind::BaselineImproved,
        RuleKind::Optimal,
        RuleKind::Perturbed,
        RuleKind::ValueIterated,
        RuleKind::Composite,
    ];
}

/// Builds a certified rule of the requested kind.
pub fn make_rule<R: Rng + ?Sized>(mdp: &FiniteMdp, kind: RuleKind, eta: f64, rng: &mut R) -> Result<InterventionRule> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mu = random_policy(ns, na, 0.5, rng);
    match kind {
        RuleKind::Baseline => make_baseline_rule(mdp, &mu, eta, false),
        RuleKind::BaselineImproved => make_baseline_rule(mdp, &mu, eta, true),
        RuleKind::Optimal => make_optimal_rule(mdp, eta),
        RuleKind::Perturbed => {
            let base = make_baseline_rule(mdp, &mu, eta, false)?;
            let delta = rng.random_range(0.0..0.15);
            perturb_rule(mdp, &base, delta, rng)
        }
        RuleKind::ValueIterated => {
            let base = make_baseline_rule(mdp, &mu, eta, false)?;
            let delta = rng.random_range(0.0..0.15);
            let p = perturb_rule(mdp, &base, delta, rng)?;
            value_iterate_rule(mdp, &p, 2, eta)
        }
        RuleKind::Composite => {
            let mu2 = random_deterministic_policy(ns, na, rng);
            let a = make_baseline_rule(mdp, &mu, eta, false)?;
            let b = make_baseline_rule(mdp, &mu2, eta, false)?;
            compose_rules(mdp, &[a, b], eta)
        }
    }
}

/// Per-instance diagnostic comparing the two forms of `P_G`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgSample {
    pub gamma: f64,
    pub occupancy_form: f64,
    pub segment_form: f64,
}

/// Runs every per-instance check on one `(mdp, rule)` pair.
pub fn instance_checks(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    seed: u64,
    fp: &str,
) -> Result<(Vec<BoundCheck>, Vec<PgSample>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let set = build_intervention_set(rule);
    let mut checks = Vec::new();
    let mut pg = Vec::new();
    let mut skipped = 0;

    let (_, unconstrained) = value_iteration(mdp, RewardKind::Reward, VI_TOL)?;
    let mut comparators = vec![unconstrained.clone(), rule.backup().clone()];
    for i in 0..10 {
        comparators.push(random_policy(ns, na, if i % 2 == 0 { 1.0 } else { 0.3 }, &mut rng));
    }
    for c in &comparators {
        checks.extend(check_deployment_bounds(mdp, rule, c, -1.0, fp)?);
        let occ = intervention_probability(mdp, &set, c)?;
        let seg = intervention_probability_segments(mdp, &set, c, horizon_for(mdp.gamma(), 1e-13))?;
        pg.push(PgSample {
            gamma: mdp.gamma(),
            occupancy_form: occ,
            segment_form: seg.value,
        });
    }
    for c in comparators.iter().take(4) {
        checks.push(check_shielded_safety(mdp, rule, c, fp)?);
        checks.push(check_shielded_advantage(mdp, rule, c, fp)?);
        checks.push(check_cmdp_equivalence(mdp, c, fp)?);
        checks.extend(check_core_identities(mdp, c, &mut rng, fp)?);
    }
    let mu = random_policy(ns, na, 0.5, &mut rng);
    let pi = random_policy(ns, na, 0.5, &mut rng);
    checks.push(check_motivating_example(mdp, &mu, &pi, fp)?);
    checks.push(check_motivating_example(mdp, &mu, &unconstrained, fp)?);

    let penalties = [-1.0, -0.5, -2.0];
    let partial = is_partial(&set);
    for (i, &r) in penalties.iter().enumerate() {
        let pol = &comparators[i % comparators.len()];
        checks.extend(check_value_offset_set(mdp, &set, pol, r, fp)?);
        checks.push(check_optimal_purity_set(mdp, &set, r, !partial, fp)?);
        if partial {
            checks.extend(check_safer_policy(mdp, &set, &comparators[2 + i], r, fp)?);
        }
    }
    checks.extend(check_value_offset_set(mdp, &set, &comparators[3], 0.0, fp)?);
    if partial {
        checks.extend(check_safer_policy(mdp, &set, &comparators[5], 0.0, fp)?);
    }
    checks.push(check_pessimism(mdp, rule, fp)?);

    // eps-suboptimal learners: mixtures of the surrogate optimum with noise
    let abs = build_absorbing(mdp, &set, -1.0)?;
    let (opt_tilde, _) = solve_absorbing(&abs)?;
    for lambda in [0.05, 0.3, 1.0] {
        let noise = random_policy(ns, na, 0.0, &mut rng);
        let mixed: Vec<f64> = opt_tilde
            .table()
            .iter()
            .zip(noise.table())
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        let mixed = TabularPolicy::new(ns, na, mixed)?;
        for r in [-1.0, -2.0] {
            checks.extend(check_performance_and_safety(mdp, rule, &mixed, &unconstrained, r, fp)?);
        }
        checks.extend(check_deployment_bounds_with_policy(
            mdp,
            rule,
            &unconstrained,
            &mixed,
            -1.0,
            fp,
        )?);
    }

    let member = make_optimal_class_member(mdp, &mut rng)?;
    for c in comparators.iter().take(3) {
        match check_support_containment(mdp, &member, c, fp)? {
            Some(chk) => checks.push(chk),
            None => skipped += 1,
        }
        if let Some(chk) = check_support_containment(mdp, &make_optimal_rule(mdp, 0.0)?, c, fp)? {
            checks.push(chk);
        }
    }
    checks.extend(check_admissibility_family(mdp, seed.wrapping_add(1), fp)?);
    Ok((checks, pg, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Number of random instances.
    pub instances: usize,
    pub min_safe_states: usize,
    /// Safe states per instance; with the two meta-states the total is at
    /// most `max_safe_states + 2`.
    pub max_safe_states: usize,
    pub max_actions: usize,
    pub unsafe_reach_prob: f64,
    pub include_fig2: bool,
    pub include_appendix_b: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 200,
            min_safe_states: 2,
            max_safe_states: 4,
            max_actions: 3,
            unsafe_reach_prob: 0.5,
            include_fig2: true,
            include_appendix_b: false,
        }
    }
}

impl SuiteConfig {
    pub fn empty() -> Self {
        Self {
            instances: 0,
            include_fig2: false,
            include_appendix_b: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckTally {
    pub total: usize,
    pub passed: usize,
    pub expected_failures: usize,
    pub unexpected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub instances: usize,
    pub total: usize,
    pub passed: usize,
    pub expected_failures: usize,
    pub unexpected_failures: usize,
    /// Support checks skipped because the candidate rule was outside the
    /// optimal-safety class.
    pub skipped: usize,
    pub by_check: BTreeMap<String, CheckTally>,
}

/// The two forms of the intervention probability differ by a factor of
/// `gamma`: the segment form counts pairs strictly before `h`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PgDiscrepancy {
    pub samples: usize,
    /// `max |segment - occupancy|`.
    pub max_gap_raw: f64,
    /// `max |segment - gamma * occupancy|`.
    pub max_gap_after_gamma: f64,
    /// Largest occupancy-form value seen.
    pub max_occupancy_form: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub config: Option<SuiteConfig>,
    pub summary: ReportSummary,
    pub pg_discrepancy: PgDiscrepancy,
    pub checks: Vec<BoundCheck>,
}

impl VerificationReport {
    pub fn from_checks(
        config: Option<SuiteConfig>,
        instances: usize,
        checks: Vec<BoundCheck>,
        pg: &[PgSample],
        skipped: usize,
    ) -> Self {
        let mut summary = ReportSummary {
            instances,
            skipped,
            ..Default::default()
        };
        for c in &checks {
            let t = summary.by_check.entry(c.check_name.clone()).or_default();
            t.total += 1;
            summary.total += 1;
            if c.holds && !c.expected_failure {
                t.passed += 1;
                summary.passed += 1;
            }
            if !c.holds && c.expected_failure {
                t.expected_failures += 1;
                summary.expected_failures += 1;
            }
            if c.is_unexpected() {
                t.unexpected += 1;
                summary.unexpected_failures += 1;
            }
        }
        let mut disc = PgDiscrepancy {
            samples: pg.len(),
            ..Default::default()
        };
        for s in pg {
            disc.max_gap_raw = disc.max_gap_raw.max((s.segment_form - s.occupancy_form).abs());
            disc.max_gap_after_gamma = disc
                .max_gap_after_gamma
                .max((s.segment_form - s.gamma * s.occupancy_form).abs());
            disc.max_occupancy_form = disc.max_occupancy_form.max(s.occupancy_form);
        }
        Self {
            config,
            summary,
            pg_discrepancy: disc,
            checks,
        }
    }

    pub fn unexpected_failures(&self) -> usize {
        self.summary.unexpected_failures
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Derives an independent 64-bit seed for instance `i`.
pub fn instance_seed(seed: u64, i: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One random sweep instance.
pub struct SweepInstance {
    pub mdp: FiniteMdp,
    pub rule: InterventionRule,
    pub kind: RuleKind,
    pub seed: u64,
    pub fingerprint: String,
}

pub fn sweep_instance(cfg: &SuiteConfig, i: usize) -> Result<SweepInstance> {
    let seed = instance_seed(cfg.seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas = [0.5, 0.8, 0.9, 0.95];
    let spec = RandomMdpSpec {
        num_safe_states: rng.random_range(cfg.min_safe_states..=cfg.max_safe_states),
        num_actions: rng.random_range(2..=cfg.max_actions.max(2)),
        unsafe_reach_prob: cfg.unsafe_reach_prob,
        gamma: gammas[rng.random_range(0..gammas.len())],
        max_successors: 3,
    };
    let mdp = random_cmdp_with(&spec, seed)?;
    let kind = RuleKind::ALL[i % RuleKind::ALL.len()];
    let eta = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..0.1)
    };
    let rule = make_rule(&mdp, kind, eta, &mut rng)?;
    let cfg_text = format!(
        "random;safe={};actions={};gamma={};reach={};rule={:?};eta={eta}",
        spec.num_safe_states, spec.num_actions, spec.gamma, spec.unsafe_reach_prob, kind
    );
    Ok(SweepInstance {
        fingerprint: fingerprint(seed, &cfg_text),
        mdp,
        rule,
        kind,
        seed,
    })
}

/// Checks on the non-partial counterexample family. Entering the set is a
/// predicted failure whenever `1 + gamma^(T+1) R~ > 0`.
pub fn appendix_b_checks() -> Result<Vec<BoundCheck>> {
    let mut out = Vec::new();
    for chain in [0usize, 1, 3] {
        let (mdp, set) = appendix_b_counterexample(chain);
        for penalty in [-0.5, -2.0] {
            let fp = fingerprint(0, &format!("appendix_b;chain={chain};penalty={penalty}"));
            let through = 1.0 + mdp.gamma().powi(chain as i32 + 1) * penalty;
            let predicted_entry = through > 0.0;
            out.push(check_optimal_purity_set(&mdp, &set, penalty, predicted_entry, &fp)?);
            let abs = build_absorbing(&mdp, &set, penalty)?;
            let (_, v) = solve_absorbing(&abs)?;
            out.push(BoundCheck::le(
                "appendix_b.optimal_value",
                &fp,
                (v - through.max(0.0)).abs(),
                0.0,
                1e-9,
            ));
        }
    }
    Ok(out)
}

/// Checks on the four-state example with its own rule and the optimal rule.
pub fn fig2_checks() -> Result<(Vec<BoundCheck>, Vec<PgSample>, usize)> {
    let (mdp, rule) = fig2_toy();
    let fp = fingerprint(0, "fig2");
    let mut checks = Vec::new();
    let rep = certify_admissibility(&mdp, &rule)?;
    checks.push(BoundCheck::le("fig2.sigma_min", &fp, rep.sigma_min, 0.25, 1e-12));
    let (mut c1, pg1, sk1) = instance_checks(&mdp, &rule, 2, &fp)?;
    checks.append(&mut c1);
    let opt = make_optimal_rule(&mdp, 0.0)?;
    let fp2 = fingerprint(0, "fig2;optimal");
    let (mut c2, mut pg2, sk2) = instance_checks(&mdp, &opt, 3, &fp2)?;
    checks.append(&mut c2);
    let mut pg = pg1;
    pg.append(&mut pg2);
    Ok((checks, pg, sk1 + sk2))
}

/// Runs the whole corpus. Instances are spread over `workers` threads and
/// reassembled in index order, so the report does not depend on `workers`.
pub fn run_full_suite_with_workers(cfg: &SuiteConfig, workers: usize) -> Result<VerificationReport> {
    if cfg.min_safe_states < 2 || cfg.max_safe_states < cfg.min_safe_states || cfg.max_actions < 2 {
        return Err(SailrError::Contract(
            "suite sizes need >= 2 safe states and >= 2 actions".into(),
        ));
    }
    let workers = workers.max(1);
    let mut per_instance: Vec<Option<Result<(Vec<BoundCheck>, Vec<PgSample>, usize)>>> =
        (0..cfg.instances).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunk = cfg.instances.div_ceil(workers).max(1);
        let mut handles = Vec::new();
        for (w, slots) in per_instance.chunks_mut(chunk).enumerate() {
            handles.push(scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    let i = w * chunk + j;
                    *slot = Some(
                        sweep_instance(cfg, i)
                            .and_then(|inst| instance_checks(&inst.mdp, &inst.rule, inst.seed, &inst.fingerprint)),
                    );
                }
            }));
        }
        for h in handles {
            h.join().expect("verifier worker panicked");
        }
    });
    let mut checks = Vec::new();
    let mut pg = Vec::new();
    let mut skipped = 0;
    let mut instances = cfg.instances;
    if cfg.include_fig2 {
        let (c, p, s) = fig2_checks()?;
        checks.extend(c);
        pg.extend(p);
        skipped += s;
        instances += 2;
    }
    for slot in per_instance {
        let (c, p, s) = slot.expect("every slot is filled")?;
        checks.extend(c);
        pg.extend(p);
        skipped += s;
    }
    if cfg.include_appendix_b {
        checks.extend(appendix_b_checks()?);
        instances += 6;
    }
    Ok(VerificationReport::from_checks(
        Some(cfg.clone()),
        instances,
        checks,
        &pg,
        skipped,
    ))
}

pub fn run_full_suite(cfg: &SuiteConfig) -> Result<VerificationReport> {
    run_full_suite_with_workers(cfg, 1)
}

/// Checks one user-supplied instance.
pub fn verify_instance(mdp: &FiniteMdp, rule: &InterventionRule, seed: u64, label: &str) -> Result<VerificationReport> {
    let fp = fingerprint(seed, label);
    let (checks, pg, skipped) = instance_checks(mdp, rule, seed, &fp)?;
    Ok(VerificationReport::from_checks(None, 1, checks, &pg, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_semantics() {
        let c = BoundCheck::le("x", "fp", 1.0, 1.0 + 1e-9, 1e-6);
        assert!(c.holds && !c.is_unexpected());
        let c = BoundCheck::le("x", "fp", 1.0, 0.5, 1e-6);
        assert!(!c.holds && c.is_unexpected());
        let c = c.expecting_failure(true);
        assert!(!c.is_unexpected());
        let c = BoundCheck::le("x", "fp", 0.0, 1.0, 1e-6).expecting_failure(true);
        assert!(c.is_unexpected());
    }

    #[test]
    fn horizon_is_long_enough() {
        for g in [0.5, 0.9, 0.99] {
            let h = horizon_for(g, 1e-9);
            assert!(g.powi(h as i32 + 1) <= 1e-9 * 1.0001);
        }
    }

    #[test]
    fn fingerprints_differ_by_config() {
        assert_ne!(fingerprint(1, "a"), fingerprint(1, "b"));
        assert_eq!(fingerprint(1, "a"), fingerprint(1, "a"));
    }

    #[test]
    fn coefficients_reduce_at_unit_penalty() {
        let (p, e) = deployment_coefficients(0.9, -1.0);
        assert!((p - 20.0).abs() < 1e-12 && (e - 1.0).abs() < 1e-12);
    }
}
