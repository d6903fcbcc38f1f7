//! Advantage-based intervention rules `(Qbar, mu, eta)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result, SailrError};
use crate::mdp::{
    evaluate_policy, greedy_policy, sample_categorical, value_iteration, FiniteMdp, RewardKind, TabularPolicy,
};

/// Slack used when clamping values that rounding pushed just outside `[0, 1]`.
const ROUNDING_SLACK: f64 = 1e-9;

fn clamp_rounding(x: f64) -> f64 {
    if (-ROUNDING_SLACK..0.0).contains(&x) {
        0.0
    } else if x > 1.0 && x <= 1.0 + ROUNDING_SLACK {
        1.0
    } else {
        x
    }
}

/// Tabular rule over a specific MDP.
///
/// Rows of the two unsafe meta-states are overwritten with the boundary
/// convention `Qbar(violation, .) = 1` and `Qbar(sink, .) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRule {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    violation_state: usize,
    sink_state: usize,
    qbar: Vec<f64>,
    backup: TabularPolicy,
    eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleFile {
    pub qbar: Vec<Vec<f64>>,
    pub backup: Vec<Vec<f64>>,
    pub eta: f64,
}

impl InterventionRule {
    /// Validates a flat `[s][a]` table. Entries on safe states must be finite
    /// and in `[0, 1]`; `eta` must lie in `[0, 1]`.
    pub fn new(mdp: &FiniteMdp, mut qbar: Vec<f64>, backup: TabularPolicy, eta: f64) -> Result<Self> {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        if qbar.len() != ns * na {
            return Err(structural("Qbar table has the wrong size"));
        }
        if backup.num_states() != ns || backup.num_actions() != na {
            return Err(structural("backup policy does not match the MDP"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid(format!("threshold {eta} outside [0, 1]")));
        }
        for s in 0..ns {
            for a in 0..na {
                let i = s * na + a;
                if s == mdp.violation_state() {
                    qbar[i] = 1.0;
                } else if s == mdp.sink_state() {
                    qbar[i] = 0.0;
                } else if !qbar[i].is_finite() || !(0.0..=1.0).contains(&qbar[i]) {
                    return Err(invalid(format!("Qbar({s},{a}) = {} outside [0, 1]", qbar[i])));
                }
            }
        }
        Ok(Self {
            num_states: ns,
            num_actions: na,
            gamma: mdp.gamma(),
            violation_state: mdp.violation_state(),
            sink_state: mdp.sink_state(),
            qbar,
            backup,
            eta,
        })
    }

    pub fn from_rows(mdp: &FiniteMdp, qbar: Vec<Vec<f64>>, backup: TabularPolicy, eta: f64) -> Result<Self> {
        if qbar.len() != mdp.num_states() || qbar.iter().any(|r| r.len() != mdp.num_actions()) {
            return Err(structural("Qbar rows do not match the MDP"));
        }
        Self::new(mdp, qbar.into_iter().flatten().collect(), backup, eta)
    }

    pub fn from_file_repr(mdp: &FiniteMdp, file: RuleFile) -> Result<Self> {
        let backup = TabularPolicy::from_rows(file.backup)?;
        Self::from_rows(mdp, file.qbar, backup, file.eta)
    }

    pub fn to_file_repr(&self) -> RuleFile {
        RuleFile {
            qbar: self.qbar.chunks(self.num_actions).map(<[f64]>::to_vec).collect(),
            backup: self.backup.to_rows(),
            eta: self.eta,
        }
    }

    pub fn from_json(mdp: &FiniteMdp, text: &str) -> Result<Self> {
        Self::from_file_repr(mdp, serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file_repr()).expect("rule serializes");
        s.push('\n');
        s
    }

    pub fn load(mdp: &FiniteMdp, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(mdp, &std::fs::read_to_string(path)?)
    }

    /// Same table and backup with another threshold.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid(format!("threshold {eta} outside [0, 1]")));
        }
        let mut out = self.clone();
        out.eta = eta;
        Ok(out)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn qbar(&self, s: usize, a: usize) -> f64 {
        self.qbar[s * self.num_actions + a]
    }

    pub fn qbar_table(&self) -> &[f64] {
        &self.qbar
    }

    pub fn backup(&self) -> &TabularPolicy {
        &self.backup
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_unsafe(&self, s: usize) -> bool {
        s == self.violation_state || s == self.sink_state
    }

    /// `Qbar(s, mu) = sum_a mu(a|s) Qbar(s,a)`, kept inside the row's range
    /// so that rounding can never make every action look worse than `mu`.
    pub fn qbar_mu(&self, s: usize) -> f64 {
        let row = &self.qbar[s * self.num_actions..(s + 1) * self.num_actions];
        let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.backup.average(s, &self.qbar).clamp(lo, hi)
    }

    /// `Abar(s,a) = Qbar(s,a) - Qbar(s,mu)`.
    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.qbar(s, a) - self.qbar_mu(s)
    }

    /// `Qbar(d, mu)`.
    pub fn qbar_mu_at(&self, d: &[f64]) -> f64 {
        d.iter()
            .enumerate()
            .map(|(s, p)| if *p == 0.0 { 0.0 } else { p * self.qbar_mu(s) })
            .sum()
    }

    fn check_mdp(&self, mdp: &FiniteMdp) -> Result<()> {
        if mdp.num_states() != self.num_states
            || mdp.num_actions() != self.num_actions
            || mdp.violation_state() != self.violation_state
            || mdp.sink_state() != self.sink_state
        {
            return Err(structural("rule and MDP shapes differ"));
        }
        Ok(())
    }
}

/// Boolean membership table over state-action pairs; never holds unsafe states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionSet {
    num_states: usize,
    num_actions: usize,
    member: Vec<bool>,
}

impl InterventionSet {
    pub fn empty(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            member: vec![false; num_states * num_actions],
        }
    }

    /// Builds a set from explicit pairs (used for hand-made, possibly
    /// non-partial sets).
    pub fn from_pairs(mdp: &FiniteMdp, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut set = Self::empty(mdp.num_states(), mdp.num_actions());
        for &(s, a) in pairs {
            if s >= mdp.num_states() || a >= mdp.num_actions() {
                return Err(structural(format!("pair ({s},{a}) out of range")));
            }
            if mdp.is_unsafe(s) {
                return Err(invalid(format!("state {s} is not safe")));
            }
            set.member[s * mdp.num_actions() + a] = true;
        }
        Ok(set)
    }

    #[inline]
    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.member[s * self.num_actions + a]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.num_states)
            .flat_map(|s| (0..self.num_actions).map(move |a| (s, a)))
            .filter(|&(s, a)| self.contains(s, a))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indicator table, flat `[s][a]`.
    pub fn indicator(&self) -> Vec<f64> {
        self.member.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// `I = {(s,a) : s safe, Abar(s,a) > eta}`.
pub fn build_intervention_set(rule: &InterventionRule) -> InterventionSet {
    let mut set = InterventionSet::empty(rule.num_states, rule.num_actions);
    for s in 0..rule.num_states {
        if rule.is_unsafe(s) {
            continue;
        }
        for a in 0..rule.num_actions {
            if rule.advantage(s, a) > rule.eta {
                set.member[s * rule.num_actions + a] = true;
            }
        }
    }
    set
}

/// True when every state touched by the set keeps a free action.
pub fn is_partial(set: &InterventionSet) -> bool {
    (0..set.num_states).all(|s| {
        let row = &set.member[s * set.num_actions..(s + 1) * set.num_actions];
        !row.iter().any(|&m| m) || row.iter().any(|&m| !m)
    })
}

/// The composite policy that executes `pi` unless the proposal is intervened,
/// in which case `mu` acts.
#[derive(Debug, Clone, PartialEq)]
pub struct ShieldedPolicy {
    pub base: TabularPolicy,
    pub set: InterventionSet,
    /// `w(s)`: probability mass of `pi` that gets intervened.
    pub w: Vec<f64>,
    pub policy: TabularPolicy,
}

pub fn shield(policy: &TabularPolicy, rule: &InterventionRule) -> Result<ShieldedPolicy> {
    if policy.num_states() != rule.num_states || policy.num_actions() != rule.num_actions {
        return Err(structural("policy and rule shapes differ"));
    }
    let set = build_intervention_set(rule);
    shield_with_set(policy, rule.backup(), &set)
}

/// Shielding against an explicit set and backup.
pub fn shield_with_set(
    policy: &TabularPolicy,
    backup: &TabularPolicy,
    set: &InterventionSet,
) -> Result<ShieldedPolicy> {
    let (ns, na) = (policy.num_states(), policy.num_actions());
    if backup.num_states() != ns || set.num_states != ns || backup.num_actions() != na || set.num_actions != na {
        return Err(structural("shielding inputs have different shapes"));
    }
    let mut w = vec![0.0; ns];
    let mut probs = vec![0.0; ns * na];
    for s in 0..ns {
        let ws: f64 = (0..na).filter(|&a| set.contains(s, a)).map(|a| policy.prob(s, a)).sum();
        w[s] = ws;
        for a in 0..na {
            let keep = if set.contains(s, a) { 0.0 } else { policy.prob(s, a) };
            probs[s * na + a] = keep + ws * backup.prob(s, a);
        }
    }
    Ok(ShieldedPolicy {
        base: policy.clone(),
        set: set.clone(),
        w,
        policy: TabularPolicy::new(ns, na, probs)?,
    })
}

/// What the operational shield did with one proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShieldDecision<A> {
    pub action: A,
    pub intervened: bool,
}

/// Anything that can score a proposal against its backup and sample the backup.
pub trait AdvantageRule {
    type State;
    type Action;
    fn advantage(&self, state: &Self::State, action: &Self::Action) -> Result<f64>;
    fn threshold(&self) -> f64;
    fn sample_backup<R: Rng + ?Sized>(&self, state: &Self::State, rng: &mut R) -> Result<Self::Action>;
}

impl AdvantageRule for InterventionRule {
    type State = usize;
    type Action = usize;

    fn advantage(&self, state: &usize, action: &usize) -> Result<f64> {
        if *state >= self.num_states || *action >= self.num_actions {
            return Err(structural("state or action out of range"));
        }
        if self.is_unsafe(*state) {
            return Ok(0.0);
        }
        Ok(InterventionRule::advantage(self, *state, *action))
    }

    fn threshold(&self) -> f64 {
        self.eta
    }

    fn sample_backup<R: Rng + ?Sized>(&self, state: &usize, rng: &mut R) -> Result<usize> {
        Ok(sample_categorical(self.backup.row(*state), rng))
    }
}

/// Keeps the proposal when its advantage is at most the threshold, otherwise
/// draws one action from the backup.
pub fn shield_sample<G: AdvantageRule, R: Rng + ?Sized>(
    rule: &G,
    state: &G::State,
    proposed: G::Action,
    rng: &mut R,
) -> Result<ShieldDecision<G::Action>> {
    if rule.advantage(state, &proposed)? <= rule.threshold() {
        Ok(ShieldDecision {
            action: proposed,
            intervened: false,
        })
    } else {
        Ok(ShieldDecision {
            action: rule.sample_backup(state, rng)?,
            intervened: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    /// Smallest slack for which the Bellman inequality holds at every safe pair.
    pub sigma_min: f64,
    /// All safe entries lie in `[0, gamma]`.
    pub range_ok: bool,
    /// Pair with the largest residual (none when there are no safe pairs).
    pub worst_pair: Option<(usize, usize)>,
    /// Largest raw residual, possibly negative.
    pub max_residual: f64,
}

/// Residual `c(s,a) + gamma E[Qbar(s', mu)] - Qbar(s,a)` at one pair.
pub fn admissibility_residual(mdp: &FiniteMdp, rule: &InterventionRule, qmu: &[f64], s: usize, a: usize) -> f64 {
    mdp.cost(s, a) + mdp.gamma() * mdp.expect_next(s, a, qmu) - rule.qbar(s, a)
}

pub fn certify_admissibility(mdp: &FiniteMdp, rule: &InterventionRule) -> Result<AdmissibilityReport> {
    rule.check_mdp(mdp)?;
    let qmu: Vec<f64> = (0..mdp.num_states()).map(|s| rule.qbar_mu(s)).collect();
    let mut worst: Option<(usize, usize)> = None;
    let mut max_res = f64::NEG_INFINITY;
    let mut range_ok = true;
    let tol = 1e-12;
    for s in mdp.safe_states() {
        for a in 0..mdp.num_actions() {
            let res = admissibility_residual(mdp, rule, &qmu, s, a);
            if res > max_res {
                max_res = res;
                worst = Some((s, a));
            }
            let q = rule.qbar(s, a);
            if q < -tol || q > mdp.gamma() + tol {
                range_ok = false;
            }
        }
    }
    let sigma_min = if worst.is_some() { max_res.max(0.0) } else { 0.0 };
    Ok(AdmissibilityReport {
        sigma_min,
        range_ok,
        worst_pair: worst,
        max_residual: if worst.is_some() { max_res } else { 0.0 },
    })
}

/// Deterministic policy that minimizes a `[s][a]` cost table, uniform on the
/// unsafe meta-states.
fn greedy_backup(mdp: &FiniteMdp, q: &[f64]) -> TabularPolicy {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let greedy = greedy_policy(ns, na, q, RewardKind::Cost);
    let mut probs = greedy.table().to_vec();
    let uniform = 1.0 / na as f64;
    for s in [mdp.violation_state(), mdp.sink_state()] {
        for a in 0..na {
            probs[s * na + a] = uniform;
        }
    }
    TabularPolicy::new(ns, na, probs).expect("greedy backup is a policy")
}

/// `(Qbar^mu, mu, eta)`, or `(Qbar^mu, mu+, eta)` with `mu+` greedy on
/// `Qbar^mu` when `improved` is set.
pub fn make_baseline_rule(mdp: &FiniteMdp, mu: &TabularPolicy, eta: f64, improved: bool) -> Result<InterventionRule> {
    let vf = evaluate_policy(mdp, mu, RewardKind::Cost)?;
    let q: Vec<f64> = vf.q.iter().map(|&x| clamp_rounding(x)).collect();
    let backup = if improved { greedy_backup(mdp, &q) } else { mu.clone() };
    InterventionRule::new(mdp, q, backup, eta)
}

/// Pointwise minimum of several tables with the greedy backup of the minimum.
pub fn compose_rules(mdp: &FiniteMdp, rules: &[InterventionRule], eta: f64) -> Result<InterventionRule> {
    let first = rules
        .first()
        .ok_or_else(|| structural("cannot compose an empty list of rules"))?;
    for r in rules {
        r.check_mdp(mdp)?;
    }
    let mut q = first.qbar.clone();
    for r in &rules[1..] {
        for (x, y) in q.iter_mut().zip(&r.qbar) {
            *x = x.min(*y);
        }
    }
    let backup = greedy_backup(mdp, &q);
    InterventionRule::new(mdp, q, backup, eta)
}

/// `Tbar Q(s,a) = c(s,a) + gamma E[min_a' Q(s',a')]`.
pub fn cost_optimality_backup(mdp: &FiniteMdp, q: &[f64]) -> Vec<f64> {
    let na = mdp.num_actions();
    let v: Vec<f64> = q
        .chunks(na)
        .map(|row| row.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let mut out = vec![0.0; q.len()];
    for s in 0..mdp.num_states() {
        for a in 0..na {
            out[s * na + a] = mdp.cost(s, a) + mdp.gamma() * mdp.expect_next(s, a, &v);
        }
    }
    out
}

/// `k` applications of `Tbar` with the greedy backup of the result.
/// `k = 0` returns the input rule with threshold `eta`.
pub fn value_iterate_rule(mdp: &FiniteMdp, rule: &InterventionRule, k: usize, eta: f64) -> Result<InterventionRule> {
    rule.check_mdp(mdp)?;
    if k == 0 {
        return rule.with_eta(eta);
    }
    let mut q = rule.qbar.clone();
    for _ in 0..k {
        q = cost_optimality_backup(mdp, &q);
    }
    let q: Vec<f64> = q.into_iter().map(clamp_rounding).collect();
    let backup = greedy_backup(mdp, &q);
    InterventionRule::new(mdp, q, backup, eta)
}

/// `(Qbar*, pibar*, eta)` from exact cost minimization.
pub fn make_optimal_rule(mdp: &FiniteMdp, eta: f64) -> Result<InterventionRule> {
    let (vf, pi) = value_iteration(mdp, RewardKind::Cost, 1e-13)?;
    let q: Vec<f64> = vf.q.iter().map(|&x| clamp_rounding(x)).collect();
    let mut probs = pi.table().to_vec();
    let na = mdp.num_actions();
    for s in [mdp.violation_state(), mdp.sink_state()] {
        for a in 0..na {
            probs[s * na + a] = 1.0 / na as f64;
        }
    }
    let backup = TabularPolicy::new(mdp.num_states(), na, probs)?;
    InterventionRule::new(mdp, q, backup, eta)
}

/// Adds `noise(s,a)` (clipped to `[-delta, delta]`) to every safe entry and
/// clamps the result into `[0, gamma]`.
pub fn perturb_rule_with<F: FnMut(usize, usize) -> f64>(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    delta: f64,
    mut noise: F,
) -> Result<InterventionRule> {
    rule.check_mdp(mdp)?;
    if !(delta >= 0.0) {
        return Err(SailrError::Contract(format!("noise bound {delta} must be nonnegative")));
    }
    let na = mdp.num_actions();
    let mut q = rule.qbar.clone();
    for s in mdp.safe_states() {
        for a in 0..na {
            let e = noise(s, a).clamp(-delta, delta);
            q[s * na + a] = (q[s * na + a] + e).clamp(0.0, mdp.gamma());
        }
    }
    InterventionRule::new(mdp, q, rule.backup.clone(), rule.eta)
}

/// Uniform noise in `[-delta, delta]` on every safe entry.
pub fn perturb_rule<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    rule: &InterventionRule,
    delta: f64,
    rng: &mut R,
) -> Result<InterventionRule> {
    perturb_rule_with(mdp, rule, delta, |_, _| {
        if delta > 0.0 {
            rng.random_range(-delta..=delta)
        } else {
            0.0
        }
    })
}

/// `max_{safe (s,a)} (Qbar^mu(s,a) - Qbar(s,a))`.
pub fn pessimism_gap(mdp: &FiniteMdp, rule: &InterventionRule) -> Result<f64> {
    rule.check_mdp(mdp)?;
    let vf = evaluate_policy(mdp, &rule.backup, RewardKind::Cost)?;
    let mut gap = f64::NEG_INFINITY;
    for s in mdp.safe_states() {
        for a in 0..mdp.num_actions() {
            gap = gap.max(vf.q(s, a) - rule.qbar(s, a));
        }
    }
    Ok(if gap.is_finite() { gap } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FiniteMdp {
        // state 0: action 0 stays, action 1 goes to the violation state (1)
        let t = vec![
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, 0.0, 1.0, //
            0.0, 0.0, 1.0, 0.0, 0.0, 1.0,
        ];
        FiniteMdp::new(
            3,
            2,
            0.9,
            vec![1.0, 0.0, 0.0],
            t,
            vec![0.5, 1.0, 0.0, 0.0, 0.0, 0.0],
            1,
            2,
        )
        .unwrap()
    }

    #[test]
    fn boundary_rows_are_overwritten() {
        let m = tiny();
        let rule = InterventionRule::new(
            &m,
            vec![0.0, 0.9, 0.3, 0.3, 0.7, 0.7],
            TabularPolicy::uniform(3, 2),
            0.0,
        )
        .unwrap();
        assert_eq!(rule.qbar(1, 0), 1.0);
        assert_eq!(rule.qbar(2, 1), 0.0);
    }

    #[test]
    fn out_of_range_tables_are_rejected() {
        let m = tiny();
        assert!(InterventionRule::new(
            &m,
            vec![1.2, 0.0, 0.0, 0.0, 0.0, 0.0],
            TabularPolicy::uniform(3, 2),
            0.0
        )
        .is_err());
        assert!(InterventionRule::new(
            &m,
            vec![f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0],
            TabularPolicy::uniform(3, 2),
            0.0
        )
        .is_err());
        assert!(InterventionRule::new(&m, vec![0.0; 6], TabularPolicy::uniform(3, 2), -0.1).is_err());
    }

    #[test]
    fn baseline_rule_intervenes_the_unsafe_action() {
        let m = tiny();
        let mu = TabularPolicy::deterministic(3, 2, &[0, 0, 0]).unwrap();
        let rule = make_baseline_rule(&m, &mu, 0.0, false).unwrap();
        assert!((rule.qbar(0, 1) - 0.9).abs() < 1e-12);
        let set = build_intervention_set(&rule);
        assert_eq!(set.pairs(), vec![(0, 1)]);
        assert!(is_partial(&set));
        let rep = certify_admissibility(&m, &rule).unwrap();
        assert!(rep.sigma_min < 1e-12 && rep.range_ok);
    }

    #[test]
    fn empty_set_is_partial() {
        assert!(is_partial(&InterventionSet::empty(4, 3)));
    }

    #[test]
    fn compose_needs_rules() {
        assert!(compose_rules(&tiny(), &[], 0.0).is_err());
    }

    #[test]
    fn negative_noise_bound_is_rejected() {
        let m = tiny();
        let mu = TabularPolicy::deterministic(3, 2, &[0, 0, 0]).unwrap();
        let rule = make_baseline_rule(&m, &mu, 0.0, false).unwrap();
        assert!(perturb_rule_with(&m, &rule, -0.1, |_, _| 0.0).is_err());
    }
}
