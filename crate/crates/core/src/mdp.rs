//! Finite discounted MDPs, tabular policies, exact evaluation and
//! brute-force trajectory oracles.

use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, structural, Result, SailrError};

/// Tolerance on probability rows.
pub const ROW_TOL: f64 = 1e-12;
/// Above this many states policy evaluation switches to fixed-point iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;
/// Greedy choices treat actions within this gap of the best as ties.
pub const TIE_TOL: f64 = 1e-10;
const EVAL_RESIDUAL_TOL: f64 = 1e-10;
const VI_MAX_ITERS: usize = 200_000;
const MAX_TRAJECTORIES: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Reward,
    Cost,
}

/// Dense tabular model. Shared by the base MDP and the absorbing surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    d0: Vec<f64>,
    /// Flat `[s][a][s']`.
    transition: Vec<f64>,
    /// Flat `[s][a]`.
    reward: Vec<f64>,
    /// Flat `[s][a]`.
    cost: Vec<f64>,
}

impl AsRef<TabularModel> for TabularModel {
    fn as_ref(&self) -> &TabularModel {
        self
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(invalid(format!("{what}: entry {p} is not a probability")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(invalid(format!("{what}: row sums to {sum}")));
    }
    Ok(())
}

impl TabularModel {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        d0: Vec<f64>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        cost: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(structural("model needs at least one state and one action"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid(format!("discount {gamma} outside [0, 1)")));
        }
        if d0.len() != num_states {
            return Err(structural(format!(
                "d0 has {} entries for {num_states} states",
                d0.len()
            )));
        }
        if transition.len() != num_states * num_actions * num_states {
            return Err(structural("transition table has the wrong size"));
        }
        if reward.len() != num_states * num_actions || cost.len() != num_states * num_actions {
            return Err(structural("reward or cost table has the wrong size"));
        }
        if reward.iter().chain(cost.iter()).any(|x| !x.is_finite()) {
            return Err(invalid("non-finite reward or cost"));
        }
        check_distribution(&d0, "d0")?;
        for s in 0..num_states {
            for a in 0..num_actions {
                let start = (s * num_actions + a) * num_states;
                check_distribution(&transition[start..start + num_states], &format!("P(.|{s},{a})"))?;
            }
        }
        Ok(Self {
            num_states,
            num_actions,
            gamma,
            d0,
            transition,
            reward,
            cost,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn d0(&self) -> &[f64] {
        &self.d0
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    /// Next-state distribution `P(.|s,a)`.
    #[inline]
    pub fn next(&self, s: usize, a: usize) -> &[f64] {
        let start = self.sa(s, a) * self.num_states;
        &self.transition[start..start + self.num_states]
    }

    pub fn transition_flat(&self) -> &[f64] {
        &self.transition
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.sa(s, a)]
    }

    #[inline]
    pub fn cost(&self, s: usize, a: usize) -> f64 {
        self.cost[self.sa(s, a)]
    }

    pub fn signal(&self, kind: RewardKind) -> &[f64] {
        match kind {
            RewardKind::Reward => &self.reward,
            RewardKind::Cost => &self.cost,
        }
    }

    /// `E_{s'|s,a}[f(s')]`.
    #[inline]
    pub fn expect_next(&self, s: usize, a: usize, f: &[f64]) -> f64 {
        self.next(s, a).iter().zip(f).map(|(p, v)| p * v).sum()
    }
}

/// A finite discounted MDP with the violation state and its absorbing sink.
///
/// The cost is derived: `c(s,a) = 1` exactly when `s` is the violation state.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    model: TabularModel,
    violation_state: usize,
    sink_state: usize,
}

impl Deref for FiniteMdp {
    type Target = TabularModel;
    fn deref(&self) -> &TabularModel {
        &self.model
    }
}

impl AsRef<TabularModel> for FiniteMdp {
    fn as_ref(&self) -> &TabularModel {
        &self.model
    }
}

/// On-disk layout of an MDP.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub d0: Vec<f64>,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: Vec<Vec<f64>>,
    pub violation_state: usize,
    pub sink_state: usize,
}

impl FiniteMdp {
    /// Builds and validates an MDP from flat `[s][a][s']` and `[s][a]` tables.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        num_states: usize,
        num_actions: usize,
        gamma: f64,
        d0: Vec<f64>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        violation_state: usize,
        sink_state: usize,
    ) -> Result<Self> {
        if violation_state >= num_states || sink_state >= num_states {
            return Err(structural("meta-state index out of range"));
        }
        if violation_state == sink_state {
            return Err(structural("violation and sink states must differ"));
        }
        let mut cost = vec![0.0; num_states * num_actions];
        for a in 0..num_actions {
            cost[violation_state * num_actions + a] = 1.0;
        }
        let model = TabularModel::new(num_states, num_actions, gamma, d0, transition, reward, cost)?;
        for s in 0..num_states {
            for a in 0..num_actions {
                let r = model.reward(s, a);
                if !(0.0..=1.0).contains(&r) {
                    return Err(invalid(format!("reward r({s},{a}) = {r} outside [0,1]")));
                }
                if (s == violation_state || s == sink_state) && r != 0.0 {
                    return Err(invalid(format!("nonzero reward on unsafe state {s}")));
                }
            }
        }
        for a in 0..num_actions {
            if model.next(violation_state, a)[sink_state] != 1.0 {
                return Err(invalid("violation state must move to the sink"));
            }
            if model.next(sink_state, a)[sink_state] != 1.0 {
                return Err(invalid("sink state must be absorbing"));
            }
        }
        if model.d0[violation_state] != 0.0 || model.d0[sink_state] != 0.0 {
            return Err(invalid("d0 places mass on an unsafe state"));
        }
        Ok(Self {
            model,
            violation_state,
            sink_state,
        })
    }

    pub fn from_file_repr(file: MdpFile) -> Result<Self> {
        let ns = file.num_states;
        let na = file.num_actions;
        if file.transition.len() != ns || file.reward.len() != ns {
            return Err(structural("outer table dimension does not match num_states"));
        }
        let mut transition = Vec::with_capacity(ns * na * ns);
        for (s, rows) in file.transition.iter().enumerate() {
            if rows.len() != na {
                return Err(structural(format!("state {s} lists {} actions", rows.len())));
            }
            for row in rows {
                if row.len() != ns {
                    return Err(structural(format!("state {s} has a short transition row")));
                }
                transition.extend_from_slice(row);
            }
        }
        let mut reward = Vec::with_capacity(ns * na);
        for row in &file.reward {
            if row.len() != na {
                return Err(structural("reward row has the wrong length"));
            }
            reward.extend_from_slice(row);
        }
        Self::new(
            ns,
            na,
            file.gamma,
            file.d0,
            transition,
            reward,
            file.violation_state,
            file.sink_state,
        )
    }

    pub fn to_file_repr(&self) -> MdpFile {
        let ns = self.num_states();
        let na = self.num_actions();
        MdpFile {
            num_states: ns,
            num_actions: na,
            gamma: self.gamma(),
            d0: self.d0().to_vec(),
            transition: (0..ns)
                .map(|s| (0..na).map(|a| self.next(s, a).to_vec()).collect())
                .collect(),
            reward: (0..ns).map(|s| (0..na).map(|a| self.reward(s, a)).collect()).collect(),
            violation_state: self.violation_state,
            sink_state: self.sink_state,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file_repr(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file_repr()).expect("mdp serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn model(&self) -> &TabularModel {
        &self.model
    }

    pub fn violation_state(&self) -> usize {
        self.violation_state
    }

    pub fn sink_state(&self) -> usize {
        self.sink_state
    }

    pub fn is_unsafe(&self, s: usize) -> bool {
        s == self.violation_state || s == self.sink_state
    }

    pub fn safe_states(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_states()).filter(move |&s| !self.is_unsafe(s))
    }
}

/// A stochastic tabular policy `pi(a|s)` over every state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = SailrError;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.to_rows()
    }
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if num_states == 0 || num_actions == 0 || probs.len() != num_states * num_actions {
            return Err(structural("policy table has the wrong size"));
        }
        for s in 0..num_states {
            check_distribution(&probs[s * num_actions..(s + 1) * num_actions], &format!("pi(.|{s})"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ns = rows.len();
        let na = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != na) {
            return Err(structural("ragged policy rows"));
        }
        Self::new(ns, na, rows.into_iter().flatten().collect())
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self {
            num_states,
            num_actions,
            probs: vec![p; num_states * num_actions],
        }
    }

    pub fn deterministic(num_states: usize, num_actions: usize, actions: &[usize]) -> Result<Self> {
        if actions.len() != num_states || actions.iter().any(|&a| a >= num_actions) {
            return Err(structural("deterministic action list does not fit"));
        }
        let mut probs = vec![0.0; num_states * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * num_actions + a] = 1.0;
        }
        Self::new(num_states, num_actions, probs)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_states).map(|s| self.row(s).to_vec()).collect()
    }

    /// Replaces one row with a validated distribution.
    pub fn set_row(&mut self, s: usize, row: &[f64]) -> Result<()> {
        if s >= self.num_states || row.len() != self.num_actions {
            return Err(structural("row does not fit the policy"));
        }
        check_distribution(row, &format!("pi(.|{s})"))?;
        self.probs[s * self.num_actions..(s + 1) * self.num_actions].copy_from_slice(row);
        Ok(())
    }

    /// `sum_a pi(a|s) f(s,a)` for a flat `[s][a]` table.
    pub fn average(&self, s: usize, table: &[f64]) -> f64 {
        self.row(s)
            .iter()
            .zip(&table[s * self.num_actions..(s + 1) * self.num_actions])
            .map(|(p, q)| p * q)
            .sum()
    }

    /// Action with the most mass (lowest index on ties).
    pub fn mode(&self, s: usize) -> usize {
        let row = self.row(s);
        let mut best = 0;
        for a in 1..row.len() {
            if row[a] > row[best] {
                best = a;
            }
        }
        best
    }
}

/// Draws an index from a categorical distribution by inverse CDF.
pub fn sample_categorical<R: rand::Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver of mass: fall back to the last supported index.
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueFunctions {
    pub kind: RewardKind,
    pub num_actions: usize,
    pub v: Vec<f64>,
    /// Flat `[s][a]`.
    pub q: Vec<f64>,
}

impl ValueFunctions {
    #[inline]
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn q_row(&self, s: usize) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// `V(d) = sum_s d(s) V(s)`.
    pub fn at(&self, d: &[f64]) -> f64 {
        d.iter().zip(&self.v).map(|(p, v)| p * v).sum()
    }
}

/// Discounted state-action occupancy `d(s,a)`, normalized to total mass one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccupancyMeasure {
    pub num_actions: usize,
    /// Flat `[s][a]`.
    pub d: Vec<f64>,
}

impl OccupancyMeasure {
    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.num_actions + a]
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.d.chunks(self.num_actions).map(|c| c.iter().sum()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.d.iter().sum()
    }

    /// `E_d[f]` for a flat `[s][a]` table.
    pub fn expect(&self, f: &[f64]) -> f64 {
        self.d.iter().zip(f).map(|(p, x)| p * x).sum()
    }
}

fn check_policy_fits(model: &TabularModel, policy: &TabularPolicy) -> Result<()> {
    if policy.num_states() != model.num_states() || policy.num_actions() != model.num_actions() {
        return Err(structural(format!(
            "policy is {}x{} but the MDP is {}x{}",
            policy.num_states(),
            policy.num_actions(),
            model.num_states(),
            model.num_actions()
        )));
    }
    Ok(())
}

/// `P_pi` as a dense matrix together with the expected one-step signal.
fn policy_chain(model: &TabularModel, policy: &TabularPolicy, signal: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = model.num_states();
    let mut p = DMatrix::<f64>::zeros(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for a in 0..model.num_actions() {
            let w = policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            r[s] += w * signal[model.sa(s, a)];
            for (s2, &pr) in model.next(s, a).iter().enumerate() {
                if pr != 0.0 {
                    p[(s, s2)] += w * pr;
                }
            }
        }
    }
    (p, r)
}

fn q_from_v(model: &TabularModel, signal: &[f64], v: &[f64]) -> Vec<f64> {
    let g = model.gamma();
    let mut q = vec![0.0; model.num_states() * model.num_actions()];
    for s in 0..model.num_states() {
        for a in 0..model.num_actions() {
            let i = model.sa(s, a);
            q[i] = signal[i] + g * model.expect_next(s, a, v);
        }
    }
    q
}

/// `||Q - B^pi Q||_inf` for an action-value table.
pub fn bellman_residual<M: AsRef<TabularModel>>(mdp: &M, policy: &TabularPolicy, kind: RewardKind, q: &[f64]) -> f64 {
    let model = mdp.as_ref();
    let signal = model.signal(kind);
    let v: Vec<f64> = (0..model.num_states()).map(|s| policy.average(s, q)).collect();
    let backed = q_from_v(model, signal, &v);
    backed.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Exact policy evaluation by an LU solve of `(I - gamma P_pi) V = r_pi`.
pub fn evaluate_policy<M: AsRef<TabularModel>>(
    mdp: &M,
    policy: &TabularPolicy,
    kind: RewardKind,
) -> Result<ValueFunctions> {
    let model = mdp.as_ref();
    check_policy_fits(model, policy)?;
    if model.num_states() > DIRECT_SOLVE_LIMIT {
        return evaluate_policy_iterative(model, policy, kind);
    }
    let n = model.num_states();
    let signal = model.signal(kind);
    let (p, r) = policy_chain(model, policy, signal);
    let a = DMatrix::<f64>::identity(n, n) - p * model.gamma();
    let lu = a.clone().lu();
    let mut v = lu
        .solve(&r)
        .ok_or_else(|| SailrError::NonConvergence("singular evaluation system".into()))?;
    // One round of iterative refinement tightens the residual to rounding level.
    let resid = &r - &a * &v;
    if let Some(dv) = lu.solve(&resid) {
        v += dv;
    }
    let v: Vec<f64> = v.iter().copied().collect();
    let q = q_from_v(model, signal, &v);
    let v: Vec<f64> = (0..n).map(|s| policy.average(s, &q)).collect();
    let out = ValueFunctions {
        kind,
        num_actions: model.num_actions(),
        v,
        q,
    };
    let scale = out.q.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let res = bellman_residual(model, policy, kind, &out.q);
    if res > EVAL_RESIDUAL_TOL * scale {
        return Err(SailrError::NonConvergence(format!(
            "evaluation residual {res:e} above tolerance"
        )));
    }
    Ok(out)
}

/// Fixed-point evaluation for large models. Stops once successive sweeps
/// differ by less than the residual tolerance.
pub fn evaluate_policy_iterative<M: AsRef<TabularModel>>(
    mdp: &M,
    policy: &TabularPolicy,
    kind: RewardKind,
) -> Result<ValueFunctions> {
    let model = mdp.as_ref();
    check_policy_fits(model, policy)?;
    let n = model.num_states();
    let signal = model.signal(kind);
    let mut v = vec![0.0; n];
    let stop = EVAL_RESIDUAL_TOL * (1.0 - model.gamma()) * 0.5;
    for _ in 0..VI_MAX_ITERS {
        let q = q_from_v(model, signal, &v);
        let next: Vec<f64> = (0..n).map(|s| policy.average(s, &q)).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta <= stop {
            let q = q_from_v(model, signal, &v);
            let v = (0..n).map(|s| policy.average(s, &q)).collect();
            return Ok(ValueFunctions {
                kind,
                num_actions: model.num_actions(),
                v,
                q,
            });
        }
    }
    Err(SailrError::NonConvergence(
        "iterative policy evaluation hit its sweep cap".into(),
    ))
}

/// Exact discounted occupancy from `(I - gamma P_pi^T) rho = (1 - gamma) d0`.
pub fn occupancy<M: AsRef<TabularModel>>(mdp: &M, policy: &TabularPolicy) -> Result<OccupancyMeasure> {
    let model = mdp.as_ref();
    check_policy_fits(model, policy)?;
    let n = model.num_states();
    let zeros = vec![0.0; n * model.num_actions()];
    let (p, _) = policy_chain(model, policy, &zeros);
    let a = DMatrix::<f64>::identity(n, n) - p.transpose() * model.gamma();
    let b = DVector::from_iterator(n, model.d0().iter().map(|x| x * (1.0 - model.gamma())));
    let lu = a.clone().lu();
    let mut rho = lu
        .solve(&b)
        .ok_or_else(|| SailrError::NonConvergence("singular occupancy system".into()))?;
    let resid = &b - &a * &rho;
    if let Some(dr) = lu.solve(&resid) {
        rho += dr;
    }
    let na = model.num_actions();
    let mut d = vec![0.0; n * na];
    for s in 0..n {
        let mass = rho[s].max(0.0);
        for a in 0..na {
            d[s * na + a] = mass * policy.prob(s, a);
        }
    }
    Ok(OccupancyMeasure { num_actions: na, d })
}

/// One application of the Bellman optimality operator to a `[s][a]` table
/// (max for rewards, min for costs).
pub fn bellman_optimality_backup<M: AsRef<TabularModel>>(mdp: &M, kind: RewardKind, q: &[f64]) -> Vec<f64> {
    let model = mdp.as_ref();
    let na = model.num_actions();
    let v: Vec<f64> = q
        .chunks(na)
        .map(|row| match kind {
            RewardKind::Reward => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            RewardKind::Cost => row.iter().copied().fold(f64::INFINITY, f64::min),
        })
        .collect();
    q_from_v(model, model.signal(kind), &v)
}

/// Lowest-index action within `TIE_TOL` of the best entry of a row.
pub fn greedy_action(row: &[f64], kind: RewardKind) -> usize {
    let better = |x: f64, y: f64| match kind {
        RewardKind::Reward => x > y,
        RewardKind::Cost => x < y,
    };
    let mut best = row[0];
    for &x in &row[1..] {
        if better(x, best) {
            best = x;
        }
    }
    row.iter().position(|&x| (x - best).abs() <= TIE_TOL).unwrap_or(0)
}

/// Deterministic greedy policy of a `[s][a]` table.
pub fn greedy_policy(num_states: usize, num_actions: usize, q: &[f64], kind: RewardKind) -> TabularPolicy {
    let actions: Vec<usize> = q.chunks(num_actions).map(|row| greedy_action(row, kind)).collect();
    TabularPolicy::deterministic(num_states, num_actions, &actions).expect("greedy policy fits")
}

/// Optimal values and a deterministic optimal policy.
///
/// Value iteration runs until successive sweeps differ by at most `tol`,
/// then policy iteration polishes the greedy policy to the exact optimum.
/// Costs are minimized. Ties go to the lowest action index.
pub fn value_iteration<M: AsRef<TabularModel>>(
    mdp: &M,
    kind: RewardKind,
    tol: f64,
) -> Result<(ValueFunctions, TabularPolicy)> {
    let model = mdp.as_ref();
    if !(tol > 0.0) {
        return Err(SailrError::Contract(format!("tolerance {tol} must be positive")));
    }
    let (ns, na) = (model.num_states(), model.num_actions());
    let mut q = vec![0.0; ns * na];
    let mut converged = false;
    for _ in 0..VI_MAX_ITERS {
        let next = bellman_optimality_backup(model, kind, &q);
        let delta = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if delta <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(SailrError::NonConvergence(format!(
            "value iteration did not reach tolerance {tol:e}"
        )));
    }
    let mut actions: Vec<usize> = q.chunks(na).map(|row| greedy_action(row, kind)).collect();
    let better = |x: f64, y: f64| match kind {
        RewardKind::Reward => x > y + TIE_TOL,
        RewardKind::Cost => x < y - TIE_TOL,
    };
    for _ in 0..10_000 {
        let policy = TabularPolicy::deterministic(ns, na, &actions)?;
        let vf = evaluate_policy(model, &policy, kind)?;
        let mut changed = false;
        for s in 0..ns {
            let row = vf.q_row(s);
            let cand = greedy_action(row, kind);
            if better(row[cand], row[actions[s]]) {
                actions[s] = cand;
                changed = true;
            }
        }
        if !changed {
            let policy = greedy_policy(ns, na, &vf.q, kind);
            let vf = evaluate_policy(model, &policy, kind)?;
            return Ok((vf, policy));
        }
    }
    Err(SailrError::NonConvergence("policy iteration cycled".into()))
}

/// A finite trajectory prefix: pairs `(s_t, a_t)` for `t < horizon` and the
/// state reached at `t = horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<(usize, usize)>,
    pub final_state: usize,
    pub probability: f64,
}

/// Enumerates every positive-probability trajectory of length `horizon`.
pub fn enumerate_trajectories<M: AsRef<TabularModel>>(
    mdp: &M,
    policy: &TabularPolicy,
    horizon: usize,
) -> Result<Vec<Trajectory>> {
    let model = mdp.as_ref();
    check_policy_fits(model, policy)?;
    let mut out = Vec::new();
    let mut stack: Vec<(Vec<(usize, usize)>, usize, f64)> = model
        .d0()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| (Vec::new(), s, p))
        .collect();
    while let Some((steps, s, prob)) = stack.pop() {
        if steps.len() == horizon {
            if out.len() >= MAX_TRAJECTORIES {
                return Err(SailrError::Budget(format!(
                    "more than {MAX_TRAJECTORIES} trajectories at horizon {horizon}"
                )));
            }
            out.push(Trajectory {
                steps,
                final_state: s,
                probability: prob,
            });
            continue;
        }
        if stack.len() > MAX_TRAJECTORIES {
            return Err(SailrError::Budget("enumeration frontier too large".into()));
        }
        for a in 0..model.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for (s2, &ps) in model.next(s, a).iter().enumerate() {
                if ps == 0.0 {
                    continue;
                }
                let mut next = steps.clone();
                next.push((s, a));
                stack.push((next, s2, prob * pa * ps));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TruncatedValue {
    pub value: f64,
    /// Bound on `|value - exact|`.
    pub truncation_error: f64,
}

/// Per-step probability that the segment `s_0..s_h` stays in the safe set,
/// for `h = 0..=horizon_cap`.
pub fn safe_segment_probabilities(mdp: &FiniteMdp, policy: &TabularPolicy, horizon_cap: usize) -> Result<Vec<f64>> {
    check_policy_fits(mdp, policy)?;
    let n = mdp.num_states();
    let mut alive: Vec<f64> = (0..n)
        .map(|s| if mdp.is_unsafe(s) { 0.0 } else { mdp.d0()[s] })
        .collect();
    let mut out = Vec::with_capacity(horizon_cap + 1);
    for _ in 0..=horizon_cap {
        out.push(alive.iter().sum());
        let mut next = vec![0.0; n];
        for s in 0..n {
            if alive[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.num_actions() {
                let w = alive[s] * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                for (s2, &p) in mdp.next(s, a).iter().enumerate() {
                    if !mdp.is_unsafe(s2) {
                        next[s2] += w * p;
                    }
                }
            }
        }
        alive = next;
    }
    Ok(out)
}

/// Discount-weighted probability that a trajectory segment stays safe:
/// `(1-gamma) sum_{h<=cap} gamma^h Prob(s_0..s_h all safe)`, with the tail
/// beyond the cap counted as safe. The result overestimates the exact value
/// by at most `gamma^(cap+1)`.
pub fn chance_constraint_value(mdp: &FiniteMdp, policy: &TabularPolicy, horizon_cap: usize) -> Result<TruncatedValue> {
    let g = mdp.gamma();
    let probs = safe_segment_probabilities(mdp, policy, horizon_cap)?;
    let mut acc = 0.0;
    let mut w = 1.0;
    for p in probs {
        acc += w * p;
        w *= g;
    }
    let tail = g.powi(horizon_cap as i32 + 1);
    Ok(TruncatedValue {
        value: (1.0 - g) * acc + tail,
        truncation_error: tail,
    })
}

/// Truncated `(1-gamma) sum_{h<=H} gamma^h U_h` where `U_h` is the expected
/// undiscounted `h`-step return. Rewards are assumed to lie in `[0, r_max]`.
pub fn discounted_average_value<M: AsRef<TabularModel>>(
    mdp: &M,
    policy: &TabularPolicy,
    kind: RewardKind,
    horizon: usize,
    r_max: f64,
) -> Result<TruncatedValue> {
    let model = mdp.as_ref();
    check_policy_fits(model, policy)?;
    let g = model.gamma();
    let signal = model.signal(kind);
    let n = model.num_states();
    let mut dist = model.d0().to_vec();
    let mut u = 0.0;
    let mut acc = 0.0;
    let mut w = 1.0;
    for _ in 0..=horizon {
        let mut next = vec![0.0; n];
        for s in 0..n {
            if dist[s] == 0.0 {
                continue;
            }
            for a in 0..model.num_actions() {
                let m = dist[s] * policy.prob(s, a);
                if m == 0.0 {
                    continue;
                }
                u += m * signal[model.sa(s, a)];
                for (s2, &p) in model.next(s, a).iter().enumerate() {
                    next[s2] += m * p;
                }
            }
        }
        acc += w * u;
        w *= g;
        dist = next;
    }
    let tail = g.powi(horizon as i32 + 1);
    let err = r_max * tail * ((horizon as f64 + 1.0) + 1.0 / (1.0 - g));
    Ok(TruncatedValue {
        value: (1.0 - g) * acc,
        truncation_error: err,
    })
}

/// Right-hand side of the performance difference identity,
/// `E_{d^pi}[r + gamma E f(s') - f(s)] / (1-gamma)`.
pub fn performance_difference<M: AsRef<TabularModel>>(mdp: &M, policy: &TabularPolicy, f: &[f64]) -> Result<f64> {
    let model = mdp.as_ref();
    if f.len() != model.num_states() {
        return Err(structural("f must have one entry per state"));
    }
    let d = occupancy(model, policy)?;
    let g = model.gamma();
    let mut acc = 0.0;
    for s in 0..model.num_states() {
        for a in 0..model.num_actions() {
            let w = d.get(s, a);
            if w == 0.0 {
                continue;
            }
            acc += w * (model.reward(s, a) + g * model.expect_next(s, a, f) - f[s]);
        }
    }
    Ok(acc / (1.0 - g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_loop(gamma: f64) -> FiniteMdp {
        // state 0 self-loops with reward 1; states 1 and 2 are the meta-states
        let t = vec![
            1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, //
            0.0, 0.0, 1.0,
        ];
        FiniteMdp::new(3, 1, gamma, vec![1.0, 0.0, 0.0], t, vec![1.0, 0.0, 0.0], 1, 2).unwrap()
    }

    #[test]
    fn geometric_series_value() {
        let m = self_loop(0.9);
        let pi = TabularPolicy::uniform(3, 1);
        let vf = evaluate_policy(&m, &pi, RewardKind::Reward).unwrap();
        assert!((vf.v[0] - 10.0).abs() < 1e-10);
        let (opt, _) = value_iteration(&m, RewardKind::Reward, 1e-12).unwrap();
        assert!((opt.v[0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn self_loop_occupancy_is_a_point_mass() {
        let m = self_loop(0.5);
        let d = occupancy(&m, &TabularPolicy::uniform(3, 1)).unwrap();
        assert!((d.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_rows_and_rewards() {
        let t = vec![0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert!(FiniteMdp::new(3, 1, 0.9, vec![1.0, 0.0, 0.0], t, vec![1.0, 0.0, 0.0], 1, 2).is_err());
        let t = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        assert!(FiniteMdp::new(3, 1, 0.9, vec![1.0, 0.0, 0.0], t.clone(), vec![1.5, 0.0, 0.0], 1, 2).is_err());
        assert!(FiniteMdp::new(3, 1, 0.9, vec![1.0, 0.0, 0.0], t.clone(), vec![1.0, 0.3, 0.0], 1, 2).is_err());
        assert!(FiniteMdp::new(3, 1, 1.0, vec![1.0, 0.0, 0.0], t, vec![1.0, 0.0, 0.0], 1, 2).is_err());
    }

    #[test]
    fn policy_shape_mismatch_is_structural() {
        let m = self_loop(0.9);
        let pi = TabularPolicy::uniform(2, 1);
        assert!(matches!(
            evaluate_policy(&m, &pi, RewardKind::Cost),
            Err(SailrError::Structural(_))
        ));
    }

    #[test]
    fn greedy_ties_go_low() {
        assert_eq!(greedy_action(&[1.0, 2.0, 2.0], RewardKind::Reward), 1);
        assert_eq!(greedy_action(&[0.0, 0.0, -0.0], RewardKind::Cost), 0);
        assert_eq!(greedy_action(&[0.3, 0.1, 0.1], RewardKind::Cost), 1);
    }

    #[test]
    fn categorical_sampling_respects_zeros() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let i = sample_categorical(&[0.0, 0.3, 0.0, 0.7], &mut rng);
            assert!(i == 1 || i == 3);
        }
    }
}
