//! The absorbing surrogate MDP, trajectory transformation and the
//! intervention probability.

use std::io::{BufRead, Write};
use std::ops::Deref;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result, SailrError};
use crate::mdp::{occupancy, FiniteMdp, TabularModel, TabularPolicy, TruncatedValue};
use crate::rules::InterventionSet;

/// `M~`: intervened pairs jump to an extra absorbing state `s_dagger` and
/// pay `penalty` instead of their reward.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsorbingMdp {
    model: TabularModel,
    base_states: usize,
    violation_state: usize,
    sink_state: usize,
    penalty: f64,
    set: InterventionSet,
}

impl Deref for AbsorbingMdp {
    type Target = TabularModel;
    fn deref(&self) -> &TabularModel {
        &self.model
    }
}

impl AsRef<TabularModel> for AbsorbingMdp {
    fn as_ref(&self) -> &TabularModel {
        &self.model
    }
}

pub fn build_absorbing(mdp: &FiniteMdp, set: &InterventionSet, penalty: f64) -> Result<AbsorbingMdp> {
    if !(penalty <= 0.0) || !penalty.is_finite() {
        return Err(SailrError::Contract(format!(
            "penalty {penalty} must be finite and <= 0"
        )));
    }
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if set.num_states() != ns || set.num_actions() != na {
        return Err(structural("intervention set does not match the MDP"));
    }
    let nt = ns + 1;
    let dagger = ns;
    let mut transition = vec![0.0; nt * na * nt];
    let mut reward = vec![0.0; nt * na];
    let mut cost = vec![0.0; nt * na];
    for s in 0..nt {
        for a in 0..na {
            let row = (s * na + a) * nt;
            if s == dagger || set.contains(s, a) {
                transition[row + dagger] = 1.0;
                reward[s * na + a] = if s == dagger { 0.0 } else { penalty };
            } else {
                transition[row..row + ns].copy_from_slice(mdp.next(s, a));
                reward[s * na + a] = mdp.reward(s, a);
            }
            if s < ns {
                cost[s * na + a] = mdp.cost(s, a);
            }
        }
    }
    let mut d0 = mdp.d0().to_vec();
    d0.push(0.0);
    let model = TabularModel::new(nt, na, mdp.gamma(), d0, transition, reward, cost)?;
    Ok(AbsorbingMdp {
        model,
        base_states: ns,
        violation_state: mdp.violation_state(),
        sink_state: mdp.sink_state(),
        penalty,
        set: set.clone(),
    })
}

impl AbsorbingMdp {
    pub fn dagger_state(&self) -> usize {
        self.base_states
    }

    pub fn base_states(&self) -> usize {
        self.base_states
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn set(&self) -> &InterventionSet {
        &self.set
    }

    pub fn violation_state(&self) -> usize {
        self.violation_state
    }

    pub fn sink_state(&self) -> usize {
        self.sink_state
    }

    /// Adds a uniform row for `s_dagger`.
    pub fn extend_policy(&self, policy: &TabularPolicy) -> Result<TabularPolicy> {
        if policy.num_states() != self.base_states || policy.num_actions() != self.num_actions() {
            return Err(structural("policy does not match the base MDP"));
        }
        let na = self.num_actions();
        let mut probs = policy.table().to_vec();
        probs.extend(std::iter::repeat_n(1.0 / na as f64, na));
        TabularPolicy::new(self.base_states + 1, na, probs)
    }

    /// Drops the `s_dagger` row.
    pub fn restrict_policy(&self, policy: &TabularPolicy) -> Result<TabularPolicy> {
        if policy.num_states() != self.base_states + 1 || policy.num_actions() != self.num_actions() {
            return Err(structural("policy does not match the absorbing MDP"));
        }
        let na = self.num_actions();
        TabularPolicy::new(self.base_states, na, policy.table()[..self.base_states * na].to_vec())
    }
}

/// `P_G(pi) = E_{d~^pi}[1{(s,a) in I}] / (1 - gamma)`, the discounted
/// probability that running `pi` in the base MDP enters the set.
pub fn intervention_probability(mdp: &FiniteMdp, set: &InterventionSet, policy: &TabularPolicy) -> Result<f64> {
    let absorbing = build_absorbing(mdp, set, 0.0)?;
    let ext = absorbing.extend_policy(policy)?;
    let d = occupancy(&absorbing, &ext)?;
    let mut mass = 0.0;
    for (s, a) in set.pairs() {
        mass += d.get(s, a);
    }
    Ok((mass / (1.0 - mdp.gamma())).clamp(0.0, 1.0))
}

/// Segment-counting form `(1-gamma) sum_h gamma^h Prob(xi^h meets I)`, where
/// `xi^h` holds the pairs at `t < h`. Summed up to `horizon_cap`; the missing
/// tail is at most `gamma^(cap+1)`. This equals `gamma` times the occupancy
/// form and is only reported as a diagnostic.
pub fn intervention_probability_segments(
    mdp: &FiniteMdp,
    set: &InterventionSet,
    policy: &TabularPolicy,
    horizon_cap: usize,
) -> Result<TruncatedValue> {
    if policy.num_states() != mdp.num_states() || set.num_states() != mdp.num_states() {
        return Err(structural("policy or set does not match the MDP"));
    }
    let n = mdp.num_states();
    let g = mdp.gamma();
    let mut clean = mdp.d0().to_vec();
    let mut hit = 0.0;
    let mut acc = 0.0;
    let mut w = 1.0;
    for _ in 0..=horizon_cap {
        // Prob(xi^h meets I) uses pairs strictly before h.
        acc += w * hit;
        w *= g;
        let mut next = vec![0.0; n];
        for s in 0..n {
            if clean[s] == 0.0 {
                continue;
            }
            for a in 0..mdp.num_actions() {
                let m = clean[s] * policy.prob(s, a);
                if m == 0.0 {
                    continue;
                }
                if set.contains(s, a) {
                    hit += m;
                } else {
                    for (s2, &p) in mdp.next(s, a).iter().enumerate() {
                        next[s2] += m * p;
                    }
                }
            }
        }
        clean = next;
    }
    let tail = g.powi(horizon_cap as i32 + 1);
    Ok(TruncatedValue {
        value: (1.0 - g) * acc,
        truncation_error: tail,
    })
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord<S = usize, A = usize> {
    pub t: usize,
    pub state: S,
    /// The learner's proposal. Present on every learner-controlled step;
    /// absent on backup-controlled steps after an intervention.
    pub proposed_action: Option<A>,
    pub executed_action: A,
    pub reward: f64,
    pub intervened: bool,
    pub violated: bool,
}

pub fn read_episode_log<S: DeserializeOwned, A: DeserializeOwned>(
    reader: impl BufRead,
) -> Result<Vec<StepRecord<S, A>>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_episode_log<S: Serialize, A: Serialize>(
    mut writer: impl Write,
    records: &[StepRecord<S, A>],
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// A step of the surrogate trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateStep<S = usize, A = usize> {
    pub t: usize,
    pub state: S,
    pub action: A,
    pub reward: f64,
}

/// Raw rollout in the base MDP and the experience it simulates in `M~`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair<S = usize, A = usize> {
    pub raw: Vec<StepRecord<S, A>>,
    /// First intervened step `T`.
    pub intervention_time: Option<usize>,
    /// Steps `0..=T` (or the whole raw episode without intervention).
    pub surrogate: Vec<SurrogateStep<S, A>>,
    /// True when the surrogate continues in `s_dagger` after its last step.
    pub absorbed: bool,
}

/// Rewrites a raw rollout of the shielded policy into the trajectory the
/// unshielded policy would have produced in `M~`: identical up to `T - 1`,
/// the overridden proposal with reward `penalty` at `T`, then `s_dagger`.
pub fn transform_trajectory<S: Clone, A: Clone>(
    raw: Vec<StepRecord<S, A>>,
    penalty: f64,
) -> Result<TrajectoryPair<S, A>> {
    if !(penalty <= 0.0) {
        return Err(SailrError::Contract(format!("penalty {penalty} must be <= 0")));
    }
    let mut surrogate = Vec::new();
    let mut intervention_time = None;
    for (i, rec) in raw.iter().enumerate() {
        if rec.t != i {
            return Err(structural(format!("step {i} is labelled t = {}", rec.t)));
        }
        if rec.intervened {
            let proposed = rec
                .proposed_action
                .clone()
                .ok_or_else(|| structural(format!("intervened step {i} has no proposed action")))?;
            surrogate.push(SurrogateStep {
                t: i,
                state: rec.state.clone(),
                action: proposed,
                reward: penalty,
            });
            intervention_time = Some(i);
            break;
        }
        surrogate.push(SurrogateStep {
            t: i,
            state: rec.state.clone(),
            action: rec.executed_action.clone(),
            reward: rec.reward,
        });
    }
    Ok(TrajectoryPair {
        absorbed: intervention_time.is_some(),
        intervention_time,
        surrogate,
        raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, s: usize, p: Option<usize>, e: usize, r: f64, i: bool) -> StepRecord {
        StepRecord {
            t,
            state: s,
            proposed_action: p,
            executed_action: e,
            reward: r,
            intervened: i,
            violated: false,
        }
    }

    #[test]
    fn no_intervention_keeps_the_rollout() {
        let raw = vec![rec(0, 0, Some(1), 1, 0.5, false), rec(1, 2, Some(0), 0, 0.25, false)];
        let pair = transform_trajectory(raw, -1.0).unwrap();
        assert_eq!(pair.intervention_time, None);
        assert!(!pair.absorbed);
        assert_eq!(pair.surrogate.len(), 2);
        assert_eq!(pair.surrogate[1].reward, 0.25);
    }

    #[test]
    fn intervention_at_zero() {
        let raw = vec![rec(0, 3, Some(2), 0, 0.5, true), rec(1, 1, None, 0, 0.0, true)];
        let pair = transform_trajectory(raw, -2.0).unwrap();
        assert_eq!(pair.intervention_time, Some(0));
        assert_eq!(
            pair.surrogate,
            vec![SurrogateStep {
                t: 0,
                state: 3,
                action: 2,
                reward: -2.0
            }]
        );
        assert!(pair.absorbed);
    }

    #[test]
    fn missing_proposal_is_an_error() {
        let raw = vec![rec(0, 3, None, 0, 0.5, true)];
        assert!(transform_trajectory(raw, -1.0).is_err());
        let raw = vec![rec(0, 3, Some(1), 1, 0.5, false)];
        assert!(transform_trajectory(raw, 0.5).is_err());
    }

    #[test]
    fn log_round_trip() {
        let raw = vec![rec(0, 0, Some(1), 1, 0.5, false), rec(1, 2, Some(0), 1, 0.0, true)];
        let mut buf = Vec::new();
        write_episode_log(&mut buf, &raw).unwrap();
        let back: Vec<StepRecord> = read_episode_log(&buf[..]).unwrap();
        assert_eq!(back, raw);
    }
}
