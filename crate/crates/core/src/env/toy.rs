//! Two hand-built instances: a four-state safe-cycle example with a
//! certified rule, and the non-partial counterexample family.

use crate::error::Result;
use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::rules::{InterventionRule, InterventionSet};

/// Number of states in the four-state example (four safe states plus the
/// two meta-states).
pub const FIG2_STATES: usize = 6;
pub const FIG2_ACTIONS: usize = 3;
pub const FIG2_VIOLATION: usize = 4;
pub const FIG2_SINK: usize = 5;
pub const FIG2_GAMMA: f64 = 0.9;
pub const FIG2_ETA: f64 = 0.05;

/// Action indices at state "1" (index 0).
pub mod fig2 {
    pub const S1: usize = 0;
    pub const S2: usize = 1;
    pub const S3: usize = 2;
    pub const S4: usize = 3;
    /// From state 1.
    pub const TO_2: usize = 0;
    pub const TO_3: usize = 1;
    pub const TO_4: usize = 2;
    /// From state 2.
    pub const TO_1_FROM_2: usize = 0;
    pub const TO_VIOLATION_FROM_2: usize = 1;
    /// From state 4.
    pub const TO_1_FROM_4: usize = 0;
    pub const TO_VIOLATION_FROM_4: usize = 1;
}

/// Successor of every `(state, action)` in the four-state example. States
/// with fewer than three outgoing edges repeat an existing edge so that
/// every state has the same action count; repeated edges carry identical
/// rewards and `Qbar` values.
const FIG2_EDGES: [[usize; 3]; 6] = [
    [1, 2, 3],
    [0, FIG2_VIOLATION, FIG2_VIOLATION],
    [FIG2_VIOLATION; 3],
    [0, FIG2_VIOLATION, FIG2_VIOLATION],
    [FIG2_SINK; 3],
    [FIG2_SINK; 3],
];

const FIG2_REWARD: [[f64; 3]; 6] = [
    [0.1, 1.0, 0.1],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [0.1, 0.0, 0.0],
    [0.0, 0.0, 0.0],
    [0.0, 0.0, 0.0],
];

const FIG2_QBAR: [[f64; 3]; 6] = [
    [0.7, 0.8, 0.6],
    [0.8, 0.7, 0.7],
    [0.7, 0.7, 0.7],
    [0.7, 0.7, 0.7],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

/// Backup actions: 1 -> 4, 2 -> 1, 3 -> violation, 4 -> 1.
const FIG2_BACKUP: [usize; 4] = [fig2::TO_4, fig2::TO_1_FROM_2, 0, fig2::TO_1_FROM_4];

fn deterministic_mdp(
    edges: &[[usize; 3]],
    rewards: &[[f64; 3]],
    num_actions: usize,
    gamma: f64,
    violation: usize,
    sink: usize,
) -> Result<FiniteMdp> {
    let ns = edges.len();
    let mut transition = vec![0.0; ns * num_actions * ns];
    let mut reward = vec![0.0; ns * num_actions];
    for s in 0..ns {
        for a in 0..num_actions {
            transition[(s * num_actions + a) * ns + edges[s][a]] = 1.0;
            reward[s * num_actions + a] = rewards[s][a];
        }
    }
    let mut d0 = vec![0.0; ns];
    d0[0] = 1.0;
    FiniteMdp::new(ns, num_actions, gamma, d0, transition, reward, violation, sink)
}

/// Four safe states, a safe cycle 1 -> 4 -> 1, and a rule that is
/// 0.2-admissible whose threshold-0.05 set is `{(1, ->2), (1, ->3)}`.
pub fn fig2_toy() -> (FiniteMdp, InterventionRule) {
    let mdp = fig2_mdp();
    let rule = fig2_rule(&mdp);
    (mdp, rule)
}

pub fn fig2_mdp() -> FiniteMdp {
    deterministic_mdp(
        &FIG2_EDGES,
        &FIG2_REWARD,
        FIG2_ACTIONS,
        FIG2_GAMMA,
        FIG2_VIOLATION,
        FIG2_SINK,
    )
    .expect("four-state example is a valid MDP")
}

pub fn fig2_backup() -> TabularPolicy {
    let na = FIG2_ACTIONS;
    let mut probs = vec![0.0; FIG2_STATES * na];
    for (s, &a) in FIG2_BACKUP.iter().enumerate() {
        probs[s * na + a] = 1.0;
    }
    for s in [FIG2_VIOLATION, FIG2_SINK] {
        for a in 0..na {
            probs[s * na + a] = 1.0 / na as f64;
        }
    }
    TabularPolicy::new(FIG2_STATES, na, probs).expect("backup is a policy")
}

pub fn fig2_rule(mdp: &FiniteMdp) -> InterventionRule {
    let q = FIG2_QBAR.iter().flat_map(|r| r.iter().copied()).collect();
    InterventionRule::new(mdp, q, fig2_backup(), FIG2_ETA).expect("four-state rule is valid")
}

/// Index layout of the counterexample with `chain_length` extra states.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterexampleLayout {
    pub start: usize,
    pub risky: usize,
    pub safe_loop: usize,
    /// State whose every action is intervened.
    pub intervened: usize,
    pub violation: usize,
    pub sink: usize,
}

pub fn counterexample_layout(chain_length: usize) -> CounterexampleLayout {
    let n_safe = 3 + chain_length;
    CounterexampleLayout {
        start: 0,
        risky: 1,
        safe_loop: 2,
        intervened: if chain_length == 0 { 1 } else { 2 + chain_length },
        violation: n_safe,
        sink: n_safe + 1,
    }
}

/// The non-partial counterexample: from the start state, action 0 earns
/// reward 1 and leads to state "2", action 1 leads to a zero-reward safe
/// self-loop. State "2" heads to the violation state, after passing through
/// `chain_length` zero-reward chain states. Every action at the last state
/// before the violation state is in the returned set, so the set is not
/// partial.
pub fn appendix_b_counterexample(chain_length: usize) -> (FiniteMdp, InterventionSet) {
    let lay = counterexample_layout(chain_length);
    let ns = lay.sink + 1;
    let na = 2;
    let mut edges = vec![[0usize; 3]; ns];
    let mut rewards = vec![[0.0f64; 3]; ns];
    edges[lay.start] = [lay.risky, lay.safe_loop, lay.safe_loop];
    rewards[lay.start] = [1.0, 0.0, 0.0];
    edges[lay.safe_loop] = [lay.safe_loop; 3];
    // state "2" followed by the chain
    let mut path = vec![lay.risky];
    path.extend((0..chain_length).map(|i| 3 + i));
    for w in path.windows(2) {
        edges[w[0]] = [w[1]; 3];
    }
    edges[*path.last().expect("path is nonempty")] = [lay.violation; 3];
    edges[lay.violation] = [lay.sink; 3];
    edges[lay.sink] = [lay.sink; 3];
    let mdp = deterministic_mdp(&edges, &rewards, na, FIG2_GAMMA, lay.violation, lay.sink)
        .expect("counterexample is a valid MDP");
    let set =
        InterventionSet::from_pairs(&mdp, &[(lay.intervened, 0), (lay.intervened, 1)]).expect("set uses safe states");
    (mdp, set)
}

/// Bundled JSON encodings of the two instances.
pub const FIG2_JSON: &str = include_str!("../../data/fig2_toy.json");
pub const FIG2_RULE_JSON: &str = include_str!("../../data/fig2_rule.json");
pub const APPENDIX_B_JSON: &str = include_str!("../../data/appendix_b.json");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::is_partial;

    #[test]
    fn bundled_files_are_the_constructors_byte_for_byte() {
        let (mdp, rule) = fig2_toy();
        assert_eq!(mdp.to_json(), FIG2_JSON);
        assert_eq!(rule.to_json(), FIG2_RULE_JSON);
        assert_eq!(FiniteMdp::from_json(FIG2_JSON).unwrap(), mdp);
        assert_eq!(InterventionRule::from_json(&mdp, FIG2_RULE_JSON).unwrap(), rule);
        let (b, _) = appendix_b_counterexample(0);
        assert_eq!(b.to_json(), APPENDIX_B_JSON);
        assert_eq!(FiniteMdp::from_json(APPENDIX_B_JSON).unwrap(), b);
    }

    #[test]
    fn counterexample_set_is_not_partial() {
        for t in 0..4 {
            let (mdp, set) = appendix_b_counterexample(t);
            assert!(!is_partial(&set));
            assert_eq!(mdp.num_states(), 5 + t);
        }
    }
}
