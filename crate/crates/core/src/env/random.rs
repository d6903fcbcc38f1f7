//! Seeded random MDP generator for the verification corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{invalid, Result};
use crate::mdp::{FiniteMdp, TabularPolicy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomMdpSpec {
    /// Safe states; the two meta-states are appended after them.
    pub num_safe_states: usize,
    pub num_actions: usize,
    /// Upper bound on the probability of leaking into the violation state
    /// from any safe pair.
    pub unsafe_reach_prob: f64,
    pub gamma: f64,
    /// Maximum number of safe successors per pair.
    pub max_successors: usize,
}

impl RandomMdpSpec {
    pub fn new(num_safe_states: usize, num_actions: usize, unsafe_reach_prob: f64) -> Self {
        Self {
            num_safe_states,
            num_actions,
            unsafe_reach_prob,
            gamma: 0.9,
            max_successors: 3,
        }
    }
}

/// `random_cmdp(n, |A|, p, seed)` with discount 0.9. The result has
/// `num_states + 2` states: the safe ones first, then the violation state
/// and the sink.
pub fn random_cmdp(num_states: usize, num_actions: usize, unsafe_reach_prob: f64, seed: u64) -> Result<FiniteMdp> {
    random_cmdp_with(&RandomMdpSpec::new(num_states, num_actions, unsafe_reach_prob), seed)
}

fn dirichlet_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| Distribution::<f64>::sample(&Exp1, rng) + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Writes `mass * weights` into `row` so that the entries sum to `mass`
/// exactly in floating point (the last entry absorbs the rounding).
fn scatter(row: &mut [f64], targets: &[usize], weights: &[f64], mass: f64) {
    let mut used = 0.0;
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let p = if i + 1 == targets.len() { mass - used } else { mass * w };
        row[t] += p;
        used += p;
    }
}

pub fn random_cmdp_with(spec: &RandomMdpSpec, seed: u64) -> Result<FiniteMdp> {
    let n = spec.num_safe_states;
    let na = spec.num_actions;
    if n < 2 || na < 2 {
        return Err(invalid(format!(
            "random MDP needs at least 2 safe states and 2 actions, got {n} and {na}"
        )));
    }
    if !(0.0..=1.0).contains(&spec.unsafe_reach_prob) {
        return Err(invalid("unsafe_reach_prob must lie in [0, 1]"));
    }
    if spec.max_successors == 0 {
        return Err(invalid("max_successors must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = n + 2;
    let (viol, sink) = (n, n + 1);
    let mut transition = vec![0.0; ns * na * ns];
    let mut reward = vec![0.0; ns * na];
    for s in 0..n {
        for a in 0..na {
            let row = &mut transition[(s * na + a) * ns..(s * na + a + 1) * ns];
            let k = rng.random_range(1..=spec.max_successors.min(n));
            let mut pool: Vec<usize> = (0..n).collect();
            let mut targets = Vec::with_capacity(k);
            for _ in 0..k {
                let i = rng.random_range(0..pool.len());
                targets.push(pool.swap_remove(i));
            }
            let leak = if spec.unsafe_reach_prob > 0.0 && rng.random_bool(0.5) {
                spec.unsafe_reach_prob * rng.random::<f64>()
            } else {
                0.0
            };
            let weights = dirichlet_weights(k, &mut rng);
            scatter(row, &targets, &weights, 1.0 - leak);
            row[viol] += leak;
            reward[s * na + a] = rng.random::<f64>();
        }
    }
    for s in [viol, sink] {
        for a in 0..na {
            transition[(s * na + a) * ns + sink] = 1.0;
        }
    }
    let mut d0 = vec![0.0; ns];
    let starts = rng.random_range(1..=2.min(n));
    let mut pool: Vec<usize> = (0..n).collect();
    let targets: Vec<usize> = (0..starts)
        .map(|_| {
            let i = rng.random_range(0..pool.len());
            pool.swap_remove(i)
        })
        .collect();
    let w = dirichlet_weights(starts, &mut rng);
    scatter(&mut d0, &targets, &w, 1.0);
    FiniteMdp::new(ns, na, spec.gamma, d0, transition, reward, viol, sink)
}

/// A random stochastic policy; rows are Dirichlet draws, and with
/// probability `deterministic_prob` a row is a point mass instead.
pub fn random_policy<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    deterministic_prob: f64,
    rng: &mut R,
) -> TabularPolicy {
    let mut probs = vec![0.0; num_states * num_actions];
    for s in 0..num_states {
        let row = &mut probs[s * num_actions..(s + 1) * num_actions];
        if rng.random_bool(deterministic_prob.clamp(0.0, 1.0)) {
            row[rng.random_range(0..num_actions)] = 1.0;
        } else {
            let raw: Vec<f64> = (0..num_actions)
                .map(|_| Distribution::<f64>::sample(&Exp1, rng))
                .collect();
            let total: f64 = raw.iter().sum();
            let mut used = 0.0;
            for a in 0..num_actions {
                let p = if a + 1 == num_actions {
                    1.0 - used
                } else {
                    raw[a] / total
                };
                row[a] = p.max(0.0);
                used += p;
            }
        }
    }
    TabularPolicy::new(num_states, num_actions, probs).expect("random rows are distributions")
}

/// Uniformly random deterministic policy.
pub fn random_deterministic_policy<R: Rng + ?Sized>(
    num_states: usize,
    num_actions: usize,
    rng: &mut R,
) -> TabularPolicy {
    let actions: Vec<usize> = (0..num_states).map(|_| rng.random_range(0..num_actions)).collect();
    TabularPolicy::deterministic(num_states, num_actions, &actions).expect("actions in range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let a = random_cmdp(4, 3, 0.3, 11).unwrap();
        let b = random_cmdp(4, 3, 0.3, 11).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = random_cmdp(4, 3, 0.3, 12).unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(random_cmdp(1, 3, 0.3, 0).is_err());
        assert!(random_cmdp(3, 1, 0.3, 0).is_err());
        assert!(random_cmdp(3, 2, 1.5, 0).is_err());
    }
}
