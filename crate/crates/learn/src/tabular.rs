//! Tabular base learners for finite MDPs.

use sailr_core::absorbing::{build_absorbing, AbsorbingMdp};
use sailr_core::mdp::{greedy_action, value_iteration, FiniteMdp, RewardKind, TabularPolicy};
use sailr_core::rules::InterventionSet;
use serde::{Deserialize, Serialize};

use crate::env::FiniteEnv;
use crate::error::{config, Result};
use crate::sailr::{BaseLearner, SurrogateBatch};

/// Solves the known surrogate MDP exactly; the collected data is ignored.
#[derive(Debug, Clone)]
pub struct TabularViLearner {
    surrogate: AbsorbingMdp,
    tol: f64,
    policy: TabularPolicy,
}

impl TabularViLearner {
    pub fn new(mdp: &FiniteMdp, set: &InterventionSet, penalty: f64) -> Result<Self> {
        let surrogate = build_absorbing(mdp, set, penalty)?;
        let policy = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
        Ok(Self {
            surrogate,
            tol: 1e-12,
            policy,
        })
    }

    pub fn surrogate(&self) -> &AbsorbingMdp {
        &self.surrogate
    }

    fn solve(&mut self) -> Result<()> {
        let (_, pi) = value_iteration(&self.surrogate, RewardKind::Reward, self.tol)?;
        self.policy = self.surrogate.restrict_policy(&pi)?;
        Ok(())
    }
}

impl BaseLearner<FiniteEnv> for TabularViLearner {
    type Policy = TabularPolicy;

    fn initialize(&mut self, env: &FiniteEnv, _seed: u64) -> Result<()> {
        if env.mdp.num_states() != self.surrogate.base_states() {
            return Err(config("environment and surrogate model sizes differ"));
        }
        self.solve()
    }

    fn data_collection_policy(&self) -> TabularPolicy {
        self.policy.clone()
    }

    fn optimize_policy(&mut self, _env: &FiniteEnv, _batch: &SurrogateBatch<usize, usize>) -> Result<()> {
        self.solve()
    }

    fn optimized_policy(&self) -> TabularPolicy {
        self.policy.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSize {
    Constant {
        alpha: f64,
    },
    /// `alpha = n^-omega` where `n` counts updates of the pair.
    Polynomial {
        omega: f64,
    },
}

impl StepSize {
    fn at(&self, n: u64) -> f64 {
        match *self {
            StepSize::Constant { alpha } => alpha,
            StepSize::Polynomial { omega } => (n.max(1) as f64).powf(-omega),
        }
    }
}

/// Q-learning on surrogate transitions with an epsilon-greedy behaviour policy.
#[derive(Debug, Clone)]
pub struct TabularQLearner {
    pub step_size: StepSize,
    pub epsilon: f64,
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    q: Vec<f64>,
    counts: Vec<u64>,
}

impl TabularQLearner {
    pub fn new(step_size: StepSize, epsilon: f64) -> Result<Self> {
        let ok = match step_size {
            StepSize::Constant { alpha } => alpha > 0.0 && alpha <= 1.0,
            StepSize::Polynomial { omega } => omega > 0.5 && omega <= 1.0,
        };
        if !ok {
            return Err(config(format!("unusable step size {step_size:?}")));
        }
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(config("epsilon must lie in [0, 1]"));
        }
        Ok(Self {
            step_size,
            epsilon,
            num_states: 0,
            num_actions: 0,
            gamma: 0.0,
            q: Vec::new(),
            counts: Vec::new(),
        })
    }

    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    fn max_q(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn epsilon_greedy(&self, eps: f64) -> TabularPolicy {
        let na = self.num_actions;
        let mut probs = vec![eps / na as f64; self.num_states * na];
        for s in 0..self.num_states {
            probs[s * na + greedy_action(self.row(s), RewardKind::Reward)] += 1.0 - eps;
        }
        TabularPolicy::new(self.num_states, na, probs).expect("epsilon-greedy rows are distributions")
    }
}

impl BaseLearner<FiniteEnv> for TabularQLearner {
    type Policy = TabularPolicy;

    fn initialize(&mut self, env: &FiniteEnv, _seed: u64) -> Result<()> {
        self.num_states = env.mdp.num_states();
        self.num_actions = env.mdp.num_actions();
        self.gamma = env.mdp.gamma();
        self.q = vec![0.0; self.num_states * self.num_actions];
        self.counts = vec![0; self.q.len()];
        Ok(())
    }

    fn data_collection_policy(&self) -> TabularPolicy {
        self.epsilon_greedy(self.epsilon)
    }

    fn optimize_policy(&mut self, _env: &FiniteEnv, batch: &SurrogateBatch<usize, usize>) -> Result<()> {
        for ep in &batch.episodes {
            for (i, step) in ep.steps.iter().enumerate() {
                let next = ep.steps.get(i + 1).map(|n| n.state).or(ep.bootstrap);
                let target = step.reward + next.map_or(0.0, |n| self.gamma * self.max_q(n));
                let k = step.state * self.num_actions + step.action;
                self.counts[k] += 1;
                let alpha = self.step_size.at(self.counts[k]);
                self.q[k] += alpha * (target - self.q[k]);
            }
        }
        Ok(())
    }

    fn optimized_policy(&self) -> TabularPolicy {
        self.epsilon_greedy(0.0)
    }
}
