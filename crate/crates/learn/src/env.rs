//! Episodic simulators the training loop can drive.

use std::fmt::Debug;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sailr_core::env::point::{is_unsafe, point_reward, point_step, PointAction, PointParams, PointState};
use sailr_core::mdp::{sample_categorical, FiniteMdp};

use crate::error::{config, LearnError, Result};

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<S> {
    pub next: S,
    pub reward: f64,
    /// Sparse safety cost: 1 on the step that enters the unsafe set.
    pub cost: f64,
    pub violated: bool,
    /// The episode cannot continue from `next`.
    pub terminal: bool,
}

pub trait Environment {
    type State: Clone + Debug;
    type Action: Clone + Debug;

    fn reset(&self, rng: &mut ChaCha8Rng) -> Self::State;
    fn step(&self, state: &Self::State, action: &Self::Action, rng: &mut ChaCha8Rng)
        -> Result<Transition<Self::State>>;
    fn max_episode_steps(&self) -> usize;
    fn gamma(&self) -> f64;

    /// True when nothing can happen any more under the backup, so a
    /// backup-controlled episode may stop early without changing its outcome.
    fn is_settled(&self, _state: &Self::State) -> bool {
        false
    }
}

/// Environments with real-valued observations and actions, as needed by the
/// policy-gradient learner.
pub trait ContinuousEnv: Environment {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn features(&self, state: &Self::State, out: &mut [f64]);
    fn action_from_slice(&self, raw: &[f64]) -> Self::Action;
    fn action_to_vec(&self, action: &Self::Action) -> Vec<f64>;
}

/// Samples a tabular MDP. Episodes stop on entering an unsafe meta-state.
#[derive(Debug, Clone)]
pub struct FiniteEnv {
    pub mdp: FiniteMdp,
    pub max_steps: usize,
}

impl FiniteEnv {
    pub fn new(mdp: FiniteMdp, max_steps: usize) -> Result<Self> {
        if max_steps == 0 {
            return Err(config("episode cap must be positive"));
        }
        Ok(Self { mdp, max_steps })
    }
}

impl Environment for FiniteEnv {
    type State = usize;
    type Action = usize;

    fn reset(&self, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(self.mdp.d0(), rng)
    }

    fn step(&self, s: &usize, a: &usize, rng: &mut ChaCha8Rng) -> Result<Transition<usize>> {
        let (ns, na) = (self.mdp.num_states(), self.mdp.num_actions());
        if *s >= ns || *a >= na {
            return Err(LearnError::Environment(format!("pair ({s}, {a}) out of range")));
        }
        let next = sample_categorical(self.mdp.next(*s, *a), rng);
        let violated = next == self.mdp.violation_state();
        Ok(Transition {
            next,
            reward: self.mdp.reward(*s, *a),
            cost: if violated { 1.0 } else { 0.0 },
            violated,
            terminal: self.mdp.is_unsafe(next),
        })
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn gamma(&self) -> f64 {
        self.mdp.gamma()
    }
}

/// The point robot with episodes that end on leaving the corridor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointEnv {
    pub params: PointParams,
    pub gamma: f64,
    pub max_steps: usize,
    /// Half-width of the uniform box around the origin the robot starts in.
    pub init_jitter: f64,
}

impl Default for PointEnv {
    fn default() -> Self {
        Self {
            params: PointParams::default(),
            gamma: 0.99,
            max_steps: 300,
            init_jitter: 0.1,
        }
    }
}

impl PointEnv {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config("discount must lie in [0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(config("episode cap must be positive"));
        }
        if !(self.init_jitter >= 0.0) || self.init_jitter >= self.params.x_max.min(self.params.y_max) {
            return Err(config("initial jitter must be nonnegative and inside the corridor"));
        }
        Ok(())
    }
}

impl Environment for PointEnv {
    type State = PointState;
    type Action = PointAction;

    fn reset(&self, rng: &mut ChaCha8Rng) -> PointState {
        let j = self.init_jitter;
        let (x, y) = if j > 0.0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0.0, 0.0)
        };
        PointState { x, y, vx: 0.0, vy: 0.0 }
    }

    fn step(&self, s: &PointState, a: &PointAction, _rng: &mut ChaCha8Rng) -> Result<Transition<PointState>> {
        if !(a.ax.is_finite() && a.ay.is_finite()) {
            return Err(LearnError::Environment(format!("non-finite action {a:?}")));
        }
        let next = point_step(s, a, &self.params);
        let violated = is_unsafe(&next, &self.params);
        Ok(Transition {
            next,
            reward: point_reward(s, &self.params),
            cost: if violated { 1.0 } else { 0.0 },
            violated,
            terminal: violated,
        })
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn is_settled(&self, s: &PointState) -> bool {
        s.at_rest()
    }
}

impl ContinuousEnv for PointEnv {
    fn obs_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn features(&self, s: &PointState, out: &mut [f64]) {
        let p = &self.params;
        out[0] = s.x / p.x_max;
        out[1] = s.y / p.y_max;
        out[2] = s.vx / p.v_max;
        out[3] = s.vy / p.v_max;
    }

    fn action_from_slice(&self, raw: &[f64]) -> PointAction {
        PointAction { ax: raw[0], ay: raw[1] }
    }

    fn action_to_vec(&self, a: &PointAction) -> Vec<f64> {
        vec![a.ax, a.ay]
    }
}
