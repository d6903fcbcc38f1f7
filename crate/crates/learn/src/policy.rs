use rand_chacha::ChaCha8Rng;
use sailr_core::mdp::{sample_categorical, TabularPolicy};

use crate::env::{Environment, FiniteEnv};

/// A policy the training loop can roll out.
pub trait Policy<E: Environment> {
    /// Stochastic action used while collecting data.
    fn sample(&self, env: &E, state: &E::State, rng: &mut ChaCha8Rng) -> E::Action;
    /// Action used at deployment.
    fn greedy(&self, env: &E, state: &E::State) -> E::Action;
}

impl Policy<FiniteEnv> for TabularPolicy {
    fn sample(&self, _env: &FiniteEnv, s: &usize, rng: &mut ChaCha8Rng) -> usize {
        sample_categorical(self.row(*s), rng)
    }

    fn greedy(&self, _env: &FiniteEnv, s: &usize) -> usize {
        self.mode(*s)
    }
}
