//! Primal-dual baseline: an unshielded learner on `r - lambda * c` with dual
//! ascent on `lambda`.

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{config, Result};
use crate::sailr::{
    collect_epoch, deploy, BaseLearner, EpochDiagnostics, MetricsRecord, NoShield, SurrogateBatch, TrainingBudget,
    TrainingOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdoConfig {
    /// Constraint threshold on the discounted cost value.
    pub delta: f64,
    pub lambda_lr: f64,
    pub lambda_init: f64,
}

impl Default for PdoConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            lambda_lr: 0.05,
            lambda_init: 0.0,
        }
    }
}

impl PdoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) || !(self.lambda_lr >= 0.0) || !(self.lambda_init >= 0.0) {
            return Err(config("delta, lambda_lr and lambda_init must be nonnegative"));
        }
        Ok(())
    }
}

/// `lambda <- max(0, lambda + lr * (vbar_hat - delta))`.
pub fn dual_update(lambda: f64, cfg: &PdoConfig, vbar_hat: f64) -> f64 {
    (lambda + cfg.lambda_lr * (vbar_hat - cfg.delta)).max(0.0)
}

fn lagrangian_batch<S: Clone, A: Clone>(batch: &SurrogateBatch<S, A>, lambda: f64) -> SurrogateBatch<S, A> {
    let mut out = batch.clone();
    for ep in &mut out.episodes {
        for (step, c) in ep.steps.iter_mut().zip(&ep.costs) {
            step.reward -= lambda * c;
        }
    }
    out
}

pub fn pdo_baseline<E, L>(
    env: &E,
    learner: &mut L,
    cfg: &PdoConfig,
    budget: &TrainingBudget,
    seed: u64,
) -> Result<TrainingOutcome<L::Policy>>
where
    E: Environment,
    L: BaseLearner<E>,
{
    budget.validate()?;
    cfg.validate()?;
    learner.initialize(env, seed)?;
    let rule = NoShield::<E::State, E::Action>::default();
    let mut lambda = cfg.lambda_init;
    let mut metrics = Vec::with_capacity(budget.epochs);
    let mut diagnostics = Vec::with_capacity(budget.epochs);
    let mut cum_v = 0u64;
    for epoch in 1..=budget.epochs {
        let pi = learner.data_collection_policy();
        let data = collect_epoch(env, &pi, &rule, 0.0, budget.batch_size, seed, epoch)?;
        learner.optimize_policy(env, &lagrangian_batch(&data.batch, lambda))?;
        let used = lambda;
        lambda = dual_update(lambda, cfg, data.cost_value_mean);
        cum_v += data.violations as u64;
        let (ret, len) = deploy(env, &learner.optimized_policy(), budget.deploy_episodes, seed, epoch)?;
        metrics.push(MetricsRecord {
            epoch,
            seed,
            deploy_return_mean: ret,
            deploy_len_mean: len,
            cum_violations: cum_v,
            cum_interventions: 0,
        });
        diagnostics.push(EpochDiagnostics {
            epoch,
            episodes: data.batch.episodes.len(),
            violations: data.violations,
            interventions: 0,
            env_steps: data.env_steps,
            surrogate_return_mean: data.surrogate_return_mean,
            cost_value_mean: data.cost_value_mean,
            lagrange_multiplier: used,
        });
    }
    Ok(TrainingOutcome {
        policy: learner.optimized_policy(),
        metrics,
        diagnostics,
    })
}
