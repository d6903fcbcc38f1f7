//! The intervention-guided training loop and the shared rollout machinery.

use std::marker::PhantomData;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sailr_core::absorbing::{transform_trajectory, StepRecord, SurrogateStep, TrajectoryPair};
use sailr_core::rules::{shield_sample, AdvantageRule};
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{config, LearnError, Result};
use crate::policy::Policy;

/// Surrogate experience of one episode, as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEpisode<S, A> {
    pub steps: Vec<SurrogateStep<S, A>>,
    /// Safety cost of each step in the base MDP (zero on the absorbed step).
    pub costs: Vec<f64>,
    /// State after the last step when the episode was cut short; `None` when
    /// it ended in an absorbing state (`s_dagger` or an unsafe state).
    pub bootstrap: Option<S>,
}

impl<S, A> SurrogateEpisode<S, A> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBatch<S, A> {
    pub episodes: Vec<SurrogateEpisode<S, A>>,
    pub gamma: f64,
}

impl<S, A> SurrogateBatch<S, A> {
    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.len()).sum()
    }
}

/// The four entry points of the outer loop. `optimize_policy` only ever sees
/// surrogate experience.
pub trait BaseLearner<E: Environment> {
    type Policy: Policy<E> + Clone;

    fn initialize(&mut self, env: &E, seed: u64) -> Result<()>;
    fn data_collection_policy(&self) -> Self::Policy;
    fn optimize_policy(&mut self, env: &E, batch: &SurrogateBatch<E::State, E::Action>) -> Result<()>;
    fn optimized_policy(&self) -> Self::Policy;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingBudget {
    pub epochs: usize,
    /// Learner transitions collected per epoch.
    pub batch_size: usize,
    /// Episodes of the optimized policy evaluated after each epoch.
    pub deploy_episodes: usize,
}

impl Default for TrainingBudget {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4000,
            deploy_episodes: 10,
        }
    }
}

impl TrainingBudget {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if self.deploy_episodes == 0 {
            return Err(config("deploy_episodes must be positive"));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub seed: u64,
    pub deploy_return_mean: f64,
    pub deploy_len_mean: f64,
    pub cum_violations: u64,
    pub cum_interventions: u64,
}

/// Per-epoch quantities that are not part of the CSV contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub episodes: usize,
    pub violations: usize,
    pub interventions: usize,
    pub env_steps: usize,
    pub surrogate_return_mean: f64,
    /// Per-episode discounted safety cost, averaged over the epoch.
    pub cost_value_mean: f64,
    pub lagrange_multiplier: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<P> {
    pub policy: P,
    pub metrics: Vec<MetricsRecord>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

/// Optional rule update after each epoch. The default leaves the rule alone.
pub trait RuleRefiner<G, S, A> {
    fn refine(&mut self, _epoch: usize, _rule: &mut G, _pairs: &[TrajectoryPair<S, A>]) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoRefinement;

impl<G, S, A> RuleRefiner<G, S, A> for NoRefinement {}

/// A rule that never intervenes.
#[derive(Debug, Clone, Copy)]
pub struct NoShield<S, A>(PhantomData<(S, A)>);

impl<S, A> Default for NoShield<S, A> {
    fn default() -> Self {
        Self(PhantomData)
    }
}

impl<S, A> AdvantageRule for NoShield<S, A> {
    type State = S;
    type Action = A;

    fn advantage(&self, _s: &S, _a: &A) -> sailr_core::Result<f64> {
        Ok(0.0)
    }

    fn threshold(&self) -> f64 {
        0.0
    }

    fn sample_backup<R: rand::Rng + ?Sized>(&self, _s: &S, _rng: &mut R) -> sailr_core::Result<A> {
        Err(sailr_core::SailrError::Contract("the empty rule has no backup".into()))
    }
}

const TRAIN_STREAM: u64 = 0x5a11_7a11_0000_0001;
const DEPLOY_STREAM: u64 = 0x5a11_7a11_0000_0002;

/// Independent random stream for one episode of one epoch.
pub fn episode_stream(seed: u64, deploy: bool, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if deploy { DEPLOY_STREAM } else { TRAIN_STREAM });
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Everything recorded about one training episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome<S, A> {
    pub pair: TrajectoryPair<S, A>,
    pub surrogate: SurrogateEpisode<S, A>,
    pub violated: bool,
    pub intervened: bool,
    pub discounted_cost: f64,
}

/// Runs the shielded data-collection policy for one episode. After an
/// intervention the backup keeps control until the episode ends or the
/// environment reports that it has settled. At most `learner_cap` learner
/// steps are taken; hitting that cap truncates the episode.
pub fn shielded_episode<E, P, G>(
    env: &E,
    policy: &P,
    rule: &G,
    penalty: f64,
    learner_cap: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome<E::State, E::Action>>
where
    E: Environment,
    P: Policy<E>,
    G: AdvantageRule<State = E::State, Action = E::Action>,
{
    let gamma = env.gamma();
    let mut s = env.reset(rng);
    let mut raw: Vec<StepRecord<E::State, E::Action>> = Vec::new();
    let mut costs = Vec::new();
    let mut backup_in_control = false;
    let mut violated = false;
    let mut terminal = false;
    let mut learner_steps = 0;
    let mut discounted_cost = 0.0;
    let mut discount = 1.0;
    for t in 0..env.max_episode_steps() {
        let (proposed, executed, intervened) = if backup_in_control {
            if env.is_settled(&s) {
                break;
            }
            (None, rule.sample_backup(&s, rng)?, true)
        } else {
            if learner_steps == learner_cap {
                break;
            }
            learner_steps += 1;
            let a = policy.sample(env, &s, rng);
            let d = shield_sample(rule, &s, a.clone(), rng)?;
            backup_in_control = d.intervened;
            (Some(a), d.action, d.intervened)
        };
        let tr = env.step(&s, &executed, rng)?;
        if !tr.reward.is_finite() {
            return Err(LearnError::Environment(format!("non-finite reward at step {t}")));
        }
        discounted_cost += discount * tr.cost;
        discount *= gamma;
        costs.push(if intervened { 0.0 } else { tr.cost });
        raw.push(StepRecord {
            t,
            state: s,
            proposed_action: proposed,
            executed_action: executed,
            reward: tr.reward,
            intervened,
            violated: tr.violated,
        });
        violated |= tr.violated;
        s = tr.next;
        if tr.terminal {
            terminal = true;
            break;
        }
    }
    let pair = transform_trajectory(raw, penalty)?;
    let intervened = pair.absorbed;
    let bootstrap = if intervened || terminal { None } else { Some(s) };
    let n = pair.surrogate.len();
    costs.truncate(n);
    Ok(EpisodeOutcome {
        surrogate: SurrogateEpisode {
            steps: pair.surrogate.clone(),
            costs,
            bootstrap,
        },
        pair,
        violated,
        intervened,
        discounted_cost,
    })
}

/// Mean return and length of the deployed policy, run without intervention.
pub fn deploy<E: Environment, P: Policy<E>>(
    env: &E,
    policy: &P,
    episodes: usize,
    seed: u64,
    epoch: usize,
) -> Result<(f64, f64)> {
    let mut total_return = 0.0;
    let mut total_len = 0.0;
    for k in 0..episodes {
        let mut rng = episode_stream(seed, true, epoch, k);
        let mut s = env.reset(&mut rng);
        let mut ret = 0.0;
        let mut len = 0usize;
        for _ in 0..env.max_episode_steps() {
            let a = policy.greedy(env, &s);
            let tr = env.step(&s, &a, &mut rng)?;
            ret += tr.reward;
            len += 1;
            s = tr.next;
            if tr.terminal {
                break;
            }
        }
        total_return += ret;
        total_len += len as f64;
    }
    Ok((total_return / episodes as f64, total_len / episodes as f64))
}

/// Collected experience of one epoch.
pub(crate) struct EpochData<S, A> {
    pub batch: SurrogateBatch<S, A>,
    pub pairs: Vec<TrajectoryPair<S, A>>,
    pub violations: usize,
    pub interventions: usize,
    pub env_steps: usize,
    pub surrogate_return_mean: f64,
    pub cost_value_mean: f64,
}

pub(crate) fn collect_epoch<E, P, G>(
    env: &E,
    policy: &P,
    rule: &G,
    penalty: f64,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochData<E::State, E::Action>>
where
    E: Environment,
    P: Policy<E>,
    G: AdvantageRule<State = E::State, Action = E::Action>,
{
    let mut episodes = Vec::new();
    let mut pairs = Vec::new();
    let (mut violations, mut interventions, mut env_steps) = (0, 0, 0);
    let (mut ret_sum, mut cost_sum) = (0.0, 0.0);
    let mut collected = 0;
    let mut index = 0;
    while collected < batch_size {
        let mut rng = episode_stream(seed, false, epoch, index);
        let out = shielded_episode(env, policy, rule, penalty, batch_size - collected, &mut rng)?;
        index += 1;
        if out.surrogate.is_empty() {
            return Err(LearnError::Environment("episode produced no learner steps".into()));
        }
        collected += out.surrogate.len();
        violations += out.violated as usize;
        interventions += out.intervened as usize;
        env_steps += out.pair.raw.len();
        ret_sum += out.surrogate.steps.iter().map(|s| s.reward).sum::<f64>();
        cost_sum += out.discounted_cost;
        episodes.push(out.surrogate);
        pairs.push(out.pair);
    }
    let n = episodes.len() as f64;
    Ok(EpochData {
        batch: SurrogateBatch {
            episodes,
            gamma: env.gamma(),
        },
        pairs,
        violations,
        interventions,
        env_steps,
        surrogate_return_mean: ret_sum / n,
        cost_value_mean: cost_sum / n,
    })
}

/// Trains `learner` on the surrogate MDP induced by `rule` and `penalty`.
pub fn run_sailr<E, L, G>(
    env: &E,
    learner: &mut L,
    rule: G,
    penalty: f64,
    budget: &TrainingBudget,
    seed: u64,
) -> Result<TrainingOutcome<L::Policy>>
where
    E: Environment,
    L: BaseLearner<E>,
    G: AdvantageRule<State = E::State, Action = E::Action>,
{
    run_sailr_with(env, learner, rule, penalty, budget, seed, &mut NoRefinement)
}

pub fn run_sailr_with<E, L, G, F>(
    env: &E,
    learner: &mut L,
    mut rule: G,
    penalty: f64,
    budget: &TrainingBudget,
    seed: u64,
    refiner: &mut F,
) -> Result<TrainingOutcome<L::Policy>>
where
    E: Environment,
    L: BaseLearner<E>,
    G: AdvantageRule<State = E::State, Action = E::Action>,
    F: RuleRefiner<G, E::State, E::Action>,
{
    budget.validate()?;
    if !(penalty <= 0.0) {
        return Err(config(format!("penalty {penalty} must be <= 0")));
    }
    learner.initialize(env, seed)?;
    let mut metrics = Vec::with_capacity(budget.epochs);
    let mut diagnostics = Vec::with_capacity(budget.epochs);
    let (mut cum_v, mut cum_i) = (0u64, 0u64);
    for epoch in 1..=budget.epochs {
        let pi = learner.data_collection_policy();
        let data = collect_epoch(env, &pi, &rule, penalty, budget.batch_size, seed, epoch)?;
        learner.optimize_policy(env, &data.batch)?;
        refiner.refine(epoch, &mut rule, &data.pairs)?;
        cum_v += data.violations as u64;
        cum_i += data.interventions as u64;
        let (ret, len) = deploy(env, &learner.optimized_policy(), budget.deploy_episodes, seed, epoch)?;
        metrics.push(MetricsRecord {
            epoch,
            seed,
            deploy_return_mean: ret,
            deploy_len_mean: len,
            cum_violations: cum_v,
            cum_interventions: cum_i,
        });
        diagnostics.push(EpochDiagnostics {
            epoch,
            episodes: data.batch.episodes.len(),
            violations: data.violations,
            interventions: data.interventions,
            env_steps: data.env_steps,
            surrogate_return_mean: data.surrogate_return_mean,
            cost_value_mean: data.cost_value_mean,
            lagrange_multiplier: 0.0,
        });
    }
    Ok(TrainingOutcome {
        policy: learner.optimized_policy(),
        metrics,
        diagnostics,
    })
}
