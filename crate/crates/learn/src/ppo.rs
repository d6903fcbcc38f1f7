//! Clipped-surrogate policy gradient with a Gaussian policy and a learned
//! state-value baseline.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::ContinuousEnv;
use crate::error::{config, LearnError, Result};
use crate::nn::{squared_norm, Adam, Mlp};
use crate::policy::Policy;
use crate::sailr::{BaseLearner, SurrogateBatch};

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Stops training when the mean surrogate episode return stays below
/// `floor` for `patience` consecutive updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceGuard {
    pub floor: f64,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub clip_ratio: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    /// Policy updates stop for the batch once the sample KL exceeds 1.5x this.
    pub target_kl: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub min_log_std: f64,
    /// Value network outputs are multiplied by this before use.
    pub value_scale: f64,
    pub divergence: Option<DivergenceGuard>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            policy_lr: 3e-4,
            value_lr: 1e-3,
            clip_ratio: 0.2,
            entropy_coef: 0.001,
            gae_lambda: 0.97,
            update_epochs: 10,
            minibatch_size: 250,
            target_kl: 0.02,
            max_grad_norm: 0.5,
            init_log_std: -0.5,
            min_log_std: -5.0,
            value_scale: 1.0,
            divergence: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(config("hidden layer sizes must be positive"));
        }
        let nonneg = [
            ("policy_lr", self.policy_lr),
            ("value_lr", self.value_lr),
            ("entropy_coef", self.entropy_coef),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(config(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(config("clip_ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(config("gae_lambda must lie in [0, 1]"));
        }
        if self.update_epochs == 0 || self.minibatch_size == 0 {
            return Err(config("update_epochs and minibatch_size must be positive"));
        }
        if !(self.target_kl > 0.0) || !(self.max_grad_norm > 0.0) || !(self.value_scale > 0.0) {
            return Err(config("target_kl, max_grad_norm and value_scale must be positive"));
        }
        if !self.init_log_std.is_finite() || !(self.min_log_std <= self.init_log_std) {
            return Err(config("init_log_std must be finite and at least min_log_std"));
        }
        if let Some(g) = self.divergence {
            if g.patience == 0 || g.floor.is_nan() {
                return Err(config("divergence guard needs a floor and positive patience"));
            }
        }
        Ok(())
    }
}

/// Diagonal Gaussian around an MLP mean with state-independent spread.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    fn mean_action<E: ContinuousEnv>(&self, env: &E, s: &E::State) -> DVector<f64> {
        let mut obs = vec![0.0; env.obs_dim()];
        env.features(s, &mut obs);
        self.mean.forward_one(&obs)
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        let mut lp = 0.0;
        for ((&m, &a), &ls) in mean.iter().zip(action).zip(&self.log_std) {
            let z = (a - m) / ls.exp();
            lp += -0.5 * z * z - ls - 0.5 * LOG_2PI;
        }
        lp
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|ls| ls + 0.5 * (LOG_2PI + 1.0)).sum()
    }
}

impl<E: ContinuousEnv> Policy<E> for GaussianPolicy {
    fn sample(&self, env: &E, s: &E::State, rng: &mut ChaCha8Rng) -> E::Action {
        let m = self.mean_action(env, s);
        let raw: Vec<f64> = m
            .iter()
            .zip(&self.log_std)
            .map(|(mu, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                mu + ls.exp() * z
            })
            .collect();
        env.action_from_slice(&raw)
    }

    fn greedy(&self, env: &E, s: &E::State) -> E::Action {
        let m = self.mean_action(env, s);
        env.action_from_slice(m.as_slice())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_steps: usize,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct PolicyGradientLearner {
    pub config: PpoConfig,
    policy: Option<GaussianPolicy>,
    value: Option<Mlp>,
    policy_opt: Option<Adam>,
    value_opt: Option<Adam>,
    rng: ChaCha8Rng,
    below_floor: usize,
    pub last_stats: UpdateStats,
}

fn shapes(net: &Mlp) -> Vec<usize> {
    net.layers.iter().flat_map(|l| [l.w.len(), l.b.len()]).collect()
}

/// Generalized advantage estimates and value targets for one episode.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

impl PolicyGradientLearner {
    pub fn new(config: PpoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            policy: None,
            value: None,
            policy_opt: None,
            value_opt: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            below_floor: 0,
            last_stats: UpdateStats::default(),
        })
    }

    pub fn policy(&self) -> Option<&GaussianPolicy> {
        self.policy.as_ref()
    }

    fn parts(&self) -> Result<(&GaussianPolicy, &Mlp)> {
        match (&self.policy, &self.value) {
            (Some(p), Some(v)) => Ok((p, v)),
            _ => Err(config("learner used before initialize")),
        }
    }
}

impl<E: ContinuousEnv> BaseLearner<E> for PolicyGradientLearner {
    type Policy = GaussianPolicy;

    fn initialize(&mut self, env: &E, seed: u64) -> Result<()> {
        let mut init = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut sizes = vec![env.obs_dim()];
        sizes.extend(&self.config.hidden);
        let mut psizes = sizes.clone();
        psizes.push(env.action_dim());
        sizes.push(1);
        let mean = Mlp::new(&psizes, 0.01, &mut init);
        let value = Mlp::new(&sizes, 1.0, &mut init);
        let mut pshapes = shapes(&mean);
        pshapes.push(env.action_dim());
        self.policy_opt = Some(Adam::new(self.config.policy_lr, &pshapes));
        self.value_opt = Some(Adam::new(self.config.value_lr, &shapes(&value)));
        self.policy = Some(GaussianPolicy {
            mean,
            log_std: vec![self.config.init_log_std; env.action_dim()],
        });
        self.value = Some(value);
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545_f491_4f6c_dd1d);
        self.below_floor = 0;
        Ok(())
    }

    fn data_collection_policy(&self) -> GaussianPolicy {
        self.policy.clone().expect("learner used before initialize")
    }

    fn optimized_policy(&self) -> GaussianPolicy {
        self.policy.clone().expect("learner used before initialize")
    }

    fn optimize_policy(&mut self, env: &E, batch: &SurrogateBatch<E::State, E::Action>) -> Result<()> {
        let cfg = self.config.clone();
        let (policy, value) = self.parts()?;
        let obs_dim = policy.mean.input_dim();
        let act_dim = policy.mean.output_dim();
        let n = batch.num_steps();
        if n == 0 {
            return Err(config("empty batch"));
        }
        let mut obs = DMatrix::zeros(obs_dim, n);
        let mut acts = DMatrix::zeros(act_dim, n);
        let mut boot_obs = Vec::new();
        let mut col = 0;
        let mut buf = vec![0.0; obs_dim];
        for ep in &batch.episodes {
            for step in &ep.steps {
                env.features(&step.state, &mut buf);
                obs.column_mut(col).copy_from_slice(&buf);
                acts.column_mut(col).copy_from_slice(&env.action_to_vec(&step.action));
                col += 1;
            }
            if let Some(b) = &ep.bootstrap {
                env.features(b, &mut buf);
                boot_obs.push(buf.clone());
            }
        }
        let (v_all, _) = value.forward(&obs);
        let v_all: Vec<f64> = v_all.iter().map(|v| v * cfg.value_scale).collect();
        let boot_vals: Vec<f64> = boot_obs
            .iter()
            .map(|o| value.forward_one(o)[0] * cfg.value_scale)
            .collect();

        let mut adv = Vec::with_capacity(n);
        let mut ret = Vec::with_capacity(n);
        let (mut start, mut bi) = (0, 0);
        let mut ep_returns = Vec::with_capacity(batch.episodes.len());
        for ep in &batch.episodes {
            let rewards: Vec<f64> = ep.steps.iter().map(|s| s.reward).collect();
            ep_returns.push(rewards.iter().sum::<f64>());
            let boot = if ep.bootstrap.is_some() {
                bi += 1;
                boot_vals[bi - 1]
            } else {
                0.0
            };
            let (a, r) = gae(
                &rewards,
                &v_all[start..start + rewards.len()],
                boot,
                batch.gamma,
                cfg.gae_lambda,
            );
            adv.extend(a);
            ret.extend(r);
            start += rewards.len();
        }
        let mean_adv = adv.iter().sum::<f64>() / n as f64;
        let std_adv = (adv.iter().map(|a| (a - mean_adv).powi(2)).sum::<f64>() / n as f64).sqrt();
        for a in &mut adv {
            *a = (*a - mean_adv) / (std_adv + 1e-8);
        }

        let (means, _) = policy.mean.forward(&obs);
        let old_logp: Vec<f64> = (0..n)
            .map(|j| {
                let m: Vec<f64> = means.column(j).iter().copied().collect();
                let a: Vec<f64> = acts.column(j).iter().copied().collect();
                policy.log_prob(&m, &a)
            })
            .collect();

        let mut policy = policy.clone();
        let mut value = value.clone();
        let mut popt = self.policy_opt.take().expect("initialized");
        let mut vopt = self.value_opt.take().expect("initialized");
        let mut stats = UpdateStats::default();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut policy_active = true;
        for _ in 0..cfg.update_epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(cfg.minibatch_size) {
                let b = chunk.len();
                let x = DMatrix::from_fn(obs_dim, b, |i, j| obs[(i, chunk[j])]);
                if policy_active {
                    let (m, cache) = policy.mean.forward(&x);
                    let stds: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();
                    let mut d_mean = DMatrix::zeros(act_dim, b);
                    let mut d_logstd = vec![0.0; act_dim];
                    let mut kl = 0.0;
                    for j in 0..b {
                        let k = chunk[j];
                        let mut lp = 0.0;
                        for d in 0..act_dim {
                            let z = (acts[(d, k)] - m[(d, j)]) / stds[d];
                            lp += -0.5 * z * z - policy.log_std[d] - 0.5 * LOG_2PI;
                        }
                        let ratio = (lp - old_logp[k]).exp();
                        kl += old_logp[k] - lp;
                        let a = adv[k];
                        let clipped =
                            (a > 0.0 && ratio > 1.0 + cfg.clip_ratio) || (a < 0.0 && ratio < 1.0 - cfg.clip_ratio);
                        if clipped {
                            continue;
                        }
                        // d(-ratio * a)/d(logp) = -ratio * a
                        let g = -ratio * a / b as f64;
                        for d in 0..act_dim {
                            let diff = acts[(d, k)] - m[(d, j)];
                            let var = stds[d] * stds[d];
                            d_mean[(d, j)] = g * diff / var;
                            d_logstd[d] += g * (diff * diff / var - 1.0);
                        }
                    }
                    kl /= b as f64;
                    stats.approx_kl = kl;
                    if kl > 1.5 * cfg.target_kl {
                        policy_active = false;
                        stats.stopped_early = true;
                    } else {
                        for g in &mut d_logstd {
                            *g -= cfg.entropy_coef;
                        }
                        let grads = policy.mean.backward(&cache, d_mean);
                        let mut slices = grads.slices();
                        slices.push(&d_logstd);
                        let norm = squared_norm(&slices).sqrt();
                        let scale = if norm > cfg.max_grad_norm {
                            cfg.max_grad_norm / norm
                        } else {
                            1.0
                        };
                        let mut params = policy.mean.params_mut();
                        params.push(policy.log_std.as_mut_slice());
                        popt.step(params, &slices, scale);
                        for l in &mut policy.log_std {
                            *l = l.max(cfg.min_log_std);
                        }
                        stats.policy_steps += 1;
                    }
                }
                let (v, cache) = value.forward(&x);
                let mut d_v = DMatrix::zeros(1, b);
                let mut loss = 0.0;
                for j in 0..b {
                    let err = v[(0, j)] * cfg.value_scale - ret[chunk[j]];
                    loss += err * err / b as f64;
                    d_v[(0, j)] = 2.0 * err * cfg.value_scale / b as f64;
                }
                stats.value_loss = loss;
                let grads = value.backward(&cache, d_v);
                let slices = grads.slices();
                let norm = squared_norm(&slices).sqrt();
                let scale = if norm > cfg.max_grad_norm {
                    cfg.max_grad_norm / norm
                } else {
                    1.0
                };
                vopt.step(value.params_mut(), &slices, scale);
            }
        }
        if !policy.mean.is_finite() || !value.is_finite() || policy.log_std.iter().any(|l| !l.is_finite()) {
            return Err(LearnError::Diverged("non-finite network parameters".into()));
        }
        self.policy = Some(policy);
        self.value = Some(value);
        self.policy_opt = Some(popt);
        self.value_opt = Some(vopt);
        self.last_stats = stats;

        if let Some(guard) = cfg.divergence {
            let mean_ret = ep_returns.iter().sum::<f64>() / ep_returns.len() as f64;
            if mean_ret < guard.floor {
                self.below_floor += 1;
            } else {
                self.below_floor = 0;
            }
            if self.below_floor >= guard.patience {
                return Err(LearnError::Diverged(format!(
                    "mean surrogate return {mean_ret} below {} for {} updates",
                    guard.floor, guard.patience
                )));
            }
        }
        Ok(())
    }
}
