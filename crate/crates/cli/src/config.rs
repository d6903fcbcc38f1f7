//! Experiment configuration read from TOML. Every field has a default, so an
//! empty file is a valid point-robot SAILR run.

use std::collections::BTreeSet;
use std::path::PathBuf;

use sailr_core::env::point::PointParams;
use sailr_learn::{PdoConfig, PpoConfig, StepSize, TrainingBudget};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const ENVIRONMENTS: [&str; 2] = ["point", "fig2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sailr,
    Pdo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    /// Point robot rule that rolls out the decelerating backup in a model.
    ModelBased,
    /// The rule bundled with the four-state example.
    Fig2,
    /// Rule built from the optimal cost-to-go of the tabular model.
    Optimal,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Ppo,
    QLearning,
    ValueIteration,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleSection {
    /// Defaults to `model_based` on the point robot and `fig2` on the toy.
    pub kind: Option<RuleKind>,
    pub eta: Option<f64>,
    /// Mass assumed by the model-based rule; overrides `point.params.model_mass`.
    pub model_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointSection {
    pub gamma: f64,
    pub max_steps: usize,
    pub init_jitter: f64,
    pub params: PointParams,
}

impl Default for PointSection {
    fn default() -> Self {
        let env = sailr_learn::PointEnv::default();
        Self {
            gamma: env.gamma,
            max_steps: env.max_steps,
            init_jitter: env.init_jitter,
            params: env.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSection {
    pub max_steps: usize,
}

impl Default for TabularSection {
    fn default() -> Self {
        Self { max_steps: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    /// Defaults to `ppo` on the point robot and `q_learning` on the toy.
    pub kind: Option<LearnerKind>,
    pub ppo: PpoConfig,
    pub step_size: StepSize,
    pub epsilon: f64,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            kind: None,
            ppo: PpoConfig::default(),
            step_size: StepSize::Constant { alpha: 0.2 },
            epsilon: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: String,
    pub algorithm: Algorithm,
    /// Surrogate reward paid on intervention.
    pub penalty: f64,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub budget: TrainingBudget,
    pub rule: RuleSection,
    pub learner: LearnerSection,
    pub pdo: PdoConfig,
    pub point: PointSection,
    pub fig2: TabularSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            environment: "point".into(),
            algorithm: Algorithm::Sailr,
            penalty: -2.0,
            seeds: vec![0, 1, 2],
            output_dir: None,
            budget: TrainingBudget::default(),
            rule: RuleSection::default(),
            learner: LearnerSection::default(),
            pdo: PdoConfig::default(),
            point: PointSection::default(),
            fig2: TabularSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses, fills in environment-dependent defaults and validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn rule_kind(&self) -> RuleKind {
        self.rule.kind.expect("resolved config has a rule kind")
    }

    pub fn learner_kind(&self) -> LearnerKind {
        self.learner.kind.expect("resolved config has a learner kind")
    }

    pub fn eta(&self) -> f64 {
        self.rule.eta.unwrap_or(match self.environment.as_str() {
            "fig2" => sailr_core::env::toy::FIG2_ETA,
            _ => 0.0,
        })
    }

    fn resolve(&mut self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let (default_rule, default_learner, rules, learners): (_, _, &[RuleKind], &[LearnerKind]) =
            match self.environment.as_str() {
                "point" => (
                    RuleKind::ModelBased,
                    LearnerKind::Ppo,
                    &[RuleKind::ModelBased, RuleKind::None],
                    &[LearnerKind::Ppo],
                ),
                "fig2" => (
                    RuleKind::Fig2,
                    LearnerKind::QLearning,
                    &[RuleKind::Fig2, RuleKind::Optimal, RuleKind::None],
                    &[LearnerKind::QLearning, LearnerKind::ValueIteration],
                ),
                other => {
                    return bad(format!(
                        "unknown environment id {other:?}; expected one of {ENVIRONMENTS:?}"
                    ))
                }
            };
        if self.algorithm == Algorithm::Pdo {
            match self.rule.kind {
                None | Some(RuleKind::None) => self.rule.kind = Some(RuleKind::None),
                Some(k) => {
                    return bad(format!(
                        "the primal-dual baseline runs without a rule, got rule kind {k:?}"
                    ))
                }
            }
        }
        let rule = *self.rule.kind.get_or_insert(default_rule);
        let learner = *self.learner.kind.get_or_insert(default_learner);
        if !rules.contains(&rule) {
            return bad(format!(
                "rule kind {rule:?} does not apply to environment {:?}",
                self.environment
            ));
        }
        if !learners.contains(&learner) {
            return bad(format!(
                "learner {learner:?} does not apply to environment {:?}",
                self.environment
            ));
        }
        if self.algorithm == Algorithm::Pdo && learner == LearnerKind::ValueIteration {
            return bad("value iteration ignores costs and cannot serve the primal-dual baseline".into());
        }
        if self.environment != "point" && self.rule.model_mass.is_some() {
            return bad("rule.model_mass only applies to the point robot".into());
        }
        if let Some(m) = self.rule.model_mass {
            if !m.is_finite() || m <= 0.0 {
                return bad(format!("rule.model_mass must be positive, got {m}"));
            }
        }
        if !self.penalty.is_finite() || self.penalty > 0.0 {
            return bad(format!("penalty must be finite and nonpositive, got {}", self.penalty));
        }
        if let Some(eta) = self.rule.eta {
            if !eta.is_finite() || eta < 0.0 {
                return bad(format!("eta must be finite and nonnegative, got {eta}"));
            }
            if self.environment == "fig2" && eta > 1.0 {
                return bad(format!("tabular rules need eta in [0, 1], got {eta}"));
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.fig2.max_steps == 0 || self.point.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        self.budget.validate()?;
        self.pdo.validate()?;
        self.learner.ppo.validate()?;
        self.point_env()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn point_env(&self) -> sailr_learn::PointEnv {
        sailr_learn::PointEnv {
            params: self.point.params,
            gamma: self.point.gamma,
            max_steps: self.point.max_steps,
            init_jitter: self.point.init_jitter,
        }
    }
}
