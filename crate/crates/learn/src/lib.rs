//! Training side of the lab: the intervention-guided loop over pluggable base
//! learners, the primal-dual baseline, and the metrics they log.

// `!(x > 0.0)` style guards are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod env;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pdo;
pub mod policy;
pub mod ppo;
pub mod sailr;
pub mod tabular;

pub use env::{ContinuousEnv, Environment, FiniteEnv, PointEnv, Transition};
pub use error::{LearnError, Result};
pub use metrics::{read_metrics_csv, write_metrics_csv, METRICS_HEADER};
pub use pdo::{pdo_baseline, PdoConfig};
pub use policy::Policy;
pub use ppo::{GaussianPolicy, PolicyGradientLearner, PpoConfig};
pub use sailr::{
    run_sailr, run_sailr_with, BaseLearner, MetricsRecord, NoRefinement, RuleRefiner, SurrogateBatch, TrainingBudget,
    TrainingOutcome,
};
pub use tabular::{StepSize, TabularQLearner, TabularViLearner};
