//! Bundled instances.

pub mod point;
pub mod random;
pub mod toy;

pub use point::{
    brake_value, decelerate_backup, distance_to_unsafe, hinge_cost, is_backup_safe, model_based_qbar, point_reward,
    point_step, PointAction, PointParams, PointRule, PointState,
};
pub use random::{random_cmdp, random_cmdp_with, random_deterministic_policy, random_policy, RandomMdpSpec};
pub use toy::{appendix_b_counterexample, counterexample_layout, fig2_toy};
