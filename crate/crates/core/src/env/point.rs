//! Continuous point robot: dynamics, reward, shaped cost, decelerating
//! backup and a model-based `Qbar` evaluator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SailrError};
use crate::rules::AdvantageRule;

/// Speeds at or below this count as stopped.
pub const REST_SPEED: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointParams {
    pub mass: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub dt: f64,
    pub target_radius: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Hinge width of the shaped cost; zero gives the sparse indicator.
    pub hinge_alpha: f64,
    /// Mass assumed by the controller's model.
    pub model_mass: f64,
}

impl Default for PointParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            v_max: 2.0,
            a_max: 1.0,
            dt: 0.1,
            target_radius: 5.0,
            x_max: 2.5,
            y_max: 15.0,
            hinge_alpha: 0.5,
            model_mass: 1.0,
        }
    }
}

impl PointParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("dt", self.dt),
            ("target_radius", self.target_radius),
            ("x_max", self.x_max),
            ("y_max", self.y_max),
            ("model_mass", self.model_mass),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.hinge_alpha >= 0.0) {
            return Err(invalid("hinge_alpha must be nonnegative"));
        }
        Ok(())
    }

    /// Longest braking rollout the model can need.
    pub fn rollout_cap(&self) -> usize {
        (self.v_max * self.model_mass / (self.a_max * self.dt)).ceil() as usize + 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl PointState {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn at_rest(&self) -> bool {
        self.speed() <= REST_SPEED
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointAction {
    pub ax: f64,
    pub ay: f64,
}

impl PointAction {
    pub fn clamped(&self, a_max: f64) -> Self {
        Self {
            ax: self.ax.clamp(-a_max, a_max),
            ay: self.ay.clamp(-a_max, a_max),
        }
    }
}

/// One dynamics step with an explicit mass.
pub fn point_step_with_mass(s: &PointState, a: &PointAction, p: &PointParams, mass: f64) -> PointState {
    let a = a.clamped(p.a_max);
    let half = p.dt * p.dt / (2.0 * mass);
    let x = s.x + s.vx * p.dt + a.ax * half;
    let y = s.y + s.vy * p.dt + a.ay * half;
    let mut vx = s.vx + a.ax * p.dt / mass;
    let mut vy = s.vy + a.ay * p.dt / mass;
    let speed = vx.hypot(vy);
    if speed > p.v_max {
        let k = p.v_max / speed;
        vx *= k;
        vy *= k;
    }
    PointState { x, y, vx, vy }
}

/// True dynamics (mass `p.mass`).
pub fn point_step(s: &PointState, a: &PointAction, p: &PointParams) -> PointState {
    point_step_with_mass(s, a, p, p.mass)
}

/// Rewards tangential speed along the circle of radius `target_radius`.
pub fn point_reward(s: &PointState, p: &PointParams) -> f64 {
    let tangential = s.vx * (-s.y) + s.vy * s.x;
    tangential / (1.0 + (s.x.hypot(s.y) - p.target_radius).abs())
}

/// Distance to the unsafe region, zero on or beyond the walls.
pub fn distance_to_unsafe(s: &PointState, p: &PointParams) -> f64 {
    let d = (p.x_max - s.x).min(p.x_max + s.x).min(p.y_max - s.y).min(p.y_max + s.y);
    d.max(0.0)
}

pub fn is_unsafe(s: &PointState, p: &PointParams) -> bool {
    distance_to_unsafe(s, p) == 0.0
}

/// Shaped cost `max(0, 1 - dist / alpha)`, or the indicator of
/// `dist = 0` when `alpha = 0`.
pub fn hinge_cost(s: &PointState, p: &PointParams, alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(invalid(format!("hinge width {alpha} must be nonnegative")));
    }
    Ok(hinge_cost_unchecked(s, p, alpha))
}

fn hinge_cost_unchecked(s: &PointState, p: &PointParams, alpha: f64) -> f64 {
    let d = distance_to_unsafe(s, p);
    if alpha == 0.0 {
        if d == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (1.0 - d / alpha).max(0.0)
    }
}

/// Component-wise braking force sized to cancel velocity in as few steps as
/// the force bound allows, under the model mass.
pub fn decelerate_backup(s: &PointState, p: &PointParams) -> PointAction {
    let k = p.model_mass / p.dt;
    PointAction {
        ax: (-s.vx * k).clamp(-p.a_max, p.a_max),
        ay: (-s.vy * k).clamp(-p.a_max, p.a_max),
    }
}

/// Discounted shaped cost of braking from `s` under the model: states up to
/// the first one at rest, plus one confirming step.
pub fn brake_value(s: &PointState, p: &PointParams, gamma: f64) -> f64 {
    let cap = p.rollout_cap();
    let mut state = *s;
    let mut total = 0.0;
    let mut w = 1.0;
    for _ in 0..cap {
        total += w * hinge_cost_unchecked(&state, p, p.hinge_alpha);
        w *= gamma;
        if state.at_rest() {
            break;
        }
        let a = decelerate_backup(&state, p);
        state = point_step_with_mass(&state, &a, p, p.model_mass);
    }
    total + w * hinge_cost_unchecked(&state, p, p.hinge_alpha)
}

/// `Qbar(s,a) = c^(s) + gamma * brake_value(f_model(s,a))`.
///
/// The model keeps integrating past the walls (cost 1 there) so that
/// rollouts which cross a wall are never cheaper than ones that stop short.
pub fn model_based_qbar(s: &PointState, a: &PointAction, p: &PointParams, gamma: f64) -> f64 {
    let next = point_step_with_mass(s, a, p, p.model_mass);
    hinge_cost_unchecked(s, p, p.hinge_alpha) + gamma * brake_value(&next, p, gamma)
}

/// Braking from `s` under the true dynamics never enters the unsafe region.
pub fn is_backup_safe(s: &PointState, p: &PointParams) -> bool {
    let mut state = *s;
    let cap = (p.v_max * p.mass / (p.a_max * p.dt)).ceil() as usize * 4 + 8;
    for _ in 0..cap {
        if is_unsafe(&state, p) {
            return false;
        }
        if state.at_rest() {
            return true;
        }
        state = point_step(&state, &decelerate_backup(&state, p), p);
    }
    !is_unsafe(&state, p)
}

/// The model-based rule for the point robot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRule {
    pub params: PointParams,
    pub gamma: f64,
    pub eta: f64,
}

impl PointRule {
    pub fn new(params: PointParams, gamma: f64, eta: f64) -> Result<Self> {
        params.validate()?;
        if !(0.0..1.0).contains(&gamma) {
            return Err(invalid("discount must lie in [0, 1)"));
        }
        if !eta.is_finite() || eta < 0.0 {
            return Err(invalid("threshold must be finite and nonnegative"));
        }
        Ok(Self { params, gamma, eta })
    }

    pub fn qbar(&self, s: &PointState, a: &PointAction) -> f64 {
        model_based_qbar(s, a, &self.params, self.gamma)
    }
}

impl AdvantageRule for PointRule {
    type State = PointState;
    type Action = PointAction;

    fn advantage(&self, s: &PointState, a: &PointAction) -> Result<f64> {
        let q = self.qbar(s, a);
        let qmu = self.qbar(s, &decelerate_backup(s, &self.params));
        let adv = q - qmu;
        if !adv.is_finite() {
            return Err(SailrError::NonConvergence("non-finite model rollout".into()));
        }
        Ok(adv)
    }

    fn threshold(&self) -> f64 {
        self.eta
    }

    fn sample_backup<R: Rng + ?Sized>(&self, s: &PointState, _rng: &mut R) -> Result<PointAction> {
        Ok(decelerate_backup(s, &self.params))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_zero_action_is_fixed() {
        let p = PointParams::default();
        let s = PointState {
            x: 1.0,
            y: -2.0,
            vx: 0.0,
            vy: 0.0,
        };
        assert_eq!(point_step(&s, &PointAction::default(), &p), s);
        assert_eq!(decelerate_backup(&s, &p), PointAction { ax: 0.0, ay: 0.0 });
    }

    #[test]
    fn hinge_rejects_negative_width() {
        let p = PointParams::default();
        assert!(hinge_cost(&PointState::default(), &p, -0.1).is_err());
    }

    #[test]
    fn params_validate() {
        let mut p = PointParams::default();
        assert!(p.validate().is_ok());
        p.mass = 0.0;
        assert!(p.validate().is_err());
        assert_eq!(PointParams::default().rollout_cap(), 22);
    }
}
