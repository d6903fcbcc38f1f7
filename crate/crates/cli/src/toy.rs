//! `toy`: builds the surrogate MDP of a bundled example and solves it.

use std::fmt::Write as _;

use sailr_core::absorbing::{build_absorbing, intervention_probability};
use sailr_core::env::toy::{appendix_b_counterexample, fig2_toy};
use sailr_core::mdp::{value_iteration, RewardKind};
use sailr_core::rules::{build_intervention_set, certify_admissibility, is_partial};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const DEFAULT_PENALTY: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ToyExample {
    Fig2,
    AppendixB,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyOptions {
    pub example: ToyExample,
    pub penalty: Option<f64>,
    /// Overrides the bundled rule threshold; the four-state example only.
    pub eta: Option<f64>,
    /// Extra chain states before the violation state; the counterexample only.
    pub chain: usize,
}

impl ToyOptions {
    pub fn new(example: ToyExample) -> Self {
        Self {
            example,
            penalty: None,
            eta: None,
            chain: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateRow {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    /// `(next state, probability)` for every successor with positive mass.
    pub next: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReport {
    pub example: ToyExample,
    pub gamma: f64,
    pub penalty: f64,
    pub eta: Option<f64>,
    /// Certified admissibility slack of the rule, when the example has one.
    pub sigma_min: Option<f64>,
    pub num_states: usize,
    pub num_actions: usize,
    pub violation_state: usize,
    pub sink_state: usize,
    pub dagger_state: usize,
    pub intervention_set: Vec<(usize, usize)>,
    pub partial: bool,
    pub surrogate: Vec<SurrogateRow>,
    /// Greedy action of the optimal surrogate policy at each safe state.
    pub optimal_actions: Vec<(usize, usize)>,
    pub optimal_value: f64,
    /// Intervention probability of the optimal surrogate policy.
    pub optimal_intervention_probability: f64,
}

impl ToyReport {
    fn label(&self, s: usize) -> String {
        if s == self.violation_state {
            "s_viol".into()
        } else if s == self.sink_state {
            "s_sink".into()
        } else if s == self.dagger_state {
            "s_dagger".into()
        } else {
            s.to_string()
        }
    }

    pub fn render(&self) -> String {
        let mut o = String::new();
        let ex = match self.example {
            ToyExample::Fig2 => "fig2",
            ToyExample::AppendixB => "appendix-b",
        };
        let _ = writeln!(o, "example {ex}: gamma = {}, penalty = {}", self.gamma, self.penalty);
        if let Some(eta) = self.eta {
            let _ = writeln!(o, "eta = {eta}");
        }
        match self.sigma_min {
            Some(s) => {
                let _ = writeln!(o, "certified sigma_min = {s}");
            }
            None => {
                let _ = writeln!(o, "certified sigma_min = n/a (set given directly)");
            }
        }
        let pairs: Vec<String> = self
            .intervention_set
            .iter()
            .map(|&(s, a)| format!("({}, a{a})", self.label(s)))
            .collect();
        let _ = writeln!(
            o,
            "intervention set ({}): {{{}}}",
            if self.partial { "partial" } else { "not partial" },
            pairs.join(", ")
        );
        let _ = writeln!(o, "surrogate MDP:");
        let _ = writeln!(o, "  {:>9} {:>6} {:>8}  next", "state", "action", "reward");
        for r in &self.surrogate {
            let next: Vec<String> = r.next.iter().map(|&(n, p)| format!("{}:{p}", self.label(n))).collect();
            let _ = writeln!(
                o,
                "  {:>9} {:>6} {:>8}  {}",
                self.label(r.state),
                format!("a{}", r.action),
                r.reward,
                next.join(" ")
            );
        }
        let acts: Vec<String> = self
            .optimal_actions
            .iter()
            .map(|&(s, a)| format!("{}->a{a}", self.label(s)))
            .collect();
        let _ = writeln!(o, "optimal surrogate policy: {}", acts.join(", "));
        let _ = writeln!(o, "optimal surrogate value = {}", self.optimal_value);
        let _ = writeln!(
            o,
            "intervention probability of the optimum = {}",
            self.optimal_intervention_probability
        );
        o
    }
}

pub fn cmd_toy(opts: &ToyOptions) -> Result<ToyReport> {
    let penalty = opts.penalty.unwrap_or(DEFAULT_PENALTY);
    if !penalty.is_finite() || penalty > 0.0 {
        return Err(CliError::Usage(format!(
            "--rtilde must be finite and nonpositive, got {penalty}"
        )));
    }
    let (mdp, set, eta, sigma) = match opts.example {
        ToyExample::Fig2 => {
            if opts.chain != 0 {
                return Err(CliError::Usage("--chain applies to appendix-b only".into()));
            }
            let (mdp, rule) = fig2_toy();
            let rule = match opts.eta {
                Some(eta) => rule.with_eta(eta).map_err(|e| CliError::Usage(format!("--eta: {e}")))?,
                None => rule,
            };
            let sigma = certify_admissibility(&mdp, &rule)?.sigma_min;
            let set = build_intervention_set(&rule);
            (mdp, set, Some(rule.eta()), Some(sigma))
        }
        ToyExample::AppendixB => {
            if opts.eta.is_some() {
                return Err(CliError::Usage(
                    "--eta applies to fig2 only; the counterexample fixes its set".into(),
                ));
            }
            let (mdp, set) = appendix_b_counterexample(opts.chain);
            (mdp, set, None, None)
        }
    };
    let abs = build_absorbing(&mdp, &set, penalty)?;
    let (vf, pi) = value_iteration(&abs, RewardKind::Reward, 1e-12)?;
    let restricted = abs.restrict_policy(&pi)?;
    let optimal_value: f64 = abs.d0().iter().zip(&vf.v).map(|(d, v)| d * v).sum();
    let mut surrogate = Vec::new();
    for s in 0..abs.num_states() {
        for a in 0..abs.num_actions() {
            let next = abs
                .next(s, a)
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(n, &p)| (n, p))
                .collect();
            surrogate.push(SurrogateRow {
                state: s,
                action: a,
                reward: abs.reward(s, a),
                next,
            });
        }
    }
    Ok(ToyReport {
        example: opts.example,
        gamma: mdp.gamma(),
        penalty,
        eta,
        sigma_min: sigma,
        num_states: mdp.num_states(),
        num_actions: mdp.num_actions(),
        violation_state: mdp.violation_state(),
        sink_state: mdp.sink_state(),
        dagger_state: abs.dagger_state(),
        intervention_set: set.pairs(),
        partial: is_partial(&set),
        surrogate,
        optimal_actions: mdp.safe_states().map(|s| (s, restricted.mode(s))).collect(),
        optimal_value,
        optimal_intervention_probability: intervention_probability(&mdp, &set, &restricted)?,
    })
}
