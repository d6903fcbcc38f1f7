//! `train`: runs SAILR or the primal-dual baseline for every configured seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sailr_core::env::point::PointRule;
use sailr_core::env::toy::{fig2_mdp, fig2_rule};
use sailr_core::rules::{build_intervention_set, make_optimal_rule, AdvantageRule, InterventionRule, InterventionSet};
use sailr_learn::sailr::{EpochDiagnostics, NoShield};
use sailr_learn::{
    pdo_baseline, run_sailr, write_metrics_csv, BaseLearner, Environment, FiniteEnv, MetricsRecord,
    PolicyGradientLearner, TabularQLearner, TabularViLearner, TrainingOutcome,
};
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig, LearnerKind, RuleKind};
use crate::error::{io_err, CliError, Result};
use crate::provenance::{git_blob_hash, Provenance};
use crate::workers::run_indexed;

pub const CONFIG_COPY: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

pub fn diagnostics_file_name(seed: u64) -> String {
    format!("diagnostics_seed{seed}.csv")
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    pub out: Option<PathBuf>,
    /// Replaces the configured seed list with a single seed.
    pub seed: Option<u64>,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: Vec<MetricsRecord>,
    pub diagnostics: Vec<EpochDiagnostics>,
}

impl<P> From<(u64, TrainingOutcome<P>)> for SeedRun {
    fn from((seed, o): (u64, TrainingOutcome<P>)) -> Self {
        Self {
            seed,
            metrics: o.metrics,
            diagnostics: o.diagnostics,
        }
    }
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub deploy_return_mean: Stat,
    pub deploy_len_mean: Stat,
    pub cum_violations: Stat,
    pub cum_interventions: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub environment: String,
    pub algorithm: Algorithm,
    pub rule: RuleKind,
    pub learner: LearnerKind,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// Training violations summed over seeds.
    pub total_violations: u64,
    pub total_interventions: u64,
    pub per_epoch: Vec<EpochSummary>,
}

impl TrainSummary {
    pub fn from_runs(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Self {
        let per_epoch = (0..cfg.budget.epochs)
            .map(|i| {
                let col =
                    |f: fn(&MetricsRecord) -> f64| Stat::of(&runs.iter().map(|r| f(&r.metrics[i])).collect::<Vec<_>>());
                EpochSummary {
                    epoch: i + 1,
                    deploy_return_mean: col(|m| m.deploy_return_mean),
                    deploy_len_mean: col(|m| m.deploy_len_mean),
                    cum_violations: col(|m| m.cum_violations as f64),
                    cum_interventions: col(|m| m.cum_interventions as f64),
                }
            })
            .collect();
        let last = |f: fn(&MetricsRecord) -> u64| runs.iter().filter_map(|r| r.metrics.last().map(f)).sum();
        Self {
            environment: cfg.environment.clone(),
            algorithm: cfg.algorithm,
            rule: cfg.rule_kind(),
            learner: cfg.learner_kind(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            epochs: cfg.budget.epochs,
            total_violations: last(|m| m.cum_violations),
            total_interventions: last(|m| m.cum_interventions),
            per_epoch,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub out_dir: PathBuf,
    pub summary: TrainSummary,
    pub runs: Vec<SeedRun>,
}

fn drive<E, L, G>(cfg: &ExperimentConfig, env: &E, learner: &mut L, rule: Option<G>, seed: u64) -> Result<SeedRun>
where
    E: Environment,
    L: BaseLearner<E>,
    G: AdvantageRule<State = E::State, Action = E::Action>,
{
    let outcome = match (cfg.algorithm, rule) {
        (Algorithm::Pdo, _) => pdo_baseline(env, learner, &cfg.pdo, &cfg.budget, seed)?,
        (Algorithm::Sailr, Some(g)) => run_sailr(env, learner, g, cfg.penalty, &cfg.budget, seed)?,
        (Algorithm::Sailr, None) => run_sailr(env, learner, NoShield::default(), cfg.penalty, &cfg.budget, seed)?,
    };
    Ok((seed, outcome).into())
}

/// Trains one seed in memory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    match cfg.environment.as_str() {
        "point" => {
            let env = cfg.point_env();
            let rule = match cfg.rule_kind() {
                RuleKind::ModelBased => {
                    let mut params = env.params;
                    if let Some(m) = cfg.rule.model_mass {
                        params.model_mass = m;
                    }
                    Some(PointRule::new(params, env.gamma, cfg.eta())?)
                }
                _ => None,
            };
            let mut learner = PolicyGradientLearner::new(cfg.learner.ppo.clone())?;
            drive(cfg, &env, &mut learner, rule, seed)
        }
        "fig2" => {
            let mdp = fig2_mdp();
            let rule: Option<InterventionRule> = match cfg.rule_kind() {
                RuleKind::Fig2 => Some(fig2_rule(&mdp).with_eta(cfg.eta())?),
                RuleKind::Optimal => Some(make_optimal_rule(&mdp, cfg.eta())?),
                _ => None,
            };
            let env = FiniteEnv::new(mdp.clone(), cfg.fig2.max_steps)?;
            match cfg.learner_kind() {
                LearnerKind::QLearning => {
                    let mut learner = TabularQLearner::new(cfg.learner.step_size, cfg.learner.epsilon)?;
                    drive(cfg, &env, &mut learner, rule, seed)
                }
                _ => {
                    let set = rule
                        .as_ref()
                        .map(build_intervention_set)
                        .unwrap_or_else(|| InterventionSet::empty(mdp.num_states(), mdp.num_actions()));
                    let mut learner = TabularViLearner::new(&mdp, &set, cfg.penalty)?;
                    drive(cfg, &env, &mut learner, rule, seed)
                }
            }
        }
        other => Err(CliError::Config(format!("unknown environment id {other:?}"))),
    }
}

fn write_seed_files(dir: &Path, run: &SeedRun) -> Result<()> {
    let path = dir.join(metrics_file_name(run.seed));
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_metrics_csv(std::io::BufWriter::new(file), &run.metrics)?;
    let path = dir.join(diagnostics_file_name(run.seed));
    let mut w = csv::Writer::from_path(&path)?;
    for d in &run.diagnostics {
        w.serialize(d)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// Runs every seed of an already parsed config and writes the output tree.
/// `config_text` is copied verbatim and hashed for provenance.
pub fn train_in_dir(cfg: &ExperimentConfig, config_text: &str, out_dir: &Path, workers: usize) -> Result<TrainReport> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let runs = run_indexed(&cfg.seeds, workers, |&seed| {
        let run = run_seed(cfg, seed)?;
        write_seed_files(out_dir, &run)?;
        Ok(run)
    })?;
    let summary = TrainSummary::from_runs(cfg, &runs);
    let write = |name: &str, text: &str| {
        let path = out_dir.join(name);
        fs::write(&path, text).map_err(io_err(path))
    };
    write(CONFIG_COPY, config_text)?;
    let provenance = Provenance {
        tool: format!("sailr-cli {}", env!("CARGO_PKG_VERSION")),
        config_hash: git_blob_hash(config_text.as_bytes()),
        input_hashes: BTreeMap::from([(CONFIG_COPY.to_string(), git_blob_hash(config_text.as_bytes()))]),
        seeds: cfg.seeds.clone(),
        resolved_config: serde_json::to_value(cfg)?,
    };
    write(crate::provenance::PROVENANCE_FILE, &provenance.to_json())?;
    write(SUMMARY_FILE, &summary.to_json())?;
    Ok(TrainReport {
        out_dir: out_dir.to_path_buf(),
        summary,
        runs,
    })
}

pub fn cmd_train(opts: &TrainOptions) -> Result<TrainReport> {
    let text = fs::read_to_string(&opts.config)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", opts.config.display())))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = opts.seed {
        cfg.seeds = vec![seed];
    }
    let out_dir = opts
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
    train_in_dir(&cfg, &text, &out_dir, opts.workers)
}
