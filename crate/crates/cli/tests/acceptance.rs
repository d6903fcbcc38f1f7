//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
//! Built with `harness = false` so the lines show in plain `cargo test` output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sailr_cli::toy::{cmd_toy, ToyExample, ToyOptions};
use sailr_cli::train::{metrics_file_name, train_in_dir, SeedRun};
use sailr_cli::verify::{cmd_verify, VerifyOptions, REPORT_FILE};
use sailr_cli::ExperimentConfig;
use sailr_core::absorbing::{build_absorbing, intervention_probability};
use sailr_core::env::random::random_policy;
use sailr_core::env::toy::{fig2_toy, FIG2_ETA};
use sailr_core::mdp::{evaluate_policy, RewardKind, TabularPolicy};
use sailr_core::rules::{build_intervention_set, certify_admissibility, InterventionSet};
use sailr_core::verify::{run_full_suite_with_workers, safer_policy, sweep_instance, SuiteConfig, VerificationReport};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (mdp, rule) = fig2_toy();
    let set = build_intervention_set(&rule);
    let sigma = match certify_admissibility(&mdp, &rule) {
        Ok(r) => r.sigma_min,
        Err(e) => return outcome(false, format!("certification failed: {e}")),
    };
    // state 0 is the start state "1"; its actions 0 and 1 lead to "2" and "3"
    let pairs = set.pairs();
    let targets_ok = mdp.next(0, 0)[1] == 1.0 && mdp.next(0, 1)[2] == 1.0;
    let toy = cmd_toy(&ToyOptions::new(ToyExample::Fig2));
    let toy_ok = toy
        .as_ref()
        .is_ok_and(|r| r.intervention_set == pairs && r.sigma_min == Some(sigma));
    let elapsed = t.elapsed();
    let pass = rule.eta() == FIG2_ETA
        && pairs == vec![(0, 0), (0, 1)]
        && targets_ok
        && close(sigma, 0.2, 1e-12)
        && sigma <= 0.25
        && toy_ok
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "I = {pairs:?}, sigma_min = {sigma}, eta = {}, {elapsed:.2?}",
            rule.eta()
        ),
    )
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let run = |penalty: f64| {
        let mut o = ToyOptions::new(ToyExample::AppendixB);
        o.penalty = Some(penalty);
        cmd_toy(&o)
    };
    let (a, b) = match (run(-0.5), run(-2.0)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("toy failed: {e}")),
    };
    let elapsed = t.elapsed();
    let expected = 1.0 + a.gamma * -0.5;
    let pass = !a.partial
        && close(a.gamma, 0.9, 0.0)
        && close(a.optimal_value, expected, 1e-9)
        && close(expected, 0.55, 1e-12)
        && a.optimal_intervention_probability > 0.0
        && close(b.optimal_value, 0.0, 1e-9)
        && b.optimal_intervention_probability == 0.0
        && elapsed < Duration::from_secs(1);
    outcome(
        pass,
        format!(
            "R~=-0.5: value {} (P_G {}), R~=-2: value {} (P_G {}), {elapsed:.2?}",
            a.optimal_value, a.optimal_intervention_probability, b.optimal_value, b.optimal_intervention_probability
        ),
    )
}

/// Distinct instances and unexpected failures per check name.
fn tally(report: &VerificationReport) -> BTreeMap<&str, (BTreeSet<&str>, usize)> {
    let mut out: BTreeMap<&str, (BTreeSet<&str>, usize)> = BTreeMap::new();
    for c in &report.checks {
        let e = out.entry(c.check_name.as_str()).or_default();
        e.0.insert(c.instance_fingerprint.as_str());
        e.1 += c.is_unexpected() as usize;
    }
    out
}

fn sweep(instances: usize) -> Result<(VerificationReport, Duration), String> {
    let cfg = SuiteConfig {
        instances,
        include_fig2: false,
        include_appendix_b: false,
        ..SuiteConfig::default()
    };
    if cfg.max_safe_states + 2 > 6 || cfg.max_actions > 3 {
        return Err("sweep sizes exceed 6 states or 3 actions".into());
    }
    let t = Instant::now();
    let report = run_full_suite_with_workers(&cfg, workers()).map_err(|e| e.to_string())?;
    Ok((report, t.elapsed()))
}

/// Every named check must cover at least `min` instances without unexpected failures.
fn require(report: &VerificationReport, names: &[&str], min: usize) -> (bool, String) {
    let t = tally(report);
    let mut ok = true;
    let mut parts = Vec::new();
    for name in names {
        let (n, bad) = t.get(name).map_or((0, 0), |(fps, bad)| (fps.len(), *bad));
        ok &= n >= min && bad == 0;
        parts.push(format!("{name} {n}/{bad}"));
    }
    (ok, parts.join(", "))
}

fn criterion_3() -> Outcome {
    match sweep(100) {
        Ok((r, dt)) => {
            let (ok, detail) = require(&r, &["deployment.performance", "deployment.safety"], 100);
            let pass = ok && r.unexpected_failures() == 0 && dt < Duration::from_secs(30);
            outcome(
                pass,
                format!(
                    "instances/unexpected: {detail}; suite unexpected {}; {dt:.2?}",
                    r.unexpected_failures()
                ),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn criterion_4() -> Outcome {
    match sweep(200) {
        Ok((r, dt)) => {
            let (ok, detail) = require(&r, &["shielded.safety", "shielded.baseline_no_worse"], 200);
            outcome(
                ok && dt < Duration::from_secs(30),
                format!("instances/unexpected: {detail}; {dt:.2?}"),
            )
        }
        Err(e) => outcome(false, e),
    }
}

fn criterion_5() -> Outcome {
    let names = [
        "lemma.value_offset.lower",
        "lemma.value_offset.upper",
        "proposition.pessimism",
        "admissibility.baseline",
        "admissibility.baseline_improved",
        "admissibility.improved_backup_no_worse",
        "admissibility.perturbation",
        "admissibility.composite",
        "admissibility.value_iteration.k0",
        "admissibility.value_iteration.k1",
        "admissibility.value_iteration.k2",
        "admissibility.value_iteration.k3",
        "admissibility.value_iteration.k4",
        "admissibility.optimal",
        "partiality",
        "proposition.optimal_policy_not_intervened",
        "lemma.cmdp_equivalence",
    ];
    match sweep(200) {
        Ok((r, dt)) => {
            let (ok, detail) = require(&r, &names, 100);
            outcome(ok && dt < Duration::from_secs(120), format!("{detail}; {dt:.2?}"))
        }
        Err(e) => outcome(false, e),
    }
}

fn d0_value(abs: &sailr_core::absorbing::AbsorbingMdp, pi: &TabularPolicy) -> sailr_core::Result<f64> {
    let v = evaluate_policy(abs, &abs.extend_policy(pi)?, RewardKind::Reward)?;
    Ok(abs.d0().iter().zip(&v.v).map(|(d, v)| d * v).sum())
}

fn criterion_6() -> Outcome {
    let cfg = SuiteConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut strict_cases = 0;
    let mut worst = f64::INFINITY;
    let mut failures = Vec::new();
    for i in 0..100 {
        let mut run = || -> sailr_core::Result<Vec<String>> {
            let inst = sweep_instance(&cfg, i)?;
            let set: InterventionSet = build_intervention_set(&inst.rule);
            let pi = random_policy(inst.mdp.num_states(), inst.mdp.num_actions(), 0.3, &mut rng);
            let pf = safer_policy(&pi, &set)?;
            let pg = intervention_probability(&inst.mdp, &set, &pi)?;
            let mut bad = Vec::new();
            for penalty in [-2.0, -1.0, -0.5, 0.0] {
                let abs = build_absorbing(&inst.mdp, &set, penalty)?;
                let gap = d0_value(&abs, &pf)? - d0_value(&abs, &pi)?;
                worst = worst.min(gap);
                if gap < -1e-9 {
                    bad.push(format!("instance {i} penalty {penalty}: gap {gap}"));
                }
                if penalty < 0.0 && pg > 1e-9 {
                    strict_cases += 1;
                    if gap.is_nan() || gap <= 0.0 || gap < -penalty * pg - 1e-9 {
                        bad.push(format!("instance {i} penalty {penalty}: gap {gap} with P_G {pg}"));
                    }
                }
            }
            if intervention_probability(&inst.mdp, &set, &pf)? > 1e-12 {
                bad.push(format!("instance {i}: pi_f is intervened"));
            }
            Ok(bad)
        };
        match run() {
            Ok(b) => failures.extend(b),
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
        checked += 1;
    }
    outcome(
        failures.is_empty() && checked == 100 && strict_cases > 0,
        format!(
            "{checked} instances, {strict_cases} strict cases, smallest gap {worst:.3e}{}",
            failures
                .first()
                .map_or(String::new(), |f| format!("; first failure: {f}"))
        ),
    )
}

const POINT_BASE: &str = r#"
environment = "point"
penalty = -2.0
seeds = [0, 1, 2]

[budget]
epochs = 100
batch_size = 4000
deploy_episodes = 10

[pdo]
delta = 0.01

[point]
gamma = 0.99

[point.params]
mass = 1.0
v_max = 2.0
a_max = 1.0
dt = 0.1
hinge_alpha = 0.5
"#;

fn point_config(algorithm: &str) -> String {
    let rule = if algorithm == "sailr" {
        "\n[rule]\nkind = \"model_based\"\neta = 0.0\nmodel_mass = 1.0\n"
    } else {
        ""
    };
    format!("algorithm = \"{algorithm}\"\n{POINT_BASE}{rule}")
}

fn train(text: &str, dir: &Path) -> Result<Vec<SeedRun>, String> {
    let cfg = ExperimentConfig::from_toml_str(text).map_err(|e| e.to_string())?;
    train_in_dir(&cfg, text, dir, workers())
        .map(|r| r.runs)
        .map_err(|e| e.to_string())
}

fn window_mean(runs: &[SeedRun], range: std::ops::Range<usize>) -> f64 {
    let vals: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.metrics[range.clone()].iter().map(|m| m.deploy_return_mean))
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn criterion_7(root: &Path) -> Outcome {
    let t = Instant::now();
    let sailr = match train(&point_config("sailr"), &root.join("sailr")) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("SAILR run failed: {e}")),
    };
    let pdo = match train(&point_config("pdo"), &root.join("pdo")) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("PDO run failed: {e}")),
    };
    let total = |runs: &[SeedRun]| {
        runs.iter()
            .map(|r| r.metrics.last().map_or(0, |m| m.cum_violations))
            .sum::<u64>()
    };
    let (vs, vp) = (total(&sailr), total(&pdo));
    let first = window_mean(&sailr, 0..10);
    let last = window_mean(&sailr, 90..100);
    let pass = (vs as f64) <= 0.05 * vp as f64 && last > first;
    outcome(
        pass,
        format!(
            "violations SAILR {vs} vs PDO {vp} (ratio {:.4}); SAILR deploy return first-10 {first:.2} -> final-10 {last:.2}; {:.1?}",
            vs as f64 / (vp as f64).max(1.0),
            t.elapsed()
        ),
    )
}

fn criterion_8(root: &Path) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    // training: a rerun of seed 0 of the full SAILR run, and a short run at two worker counts
    let seed0 = point_config("sailr").replace("seeds = [0, 1, 2]", "seeds = [0]");
    let full_a = root.join("sailr").join(metrics_file_name(0));
    match train(&seed0, &root.join("rerun")) {
        Ok(_) => {
            let same = fs::read(&full_a).ok() == fs::read(root.join("rerun").join(metrics_file_name(0))).ok();
            pass &= same;
            notes.push(format!("100-epoch rerun identical: {same}"));
        }
        Err(e) => {
            pass = false;
            notes.push(format!("rerun failed: {e}"));
        }
    }
    let short = point_config("pdo")
        .replace("epochs = 100", "epochs = 3")
        .replace("batch_size = 4000", "batch_size = 1000");
    let mut texts = Vec::new();
    for (name, w) in [("short1", 1), ("short2", 3)] {
        let dir = root.join(name);
        let res = ExperimentConfig::from_toml_str(&short)
            .map_err(|e| e.to_string())
            .and_then(|cfg| train_in_dir(&cfg, &short, &dir, w).map_err(|e| e.to_string()));
        if let Err(e) = res {
            pass = false;
            notes.push(format!("short run failed: {e}"));
        }
        texts.push(
            (0..3)
                .map(|s| fs::read(dir.join(metrics_file_name(s))).ok())
                .collect::<Vec<_>>(),
        );
    }
    let same = texts[0] == texts[1] && texts[0].iter().all(Option::is_some);
    pass &= same;
    notes.push(format!("worker-count invariant CSVs: {same}"));
    // verification reports
    let mut reports = Vec::new();
    for (name, w) in [("verify1", 1), ("verify2", 4)] {
        let opts = VerifyOptions {
            suite: SuiteConfig {
                include_appendix_b: true,
                ..SuiteConfig::default()
            },
            mdp: None,
            rule: None,
            out: root.join(name),
            workers: w,
        };
        match cmd_verify(&opts) {
            Ok(_) => reports.push(fs::read(root.join(name).join(REPORT_FILE)).ok()),
            Err(e) => {
                pass = false;
                notes.push(format!("verify failed: {e}"));
            }
        }
    }
    let same = reports.len() == 2 && reports[0].is_some() && reports[0] == reports[1];
    pass &= same;
    notes.push(format!("verification reports identical: {same}"));
    outcome(pass, notes.join("; "))
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("four-state example set and sigma", Box::new(criterion_1)),
        ("non-partial counterexample values", Box::new(criterion_2)),
        ("deployment bounds sweep", Box::new(criterion_3)),
        ("shielded safety sweep", Box::new(criterion_4)),
        ("lemma and proposition suite", Box::new(criterion_5)),
        ("safer policy property", Box::new(criterion_6)),
        ("point robot ordering", Box::new(|| criterion_7(root.path()))),
        ("determinism", Box::new(|| criterion_8(root.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        failed += !o.pass as usize;
        println!(
            "criterion {} [{}] {name}: {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
