//! `verify`: runs the bound verifier and writes `verification_report.json`.

use std::fs;
use std::path::{Path, PathBuf};

use sailr_core::mdp::FiniteMdp;
use sailr_core::rules::{make_optimal_rule, InterventionRule};
use sailr_core::verify::{run_full_suite_with_workers, verify_instance, SuiteConfig, VerificationReport};

use crate::error::{io_err, CliError, Result, EXIT_FAILURE, EXIT_OK};

pub const REPORT_FILE: &str = "verification_report.json";

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub suite: SuiteConfig,
    /// Check one instance from disk instead of the random corpus.
    pub mdp: Option<PathBuf>,
    /// Rule for `mdp`; without it the optimal-cost rule is used.
    pub rule: Option<PathBuf>,
    pub out: PathBuf,
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub report_path: PathBuf,
    pub report: VerificationReport,
}

impl VerifyOutcome {
    pub fn exit_code(&self) -> u8 {
        if self.report.unexpected_failures() == 0 {
            EXIT_OK
        } else {
            EXIT_FAILURE
        }
    }

    pub fn summary_line(&self) -> String {
        let s = &self.report.summary;
        format!(
            "{} checks over {} instances: {} passed, {} expected failures, {} unexpected failures, {} skipped",
            s.total, s.instances, s.passed, s.expected_failures, s.unexpected_failures, s.skipped
        )
    }
}

fn load_mdp(path: &Path) -> Result<FiniteMdp> {
    FiniteMdp::load(path).map_err(|source| CliError::Input {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_verify(opts: &VerifyOptions) -> Result<VerifyOutcome> {
    let report = match (&opts.mdp, &opts.rule) {
        (None, Some(_)) => return Err(CliError::Usage("--rule needs --mdp".into())),
        (Some(mdp_path), rule_path) => {
            let mdp = load_mdp(mdp_path)?;
            let rule = match rule_path {
                Some(p) => InterventionRule::load(&mdp, p).map_err(|source| CliError::Input {
                    path: p.clone(),
                    source,
                })?,
                None => make_optimal_rule(&mdp, 0.0)?,
            };
            verify_instance(&mdp, &rule, opts.suite.seed, &mdp_path.display().to_string())?
        }
        (None, None) => run_full_suite_with_workers(&opts.suite, opts.workers)?,
    };
    fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    let report_path = opts.out.join(REPORT_FILE);
    fs::write(&report_path, report.to_json()).map_err(io_err(&report_path))?;
    Ok(VerifyOutcome { report_path, report })
}
