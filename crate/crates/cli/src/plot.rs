//! `plot-data`: merges per-seed metrics CSVs into long-format rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use sailr_learn::{read_metrics_csv, MetricsRecord};

use crate::error::{io_err, CliError, Result};
use crate::provenance::{Provenance, PROVENANCE_FILE};

pub const PLOT_HEADER: [&str; 4] = ["metric", "epoch", "seed", "value"];
pub const PLOT_FILE: &str = "plot_data.csv";

type Column = (&'static str, fn(&MetricsRecord) -> f64);

const METRICS: [Column; 4] = [
    ("deploy_return_mean", |m| m.deploy_return_mean),
    ("deploy_len_mean", |m| m.deploy_len_mean),
    ("cum_violations", |m| m.cum_violations as f64),
    ("cum_interventions", |m| m.cum_interventions as f64),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotReport {
    pub out: PathBuf,
    pub files: usize,
    pub rows: usize,
}

fn is_metrics_file(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("metrics_seed") && n.ends_with(".csv"))
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(dir))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else if is_metrics_file(&p) {
            out.push(p);
        }
    }
    Ok(())
}

fn config_hash(dir: &Path) -> Result<Option<String>> {
    let path = dir.join(PROVENANCE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let p: Provenance =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(p.config_hash))
}

/// Reads every `metrics_seed*.csv` under `dir`. All files must come from one
/// configuration and carry distinct seeds.
pub fn load_metrics(dir: &Path) -> Result<Vec<(PathBuf, Vec<MetricsRecord>)>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut files = Vec::new();
    collect(dir, &mut files)?;
    let mut hashes: BTreeMap<Option<String>, PathBuf> = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    let mut out = Vec::new();
    for f in files {
        let parent = f.parent().expect("files live in a directory");
        hashes
            .entry(config_hash(parent)?)
            .or_insert_with(|| parent.to_path_buf());
        if hashes.len() > 1 {
            let dirs: Vec<String> = hashes.values().map(|p| p.display().to_string()).collect();
            return Err(CliError::Mixed(dirs.join(", ")));
        }
        let file = fs::File::open(&f).map_err(io_err(&f))?;
        let records = read_metrics_csv(file).map_err(|e| CliError::Config(format!("{}: {e}", f.display())))?;
        for r in &records {
            seeds.insert(r.seed);
        }
        let distinct: BTreeSet<u64> = records.iter().map(|r| r.seed).collect();
        if distinct.len() > 1 {
            return Err(CliError::Mixed(format!("{} holds several seeds", f.display())));
        }
        out.push((f, records));
    }
    let with_rows = out.iter().filter(|(_, r)| !r.is_empty()).count();
    if seeds.len() != with_rows {
        return Err(CliError::Mixed("a seed appears in more than one metrics file".into()));
    }
    Ok(out)
}

/// Long-format CSV text for the metrics under `dir`.
pub fn plot_data_string(dir: &Path) -> Result<(String, usize, usize)> {
    let files = load_metrics(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PLOT_HEADER)?;
    let mut rows = 0;
    for (_, records) in &files {
        for r in records {
            for (name, f) in METRICS {
                w.write_record([
                    name.to_string(),
                    r.epoch.to_string(),
                    r.seed.to_string(),
                    f(r).to_string(),
                ])?;
                rows += 1;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        source: e.into_error(),
    })?;
    Ok((
        String::from_utf8(bytes).expect("csv output is utf-8"),
        files.len(),
        rows,
    ))
}

/// Writes the merged rows to `out`, or to `plot_data.csv` inside `dir`.
pub fn cmd_plot_data(dir: &Path, out: Option<&Path>) -> Result<PlotReport> {
    let (text, files, rows) = plot_data_string(dir)?;
    let out = out.map_or_else(|| dir.join(PLOT_FILE), Path::to_path_buf);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&out, text).map_err(io_err(&out))?;
    Ok(PlotReport { out, files, rows })
}
