//! Metrics CSV in the fixed column order
//! `epoch,seed,deploy_return_mean,deploy_len_mean,cum_violations,cum_interventions`.

use std::io::{Read, Write};

use crate::error::{LearnError, Result};
use crate::sailr::MetricsRecord;

pub const METRICS_HEADER: [&str; 6] = [
    "epoch",
    "seed",
    "deploy_return_mean",
    "deploy_len_mean",
    "cum_violations",
    "cum_interventions",
];

/// Writes the header even when there are no rows.
pub fn write_metrics_csv(writer: impl Write, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records)?;
    String::from_utf8(buf).map_err(|e| LearnError::Environment(e.to_string()))
}

pub fn read_metrics_csv(reader: impl Read) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(LearnError::Config(format!("unexpected metrics header {header:?}")));
    }
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Cumulative counters never decrease.
pub fn counters_monotone(records: &[MetricsRecord]) -> bool {
    records
        .windows(2)
        .all(|w| w[1].cum_violations >= w[0].cum_violations && w[1].cum_interventions >= w[0].cum_interventions)
}
