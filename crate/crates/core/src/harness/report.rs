//! Comma-separated per-iteration reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::ibrl::IterationReport;

pub const REPORT_HEADER: &str =
    "iteration,true_cost_mean,true_cost_stderr,virtual_cost,diversity,batch_size,epochs,recoveries";

/// One parsed report line.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub iteration: u32,
    pub true_cost_mean: f64,
    pub true_cost_stderr: f64,
    pub virtual_cost: f64,
    pub diversity: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub recoveries: usize,
}

impl From<&IterationReport> for ReportRow {
    fn from(r: &IterationReport) -> Self {
        ReportRow {
            iteration: r.iteration,
            true_cost_mean: r.true_cost_mean,
            true_cost_stderr: r.true_cost_stderr,
            virtual_cost: r.virtual_costs.first().copied().unwrap_or(f64::NAN),
            diversity: r.diversity,
            batch_size: r.batch_size,
            epochs: r.epochs,
            recoveries: r.recoveries,
        }
    }
}

/// Twelve significant digits.
pub fn fmt_num(x: f64) -> String {
    format!("{x:.11e}")
}

impl ReportRow {
    fn line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            fmt_num(self.true_cost_mean),
            fmt_num(self.true_cost_stderr),
            fmt_num(self.virtual_cost),
            fmt_num(self.diversity),
            self.batch_size,
            self.epochs,
            self.recoveries
        )
    }

    fn parse(fields: &[&str]) -> Result<Self> {
        let bad = |what: &str| Error::Report(format!("cannot parse {what} from {fields:?}"));
        if fields.len() != 8 {
            return Err(bad("8 columns"));
        }
        let f = |i: usize, name: &str| fields[i].trim().parse::<f64>().map_err(|_| bad(name));
        let u = |i: usize, name: &str| fields[i].trim().parse::<usize>().map_err(|_| bad(name));
        Ok(ReportRow {
            iteration: fields[0].trim().parse().map_err(|_| bad("iteration"))?,
            true_cost_mean: f(1, "true_cost_mean")?,
            true_cost_stderr: f(2, "true_cost_stderr")?,
            virtual_cost: f(3, "virtual_cost")?,
            diversity: f(4, "diversity")?,
            batch_size: u(5, "batch_size")?,
            epochs: u(6, "epochs")?,
            recoveries: u(7, "recoveries")?,
        })
    }
}

pub fn render_report(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.line());
    }
    out
}

pub fn write_report(reports: &[IterationReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Report("no iterations to write".to_string()));
    }
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    std::fs::write(path, render_report(&rows)).map_err(io_err(path))
}

pub fn parse_report(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Report("missing or unexpected header".to_string()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| ReportRow::parse(&l.split(',').collect::<Vec<_>>()))
        .collect()
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    parse_report(&std::fs::read_to_string(path).map_err(io_err(path))?)
}

/// Concatenates runs under a leading `run_id` column.
pub fn render_merged(runs: &[(String, Vec<ReportRow>)]) -> String {
    let mut out = format!("run_id,{REPORT_HEADER}\n");
    for (id, rows) in runs {
        for r in rows {
            let _ = writeln!(out, "{id},{}", r.line());
        }
    }
    out
}

pub fn write_merged(runs: &[(String, Vec<ReportRow>)], path: &Path) -> Result<()> {
    std::fs::write(path, render_merged(runs)).map_err(io_err(path))
}

pub fn parse_merged(text: &str) -> Result<Vec<(String, ReportRow)>> {
    let mut lines = text.lines();
    if lines.next() != Some(format!("run_id,{REPORT_HEADER}").as_str()) {
        return Err(Error::Report("missing or unexpected merged header".to_string()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            let row = ReportRow::parse(&fields[1..])?;
            Ok((fields[0].to_string(), row))
        })
        .collect()
}
