//! Run reports, derived from the metrics log alone.

use std::fmt::Write as _;
use std::path::Path;

use dlpt_core::train::MetricsRecord;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::MetricsLog;

pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const REPORT_FORMAT: &str = "dlpt-report";
pub const REPORT_VERSION: u32 = 1;
/// Trailing window for smoothed summary values.
pub const WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub digest: String,
    pub steps: usize,
    pub last_step: Option<u64>,
    pub final_loss: Option<f64>,
    pub window_loss: Option<f64>,
    pub first_window_reward: Option<f64>,
    pub window_reward: Option<f64>,
    pub final_heldout_loss: Option<f64>,
    pub final_heldout_margin: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub evals: Vec<EvalPoint>,
    pub total_dropped: u64,
    pub skipped: u64,
}

fn last<F: Fn(&MetricsRecord) -> Option<f64>>(recs: &[MetricsRecord], f: F) -> Option<f64> {
    recs.iter().rev().find_map(f)
}

fn window_mean<F: Fn(&MetricsRecord) -> Option<f64>>(recs: &[MetricsRecord], f: F) -> Option<f64> {
    let xs: Vec<f64> = recs.iter().filter_map(f).collect();
    if xs.is_empty() {
        return None;
    }
    let tail = &xs[xs.len().saturating_sub(WINDOW)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

impl RunReport {
    pub fn from_log(log: &MetricsLog) -> Self {
        let r = &log.records;
        let evals: Vec<EvalPoint> = r
            .iter()
            .filter_map(|x| x.accuracy.map(|accuracy| EvalPoint { step: x.step, accuracy }))
            .collect();
        let head = &r[..r.len().min(WINDOW)];
        Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            command: log.header.command.clone(),
            digest: log.header.digest.clone(),
            steps: r.len(),
            last_step: r.last().map(|x| x.step),
            final_loss: last(r, |x| x.loss),
            window_loss: window_mean(r, |x| x.loss),
            first_window_reward: window_mean(head, |x| x.reward_mean),
            window_reward: window_mean(r, |x| x.reward_mean),
            final_heldout_loss: last(r, |x| x.heldout_loss),
            final_heldout_margin: last(r, |x| x.heldout_margin),
            final_accuracy: evals.last().map(|e| e.accuracy),
            best_accuracy: evals.iter().map(|e| e.accuracy).reduce(f64::max),
            evals,
            total_dropped: r.iter().map(|x| x.dropped).sum(),
            skipped: r.last().map_or(0, |x| x.skipped),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per step; empty cells are nulls.
pub fn curves_csv(log: &MetricsLog) -> String {
    let mut out = String::from(
        "step,epoch,loss,reward_mean,reward_std,est_var,grad_norm,update_norm,margin,heldout_loss,heldout_margin,accuracy\n",
    );
    for r in &log.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch.map(|e| e.to_string()).unwrap_or_default(),
            cell(r.loss),
            cell(r.reward_mean),
            cell(r.reward_std),
            cell(r.est_var),
            cell(r.grad_norm),
            cell(r.update_norm),
            cell(r.margin),
            cell(r.heldout_loss),
            cell(r.heldout_margin),
            cell(r.accuracy),
        );
    }
    out
}

/// Rewrites the report and curve files of a run directory from its log.
pub fn regenerate(dir: &Path) -> Result<RunReport> {
    let log = MetricsLog::read(&dir.join(crate::metrics::METRICS_FILE))?;
    let report = RunReport::from_log(&log);
    std::fs::write(dir.join(REPORT_FILE), report.to_json())?;
    std::fs::write(dir.join(CURVES_FILE), curves_csv(&log))?;
    Ok(report)
}
