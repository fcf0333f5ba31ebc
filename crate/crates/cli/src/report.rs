//! Metrics files and the summary table.
//!
//! The metrics CSV holds one row per (run, round, domain). Floats use the
//! shortest representation that parses back to the same value, so files
//! compare byte-for-byte across reruns.

use std::fmt::Write as _;
use std::path::Path;

use mode_core::engine::Method;
use mode_core::metrics::{avg_acc, bwt, delta, RoundMetrics};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const CSV_HEADER: &str = "run_id,round,domain,accuracy,mean,delta,avg_acc,bwt,param_count";

/// Everything one adaptation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: Method,
    pub seed: u64,
    pub domains: Vec<String>,
    /// `a[k][j]`: accuracy on domain `j` after round `k`.
    pub a: Vec<Vec<f64>>,
    /// Accuracy on domain `j` right after its first task window.
    pub a_tilde: Vec<f64>,
    pub mean: Vec<f64>,
    pub delta: Option<f64>,
    pub avg_acc: Vec<f64>,
    pub bwt: Vec<f64>,
    pub param_count: usize,
    /// `[layer][router domain][expert]`.
    pub expert_freq: Vec<Vec<Vec<f64>>>,
}

impl RunSummary {
    pub fn new(run_id: String, method: Method, seed: u64, domains: Vec<String>, m: &RoundMetrics) -> Result<Self> {
        let rounds = m.a.len();
        Ok(Self {
            run_id,
            method,
            seed,
            domains,
            mean: m.a.iter().map(|r| mean(r)).collect(),
            delta: if rounds >= 2 { Some(m.delta()?) } else { None },
            avg_acc: (0..rounds).map(|k| m.avg_acc(k)).collect::<std::result::Result<_, _>>()?,
            bwt: (0..rounds).map(|k| m.bwt(k)).collect::<std::result::Result<_, _>>()?,
            a: m.a.clone(),
            a_tilde: m.a_tilde.clone(),
            param_count: m.param_count,
            expert_freq: m.expert_freq.clone(),
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn metrics_csv(runs: &[RunSummary]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in runs {
        let delta = r.delta.map(|d| d.to_string()).unwrap_or_default();
        for (k, row) in r.a.iter().enumerate() {
            for (j, acc) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    r.run_id,
                    k + 1,
                    r.domains[j],
                    acc,
                    r.mean[k],
                    delta,
                    r.avg_acc[k],
                    r.bwt[k],
                    r.param_count
                );
            }
        }
    }
    s
}

pub fn summary_json(runs: &[RunSummary]) -> Result<String> {
    let mut s = serde_json::to_string_pretty(runs).map_err(|e| CliError::Data(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// One `D x N` selection-frequency table as CSV.
pub fn expert_csv(freq: &[Vec<f64>]) -> String {
    let n = freq.first().map_or(0, |r| r.len());
    let mut s = String::from("domain");
    for i in 0..n {
        let _ = write!(s, ",expert{i}");
    }
    s.push('\n');
    for (d, row) in freq.iter().enumerate() {
        let _ = write!(s, "{d}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// A run as read back for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRun {
    pub run_id: String,
    pub domains: Vec<String>,
    pub a: Vec<Vec<f64>>,
    /// BWT per round: recomputed when `a_tilde` is known, else as stored.
    pub bwt: Vec<f64>,
    pub param_count: usize,
}

impl ReportRun {
    pub fn mean(&self, k: usize) -> f64 {
        mean(&self.a[k])
    }

    pub fn avg_acc(&self, k: usize) -> f64 {
        avg_acc(&self.a, k).expect("round in range")
    }

    pub fn delta(&self) -> Option<f64> {
        delta(&self.a).ok()
    }
}

/// Reads a summary JSON (`.json`) or metrics CSV (anything else).
pub fn load_runs(path: &Path) -> Result<Vec<ReportRun>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let runs = if path.extension().is_some_and(|e| e == "json") {
        let summaries: Vec<RunSummary> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        summaries
            .into_iter()
            .map(|s| {
                let bwt = (0..s.a.len()).map(|k| bwt(&s.a, &s.a_tilde, k)).collect::<std::result::Result<_, _>>()?;
                Ok(ReportRun { run_id: s.run_id, domains: s.domains, a: s.a, bwt, param_count: s.param_count })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        parse_csv(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    };
    if runs.is_empty() {
        return Err(CliError::Data(format!("{}: no runs", path.display())));
    }
    Ok(runs)
}

fn parse_csv(text: &str) -> std::result::Result<Vec<ReportRun>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing or unexpected header".into());
    }
    let mut runs: Vec<ReportRun> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(format!("line {}: expected 9 fields", i + 2));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| format!("line {}: bad number {s:?}", i + 2));
        let int = |s: &str| s.parse::<usize>().map_err(|_| format!("line {}: bad integer {s:?}", i + 2));
        let (round, acc, bwt, params) = (int(f[1])?, num(f[3])?, num(f[7])?, int(f[8])?);
        if round == 0 {
            return Err(format!("line {}: rounds are 1-based", i + 2));
        }
        if runs.last().is_none_or(|r| r.run_id != f[0]) {
            if runs.iter().any(|r| r.run_id == f[0]) {
                return Err(format!("line {}: rows of run {} are not contiguous", i + 2, f[0]));
            }
            runs.push(ReportRun { run_id: f[0].into(), domains: vec![], a: vec![], bwt: vec![], param_count: params });
        }
        let run = runs.last_mut().expect("pushed above");
        if round == run.a.len() + 1 {
            run.a.push(Vec::new());
            run.bwt.push(bwt);
        } else if round != run.a.len() {
            return Err(format!("line {}: round {} out of order", i + 2, round));
        }
        if round == 1 {
            run.domains.push(f[2].into());
        } else if run.domains.get(run.a[round - 1].len()).map(String::as_str) != Some(f[2]) {
            return Err(format!("line {}: domain {} out of order", i + 2, f[2]));
        }
        run.a[round - 1].push(acc);
    }
    for r in &runs {
        if r.a.iter().any(|row| row.len() != r.domains.len()) {
            return Err(format!("run {} has ragged rounds", r.run_id));
        }
    }
    Ok(runs)
}

fn cell(v: f64) -> String {
    format!("{v:>8.4}")
}

fn header(out: &mut String, domains: &[String]) {
    let _ = write!(out, "{:<8}", "round");
    for d in domains {
        let _ = write!(out, "{:>8}", truncate(d));
    }
    let _ = writeln!(out, "{:>8}{:>8}{:>8}{:>8}", "Mean", "Delta", "AvgAcc", "BWT");
}

fn truncate(s: &str) -> &str {
    &s[..s.len().min(7)]
}

/// Round 1 and round M of each run with Mean, Delta, AvgAcc and BWT.
pub fn render_table(runs: &[ReportRun]) -> String {
    let mut out = String::new();
    for r in runs {
        let _ = writeln!(out, "run {}  params {}", r.run_id, r.param_count);
        header(&mut out, &r.domains);
        let last = r.a.len() - 1;
        let shown: Vec<usize> = if last == 0 { vec![0] } else { vec![0, last] };
        for k in shown {
            let _ = write!(out, "{:<8}", k + 1);
            for v in &r.a[k] {
                out.push_str(&cell(*v));
            }
            out.push_str(&cell(r.mean(k)));
            match (k, r.delta()) {
                (k, Some(d)) if k == last => out.push_str(&cell(d)),
                _ => { let _ = write!(out, "{:>8}", "-"); }
            }
            out.push_str(&cell(r.avg_acc(k)));
            out.push_str(&cell(r.bwt[k]));
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Per-cell differences `b - a` of runs paired in file order.
pub fn render_compare(a: &[ReportRun], b: &[ReportRun]) -> Result<String> {
    if a.len() != b.len() {
        return Err(CliError::Data(format!("cannot compare {} runs with {}", a.len(), b.len())));
    }
    let mut out = String::new();
    for (x, y) in a.iter().zip(b) {
        if x.domains != y.domains || x.a.len() != y.a.len() {
            return Err(CliError::Data(format!("runs {} and {} differ in shape", x.run_id, y.run_id)));
        }
        let _ = writeln!(out, "{} -> {}  params {:+}", x.run_id, y.run_id, y.param_count as i64 - x.param_count as i64);
        header(&mut out, &x.domains);
        let last = x.a.len() - 1;
        let shown: Vec<usize> = if last == 0 { vec![0] } else { vec![0, last] };
        for k in shown {
            let _ = write!(out, "{:<8}", k + 1);
            for (p, q) in x.a[k].iter().zip(&y.a[k]) {
                out.push_str(&cell(q - p));
            }
            out.push_str(&cell(y.mean(k) - x.mean(k)));
            match (x.delta(), y.delta()) {
                (Some(p), Some(q)) if k == last => out.push_str(&cell(q - p)),
                _ => { let _ = write!(out, "{:>8}", "-"); }
            }
            out.push_str(&cell(y.avg_acc(k) - x.avg_acc(k)));
            out.push_str(&cell(y.bwt[k] - x.bwt[k]));
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}
