//! Comparison and sweep reports: structured records, aligned text and CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Mode;
use super::metrics::Cell;
use crate::baseline::MaskCount;
use crate::defense::DefenseConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    /// Defended label equals the undefended prediction on clean images.
    pub clean: Cell,
    /// Defended label equals the true label on clean images.
    pub clean_ground_truth: Cell,
    /// One cell per patch area.
    pub robust: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub area: f64,
    pub patch_side: usize,
    pub offered: usize,
    pub attempted: usize,
    pub succeeded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub masks: usize,
    pub count: MaskCount,
    /// Estimated patch side given to the baseline for each area, then for the clean column.
    pub patch_sides: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: Mode,
    pub areas: Vec<f64>,
    pub rows: Vec<ReportRow>,
    pub attacks: Vec<AttackSummary>,
    pub defense: DefenseConfig,
    pub baseline: BaselineSummary,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
    pub artifacts: BTreeMap<String, String>,
}

fn pct(area: f64) -> String {
    format!("{}%", (area * 1000.0).round() / 10.0)
}

fn cell_text(c: &Cell) -> String {
    format!("{:.3} ({}/{})", c.accuracy, c.correct, c.total)
}

impl EvaluationReport {
    pub fn row(&self, defense: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.defense == defense)
    }

    pub fn to_text(&self) -> String {
        let mut header = vec!["defense".to_string(), "clean".into(), "clean (truth)".into()];
        header.extend(self.areas.iter().map(|a| format!("robust@{}", pct(*a))));
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.defense.clone(), cell_text(&r.clean), cell_text(&r.clean_ground_truth)];
            line.extend(r.robust.iter().map(cell_text));
            lines.push(line);
        }
        let mut out = table(&lines);
        let _ = writeln!(
            out,
            "\nm = {}, n = {}%, mode = {}",
            self.defense.m, self.defense.n_percent, self.mode
        );
        for a in &self.attacks {
            let _ = writeln!(
                out,
                "attack {}: side {} px, {}/{} succeeded ({} offered)",
                pct(a.area),
                a.patch_side,
                a.succeeded,
                a.attempted,
                a.offered
            );
        }
        let _ = writeln!(out, "config {}\ncorpus {}", self.config_fingerprint, self.corpus_fingerprint);
        out
    }
}

fn table(lines: &[Vec<String>]) -> String {
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for l in lines {
        let cells: Vec<String> = l
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    NPercent,
    M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: f64,
    pub clean: Cell,
    pub robust: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    /// The other hyperparameter's fixed value.
    pub fixed: f64,
    pub areas: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub config_fingerprint: String,
}

impl SweepReport {
    pub fn row(&self, setting: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let name = match self.axis {
            SweepAxis::NPercent => "n_percent",
            SweepAxis::M => "m",
        };
        let mut out = format!("{name},clean");
        for a in &self.areas {
            let _ = write!(out, ",{}", pct(*a));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{:.4}", r.setting, r.clean.accuracy);
            for c in &r.robust {
                let _ = write!(out, ",{:.4}", c.accuracy);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let (name, fixed) = match self.axis {
            SweepAxis::NPercent => ("n%", format!("m = {}", self.fixed)),
            SweepAxis::M => ("m", format!("n = {}%", self.fixed)),
        };
        let mut header = vec![name.to_string(), "clean".into()];
        header.extend(self.areas.iter().map(|a| pct(*a)));
        let mut lines = vec![header];
        for r in &self.rows {
            let mut line = vec![r.setting.to_string(), format!("{:.3}", r.clean.accuracy)];
            line.extend(r.robust.iter().map(|c| format!("{:.3}", c.accuracy)));
            lines.push(line);
        }
        format!("{}\n{fixed}\n", table(&lines))
    }
}
