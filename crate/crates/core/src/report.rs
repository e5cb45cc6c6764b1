//! Per-phase evaluation reports: JSON records and the aligned text table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, GlobalChoice};
use crate::config::RunConfig;
use crate::data::Normalization;
use crate::distill::TeacherStrategy;
use crate::error::{Error, Result};
use crate::scheduler::PhaseName;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Accuracy and cost of one swept subnet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetRecord {
    pub choice: GlobalChoice,
    pub accuracy: f64,
    pub params: u64,
    pub macs: u64,
    /// Set on the first record with the phase's best accuracy.
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: PhaseName,
    pub epochs: usize,
    pub iterations: usize,
    pub mean_train_loss: f64,
    pub subnets: Vec<SubnetRecord>,
    pub avg: f64,
    pub best: f64,
    /// Test accuracy of the maximal configuration at full resolution.
    pub maximal_accuracy: f64,
    pub wall_clock_s: f64,
}

impl PhaseReport {
    /// Builds a report from sweep records, marking the best one.
    pub fn new(phase: PhaseName, mut subnets: Vec<SubnetRecord>, maximal_accuracy: f64) -> Result<Self> {
        if subnets.is_empty() {
            return Err(Error::Internal(format!("empty sweep in phase {phase}")));
        }
        let avg = subnets.iter().map(|s| s.accuracy).sum::<f64>() / subnets.len() as f64;
        let best_i = subnets
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if s.accuracy > subnets[b].accuracy { i } else { b });
        for (i, s) in subnets.iter_mut().enumerate() {
            s.best = i == best_i;
        }
        Ok(Self {
            phase,
            epochs: 0,
            iterations: 0,
            mean_train_loss: 0.0,
            best: subnets[best_i].accuracy,
            subnets,
            avg,
            maximal_accuracy,
            wall_clock_s: 0.0,
        })
    }

    pub fn best_record(&self) -> &SubnetRecord {
        self.subnets.iter().find(|s| s.best).unwrap_or(&self.subnets[0])
    }

    /// Copy without wall-clock timing, for comparing runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub network: String,
    pub teacher: TeacherStrategy,
    pub width_multiplier: f64,
    pub arch: ArchSpec,
    pub config: RunConfig,
    pub normalization: Normalization,
    pub phases: Vec<PhaseReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn phase(&self, name: PhaseName) -> Option<&PhaseReport> {
        self.phases.iter().find(|p| p.phase == name)
    }

    /// Writes `report.json` and `table.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        let table = dir.join("table.txt");
        fs::write(&json, self.to_json()?)?;
        fs::write(&table, render_table(std::slice::from_ref(self)))?;
        Ok((json, table))
    }
}

/// Table columns: the full-network step and the last phase of every
/// elastic step.
const COLUMNS: [(&str, PhaseName); 6] = [
    ("RESOLUTION", PhaseName::Full),
    ("KERNEL SIZE", PhaseName::Eks),
    ("LEVEL", PhaseName::El2),
    ("HEIGHT", PhaseName::Eh4),
    ("DEPTH", PhaseName::Ed2),
    ("WIDTH", PhaseName::Ew2),
];

fn cell(r: &RunReport, name: PhaseName) -> (String, String) {
    match r.phase(name) {
        Some(p) => (format!("{:.2}", 100.0 * p.avg), format!("{:.2}", 100.0 * p.best)),
        None if name.applies_to(&r.arch) => ("-".into(), "-".into()),
        None => ("X".into(), "X".into()),
    }
}

/// Aligned text table with one row per run, grouped by network and width,
/// fixed-teacher rows first. Steps a network skips show `X`; steps not yet
/// run show `-`. Accuracies are percentages.
pub fn render_table(runs: &[RunReport]) -> String {
    let mut rows: Vec<&RunReport> = runs.iter().collect();
    rows.sort_by(|a, b| {
        (a.network.as_str(), a.width_multiplier, a.teacher != TeacherStrategy::Fixed)
            .partial_cmp(&(b.network.as_str(), b.width_multiplier, b.teacher != TeacherStrategy::Fixed))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut header = vec!["NETWORK".to_string(), "WIDTH".into(), "TEACHER".into()];
    for (c, _) in COLUMNS {
        header.push(format!("{c} avg"));
        header.push(format!("{c} best"));
    }
    let mut table = vec![header];
    for r in rows {
        let mut row = vec![
            r.network.clone(),
            format!("{:.1}", r.width_multiplier),
            match r.teacher {
                TeacherStrategy::Fixed => "fixed".into(),
                TeacherStrategy::Progressive => "progressive".into(),
            },
        ];
        for (_, p) in COLUMNS {
            let (a, b) = cell(r, p);
            row.push(a);
            row.push(b);
        }
        table.push(row);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|row| row[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, &w))| if j < 3 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
