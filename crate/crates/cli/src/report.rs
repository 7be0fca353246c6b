//! Consolidated results table across run directories.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use flipflop_core::datagen::Task;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::manifest::{write_atomic, RunManifest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub seed: u64,
    /// Epoch count, with a marker when the cap was hit without converging.
    pub epochs: String,
    pub train_acc: Option<f64>,
    pub id_acc: Option<f64>,
    pub ood_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
    /// Run directories whose manifest could not be read.
    pub missing: Vec<PathBuf>,
}

fn variant_name(m: &RunManifest) -> String {
    let task = match m.config.task {
        Task::Standard => "Standard Flip-Flop",
        Task::Undo => "UNDO Flip-Flop",
    };
    let layers = match m.config.model.n_layers {
        1 => "One-Layer".to_string(),
        2 => "Two-Layer".to_string(),
        n => format!("{n}-Layer"),
    };
    format!("{task}, {layers}")
}

fn metric(m: &RunManifest, section: &str, key: &str) -> Option<serde_json::Value> {
    m.metrics.get(section)?.get(key).cloned()
}

fn row(m: &RunManifest) -> ReportRow {
    let num = |s, k| metric(m, s, k).and_then(|v| v.as_f64());
    let epochs = match (metric(m, "train", "epochs").and_then(|v| v.as_u64()), metric(m, "train", "converged")) {
        (Some(e), Some(serde_json::Value::Bool(true))) => e.to_string(),
        (Some(e), _) => format!("{e} (max)"),
        (None, _) => "-".into(),
    };
    ReportRow {
        variant: variant_name(m),
        seed: m.config.seed,
        epochs,
        train_acc: num("eval", "train_exact_match"),
        id_acc: num("eval", "id_exact_match"),
        ood_acc: num("eval", "ood_exact_match"),
    }
}

/// Reads each run's manifest. Unreadable runs are listed in `missing` and
/// the table is built from the rest.
pub fn collect(run_dirs: &[PathBuf]) -> ReportTable {
    let mut table = ReportTable::default();
    for dir in run_dirs {
        match RunManifest::load(dir) {
            Ok(m) => table.rows.push(row(&m)),
            Err(_) => table.missing.push(dir.clone()),
        }
    }
    table
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x))
}

impl ReportTable {
    /// A seed column is added when the rows do not share one seed.
    pub fn show_seed(&self) -> bool {
        self.rows.iter().map(|r| r.seed).collect::<BTreeSet<_>>().len() > 1
    }

    fn header(&self) -> Vec<&'static str> {
        let mut h = vec!["Variant"];
        if self.show_seed() {
            h.push("Seed");
        }
        h.extend(["Epochs", "Train Acc (%)", "ID Acc (%)", "OOD Acc (%)"]);
        h
    }

    fn cells(&self, r: &ReportRow) -> Vec<String> {
        let mut c = vec![r.variant.clone()];
        if self.show_seed() {
            c.push(r.seed.to_string());
        }
        c.extend([r.epochs.clone(), pct(r.train_acc), pct(r.id_acc), pct(r.ood_acc)]);
        c
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n", header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", self.cells(r).join(" | ")));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let quote = |s: &str| if s.contains([',', '"']) { format!("\"{}\"", s.replace('"', "\"\"")) } else { s.to_string() };
        let mut out = self.header().iter().map(|h| quote(h)).collect::<Vec<_>>().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&self.cells(r).iter().map(|c| quote(c)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    /// `(variant, [ID, OOD])` for the comparison chart.
    pub fn generalisation_groups(&self) -> Vec<(String, Vec<f64>)> {
        self.rows
            .iter()
            .filter_map(|r| Some((r.variant.clone(), vec![r.id_acc?, r.ood_acc?])))
            .collect()
    }
}

pub fn is_run_dir(p: &Path) -> bool {
    p.join(crate::manifest::MANIFEST_FILE).exists()
}

/// Expands each argument that is not itself a run directory into the run
/// directories directly beneath it.
pub fn expand_run_dirs(args: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for a in args {
        if is_run_dir(a) || !a.is_dir() {
            out.push(a.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(a)
            .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| is_run_dir(p)).collect())
            .unwrap_or_default();
        children.sort();
        if children.is_empty() {
            out.push(a.clone());
        }
        out.extend(children);
    }
    out
}

/// Builds the table and, when `out` is given, writes `report.md`,
/// `report.csv` and a comparison chart there.
pub fn cmd_report(run_dirs: &[PathBuf], out: Option<&Path>) -> Result<ReportTable, CliError> {
    let table = collect(&expand_run_dirs(run_dirs));
    for m in &table.missing {
        log::warn!("no readable manifest in {}", m.display());
    }
    if table.rows.is_empty() {
        log::warn!("no completed runs; emitting header only");
    }
    if let Some(dir) = out {
        write_atomic(&dir.join("report.md"), table.to_markdown().as_bytes())?;
        write_atomic(&dir.join("report.csv"), table.to_csv().as_bytes())?;
        let svg = crate::plot::grouped_bars(
            "ID vs OOD exact match by variant",
            "exact match",
            &["ID", "OOD"],
            &table.generalisation_groups(),
        );
        write_atomic(&dir.join("generalisation.svg"), svg.as_bytes())?;
    }
    Ok(table)
}
