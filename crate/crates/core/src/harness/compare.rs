use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::RunSummary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub mode: String,
    pub final_kl: f64,
    pub tokens_generated: u64,
    pub tokens_scored: u64,
    /// Tokens-scored reduction relative to the first run, in percent.
    pub reduction_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::validation("comparison", e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation("comparison", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Column-aligned text rendering.
    pub fn render(&self) -> String {
        let header = ["run", "mode", "final_kl", "tokens_generated", "tokens_scored", "reduction_%"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.run.clone(),
                    r.mode.clone(),
                    format!("{:.6}", r.final_kl),
                    r.tokens_generated.to_string(),
                    r.tokens_scored.to_string(),
                    format!("{:.2}", r.reduction_pct),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let mut line = |fields: &[&str]| {
            let parts: Vec<String> = fields
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (f, w))| if i < 2 { format!("{f:<w$}") } else { format!("{f:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&header);
        for row in &cells {
            line(&row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Tabulates final KL and token counts; the first run is the reference.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Comparison> {
    if run_dirs.len() < 2 {
        return Err(Error::config("compare needs at least two run directories"));
    }
    let summaries: Vec<(&Path, RunSummary)> = run_dirs
        .iter()
        .map(|d| RunSummary::load(d).map(|s| (d.as_path(), s)))
        .collect::<Result<_>>()?;
    let (first_dir, first) = &summaries[0];
    for (dir, s) in &summaries[1..] {
        if s.scenario != first.scenario {
            return Err(Error::config(format!(
                "{} uses a different scenario from {}",
                dir.display(),
                first_dir.display()
            )));
        }
        if s.seed != first.seed {
            return Err(Error::config(format!(
                "{} uses seed {} but {} uses seed {}",
                dir.display(),
                s.seed,
                first_dir.display(),
                first.seed
            )));
        }
    }
    let base = first.tokens_scored as f64;
    let rows = summaries
        .iter()
        .map(|(dir, s)| ComparisonRow {
            run: dir.display().to_string(),
            mode: serde_json::to_value(s.mode)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            final_kl: s.final_kl,
            tokens_generated: s.tokens_generated,
            tokens_scored: s.tokens_scored,
            reduction_pct: if base > 0.0 { 100.0 * (1.0 - s.tokens_scored as f64 / base) } else { 0.0 },
        })
        .collect();
    Ok(Comparison { rows })
}
