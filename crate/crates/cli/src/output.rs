//! Atomic file writes, the retrieval CSV and rendered tables.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use dualtune_core::scenario::{CellOutcome, ExperimentRow};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub const CSV_HEADER: [&str; 9] = [
    "scenario",
    "test_mode",
    "old_fraction",
    "mAP",
    "top1",
    "top5",
    "num_queries",
    "num_excluded",
    "seed",
];

/// One line per row under the fixed header; an empty slice gives the header alone.
pub fn rows_to_csv(rows: &[ExperimentRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Output(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let rep = &r.report;
        w.write_record([
            r.scenario.clone(),
            rep.test_mode.clone(),
            rep.old_fraction.map(|f| f.to_string()).unwrap_or_default(),
            rep.map.to_string(),
            rep.top1.to_string(),
            rep.top5.to_string(),
            rep.num_queries.to_string(),
            rep.num_excluded.to_string(),
            r.seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Output(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Output(e.to_string()))
}

fn column_label(r: &ExperimentRow) -> String {
    match r.report.old_fraction {
        Some(f) => format!("{}@{f}", r.report.test_mode),
        None => r.report.test_mode.clone(),
    }
}

/// Cells as table rows, one `mAP Top-1 Top-5` group per test mode (cross and
/// self first), values in percent. Failed cells show `-` with their error.
pub fn render_table(title: &str, cells: &[CellOutcome]) -> String {
    let mut columns: Vec<String> = Vec::new();
    let mut lines: Vec<(String, Vec<(String, &ExperimentRow)>)> = Vec::new();
    for cell in cells {
        for r in &cell.rows {
            let col = column_label(r);
            if !columns.contains(&col) {
                columns.push(col.clone());
            }
            match lines.iter_mut().find(|(s, _)| *s == r.scenario) {
                Some((_, v)) => v.push((col, r)),
                None => lines.push((r.scenario.clone(), vec![(col, r)])),
            }
        }
    }
    let rank = |c: &String| ["cross", "self"].iter().position(|m| m == c).unwrap_or(2);
    columns.sort_by_key(rank);
    let name_w = lines
        .iter()
        .map(|(s, _)| s.len())
        .chain(cells.iter().map(|c| c.cell.len()))
        .chain([6])
        .max()
        .unwrap_or(6);
    let group_w = 22;
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:name_w$}", "Method");
    for c in &columns {
        let _ = write!(out, " | {c:^group_w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:name_w$}", "");
    for _ in &columns {
        let _ = write!(out, " | {:>6} {:>7} {:>7}", "mAP", "Top-1", "Top-5");
    }
    out.push('\n');
    let rule = name_w + columns.len() * (group_w + 3);
    let _ = writeln!(out, "{}", "-".repeat(rule));
    for (scenario, entries) in &lines {
        let _ = write!(out, "{scenario:name_w$}");
        for c in &columns {
            match entries.iter().find(|(col, _)| col == c) {
                Some((_, r)) => {
                    let rep = &r.report;
                    let _ = write!(
                        out,
                        " | {:>6.2} {:>7.2} {:>7.2}",
                        100.0 * rep.map,
                        100.0 * rep.top1,
                        100.0 * rep.top5
                    );
                }
                None => {
                    let _ = write!(out, " | {:>6} {:>7} {:>7}", "", "", "");
                }
            }
        }
        out.push('\n');
    }
    for cell in cells.iter().filter(|c| c.error.is_some()) {
        let _ = writeln!(
            out,
            "{:name_w$} | - ({})",
            cell.cell,
            cell.error.as_deref().unwrap_or("")
        );
    }
    out
}
