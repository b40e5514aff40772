//! Artifact writers: atomic file output, the key/value summary record, and
//! CSV / aligned-text renderings of comparison tables, arc partitions,
//! turnpike sweeps and adjoint trajectories.
//!
//! Every float goes through one exponential formatter and no writer embeds
//! timestamps or other run-local state, so repeated runs of the same
//! configuration produce byte-identical artifacts.

use crate::analysis::{ArcKind, ArcPartition, ComparisonTable, TurnpikeReport};
use crate::integrate::{fmt, TimeGrid, Trajectory};
use std::fs;
use std::io::{self, Write as _};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("line {line} is not `key = value`: `{text}`")]
    Record { line: usize, text: String },
    #[error("csv cell ({row}, {col}) is not a number: `{text}`")]
    Cell {
        row: usize,
        col: usize,
        text: String,
    },
    #[error("csv row {row} has {got} cells, header has {need}")]
    Ragged { row: usize, got: usize, need: usize },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Write `content` through a uniquely named sibling temp file and an atomic
/// rename, so concurrent scenario entries and interrupted runs never leave a
/// half-written artifact behind.
pub fn write_atomic(path: &Path, content: &str) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(content.as_bytes())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Ordered key/value record, rendered one `key = value` per line. The
/// summary format of solver runs: keys snake_case, float values in the
/// shared exponential form, text values verbatim (single line).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Record {
    lines: Vec<(String, String)>,
}

impl Record {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn text(&mut self, key: &str, value: &str) -> &mut Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    pub fn float(&mut self, key: &str, value: f64) -> &mut Self {
        self.text(key, &fmt(value))
    }

    pub fn count(&mut self, key: &str, value: usize) -> &mut Self {
        self.text(key, &value.to_string())
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_float(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Parse a rendered [`Record`]; blank lines are skipped, everything else
/// must split on the first ` = `.
pub fn parse_record(doc: &str) -> Result<Record, ReportError> {
    let mut rec = Record::new();
    for (idx, line) in doc.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(" = ").ok_or_else(|| ReportError::Record {
            line: idx + 1,
            text: line.to_string(),
        })?;
        rec.text(k, v);
    }
    Ok(rec)
}

/// Parse a numeric CSV produced by this crate: header names plus row-major
/// float data. Rejects ragged rows and non-numeric cells.
pub fn parse_csv(doc: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), ReportError> {
    let mut lines = doc.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (r, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(header.len());
        for (c, cell) in line.split(',').enumerate() {
            row.push(cell.parse::<f64>().map_err(|_| ReportError::Cell {
                row: r + 1,
                col: c,
                text: cell.to_string(),
            })?);
        }
        if row.len() != header.len() {
            return Err(ReportError::Ragged {
                row: r + 1,
                got: row.len(),
                need: header.len(),
            });
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Comparison table as CSV, energies in Joules.
pub fn comparison_csv(table: &ComparisonTable) -> String {
    let mut out = String::from("formulation,withdrawn,dissipated,remaining,initial\n");
    for row in &table.rows {
        out.push_str(&row.label);
        for v in [row.withdrawn, row.dissipated, row.remaining, row.initial] {
            out.push(',');
            out.push_str(&fmt(v));
        }
        out.push('\n');
    }
    out
}

/// Aligned plain-text rendering of the comparison table, six significant
/// digits per energy.
pub fn comparison_text(table: &ComparisonTable) -> String {
    const COLS: [&str; 4] = [
        "withdrawn [J]",
        "dissipated [J]",
        "remaining [J]",
        "initial [J]",
    ];
    let label_w = table
        .rows
        .iter()
        .map(|r| r.label.len())
        .chain(["formulation".len()])
        .max()
        .unwrap();
    let mut out = format!("{:<label_w$}", "formulation");
    for c in COLS {
        out.push_str(&format!("  {c:>15}"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<label_w$}", row.label));
        for v in [row.withdrawn, row.dissipated, row.remaining, row.initial] {
            out.push_str(&format!("  {:>15}", format!("{v:.6e}")));
        }
        out.push('\n');
    }
    out
}

pub fn arc_kind_name(kind: ArcKind) -> &'static str {
    match kind {
        ArcKind::Singular => "singular",
        ArcKind::LowerBound => "lower-bound",
        ArcKind::UpperBound => "upper-bound",
        ArcKind::Transition => "transition",
    }
}

/// Per-interval arc data: midpoint time, switching components, consolidated
/// labels. One row per interval.
pub fn arcs_csv(partition: &ArcPartition, grid: TimeGrid) -> String {
    let m = partition.switching.first().map_or(0, |s| s.len());
    let mut out = String::from("t");
    for i in 0..m {
        out.push_str(&format!(",s{i}"));
    }
    for i in 0..m {
        out.push_str(&format!(",label{i}"));
    }
    out.push('\n');
    for (k, s) in partition.switching.iter().enumerate() {
        out.push_str(&fmt(grid.midpoint(k)));
        for i in 0..m {
            out.push(',');
            out.push_str(&fmt(s[i]));
        }
        for i in 0..m {
            out.push(',');
            out.push_str(arc_kind_name(partition.labels[k][i]));
        }
        out.push('\n');
    }
    out
}

/// Maximal same-label runs: channel, kind, interval span, time span.
pub fn arc_spans_csv(partition: &ArcPartition, grid: TimeGrid) -> String {
    let mut out = String::from("channel,kind,start,end,t_start,t_end\n");
    for a in &partition.arcs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            a.channel,
            arc_kind_name(a.kind),
            a.start,
            a.end,
            fmt(grid.point(a.start)),
            fmt(grid.point(a.end)),
        ));
    }
    out
}

/// Per-horizon turnpike metrics, one row per horizon (ascending).
pub fn turnpike_csv(report: &TurnpikeReport) -> String {
    let mut out = String::from(
        "horizon,state_integral,control_integral,combined_integral,\
         subspace_integral,envelope_amplitude,envelope_rate\n",
    );
    for h in &report.per_horizon {
        for (idx, v) in [
            h.horizon,
            h.state_integral,
            h.control_integral,
            h.combined_integral,
            h.subspace_integral,
            h.envelope_amplitude,
            h.envelope_rate,
        ]
        .into_iter()
        .enumerate()
        {
            if idx > 0 {
                out.push(',');
            }
            out.push_str(&fmt(v));
        }
        out.push('\n');
    }
    out
}

/// Scalar turnpike verdicts as a key/value record.
pub fn turnpike_text(report: &TurnpikeReport) -> String {
    let mut rec = Record::new();
    rec.count("horizons", report.per_horizon.len());
    rec.count("subspace_dimension", report.subspace_dimension);
    rec.float("plateau_variation", report.plateau_variation);
    rec.float("top_pair_variation", report.top_pair_variation);
    if let Some(last) = report.per_horizon.last() {
        rec.float("largest_horizon", last.horizon);
        rec.float("largest_combined_integral", last.combined_integral);
    }
    rec.render()
}

/// Grid adjoints as CSV; `None` when the trajectory carries none.
pub fn adjoints_csv(traj: &Trajectory) -> Option<String> {
    let lam = traj.adjoints.as_ref()?;
    let n = lam.first().map_or(0, |l| l.len());
    let mut out = String::from("t");
    for i in 0..n {
        out.push_str(&format!(",lambda{i}"));
    }
    out.push('\n');
    for (k, l) in lam.iter().enumerate() {
        out.push_str(&fmt(traj.grid.point(k)));
        for i in 0..n {
            out.push(',');
            out.push_str(&fmt(l[i]));
        }
        out.push('\n');
    }
    Some(out)
}
