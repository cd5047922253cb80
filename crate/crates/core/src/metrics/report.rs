use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::protocol::{CellStats, Stat};

/// One table row: a (variant, conditioning) cell, absent when it could not be
/// evaluated (for example a missing checkpoint).
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub conditioning: String,
    pub cell: Option<CellStats>,
}

/// Ablation grid of metric statistics. `header` holds `key=value` provenance
/// lines (config hash, protocol scale).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub header: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn fmt_value(v: f64) -> String {
    // avoid "-0.000000" so that equal reports are byte-identical
    let s = format!("{v:.6}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

impl MetricReport {
    pub fn new(columns: Vec<String>) -> Self {
        Self { header: Vec::new(), columns, rows: Vec::new() }
    }

    pub fn push(&mut self, variant: &str, conditioning: &str, cell: Option<CellStats>) {
        self.rows.push(ReportRow { variant: variant.into(), conditioning: conditioning.into(), cell });
    }

    pub fn find(&self, variant: &str, conditioning: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant && r.conditioning == conditioning)
    }

    pub fn value(&self, variant: &str, conditioning: &str, column: &str) -> Option<Stat> {
        self.find(variant, conditioning)?.cell.as_ref()?.get(column)
    }

    /// CSV with `#`-prefixed header lines, then one row per cell. Each metric
    /// has `<name>_mean` and `<name>_std` columns; unavailable values are blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.header {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str("variant,conditioning,status,batches");
        for c in &self.columns {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.variant, r.conditioning);
            match &r.cell {
                None => {
                    out.push_str(",absent,0");
                    out.push_str(&",".repeat(2 * self.columns.len()));
                }
                Some(cell) => {
                    let _ = write!(out, ",ok,{}", cell.evaluations);
                    for c in &self.columns {
                        match cell.get(c) {
                            Some(s) => {
                                let _ = write!(out, ",{},{}", fmt_value(s.mean), fmt_value(s.std));
                            }
                            None => out.push_str(",,"),
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// Parses the output of [`MetricReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut report = MetricReport::default();
        let mut header_seen = false;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |detail: String| Error::Parse { line: line_no, detail };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let (k, v) = h.trim().split_once('=').ok_or_else(|| err("header line without '='".into()))?;
                report.header.push((k.to_string(), v.to_string()));
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if !header_seen {
                if fields.len() < 4 || fields[..4] != ["variant", "conditioning", "status", "batches"] || !(fields.len() - 4).is_multiple_of(2) {
                    return Err(err("expected the column header row".into()));
                }
                for pair in fields[4..].chunks(2) {
                    let name = pair[0].strip_suffix("_mean").ok_or_else(|| err(format!("bad column {}", pair[0])))?;
                    if pair[1] != format!("{name}_std") {
                        return Err(err(format!("column {} should follow {}", pair[1], pair[0])));
                    }
                    report.columns.push(name.to_string());
                }
                header_seen = true;
                continue;
            }
            if fields.len() != 4 + 2 * report.columns.len() {
                return Err(err(format!("expected {} fields, found {}", 4 + 2 * report.columns.len(), fields.len())));
            }
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| err(format!("not a number: {s:?}")))
                }
            };
            let cell = match fields[2] {
                "absent" => None,
                "ok" => {
                    let evaluations: usize = fields[3].parse().map_err(|_| err(format!("bad batch count {:?}", fields[3])))?;
                    let mut columns = Vec::new();
                    for (i, c) in report.columns.iter().enumerate() {
                        let stat = match (num(fields[4 + 2 * i])?, num(fields[5 + 2 * i])?) {
                            (Some(mean), Some(std)) => Some(Stat { mean, std, count: evaluations }),
                            (None, None) => None,
                            _ => return Err(err(format!("column {c} has only one of mean/std"))),
                        };
                        columns.push((c.clone(), stat));
                    }
                    Some(CellStats { columns, evaluations })
                }
                other => return Err(err(format!("unknown status {other:?}"))),
            };
            report.rows.push(ReportRow { variant: fields[0].into(), conditioning: fields[1].into(), cell });
        }
        if !header_seen {
            return Err(Error::Parse { line: text.lines().count().max(1), detail: "missing column header row".into() });
        }
        Ok(report)
    }

    /// Human-readable table: rows grouped by variant, metric means only.
    pub fn to_table(&self) -> String {
        let mut grid: Vec<Vec<String>> = Vec::new();
        let mut head = vec!["Model".to_string(), "Inputs".to_string()];
        head.extend(self.columns.iter().cloned());
        grid.push(head);
        let mut last_variant: Option<&str> = None;
        for r in &self.rows {
            let name = if last_variant == Some(r.variant.as_str()) { String::new() } else { r.variant.clone() };
            last_variant = Some(&r.variant);
            let mut line = vec![name, r.conditioning.clone()];
            for c in &self.columns {
                line.push(match &r.cell {
                    None => "n/a".into(),
                    Some(cell) => cell.get(c).map_or(String::new(), |s| format!("{:.3}", s.mean)),
                });
            }
            grid.push(line);
        }
        let widths: Vec<usize> =
            (0..grid[0].len()).map(|j| grid.iter().map(|row| row[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (s, &w))| if j < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}
