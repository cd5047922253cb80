//! One self-contained SVG bar chart per report metric.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use accomp_core::metrics::MetricReport;

use crate::error::CliResult;
use crate::pipeline::write_file;

const BAR: f64 = 48.0;
const GAP: f64 = 16.0;
const LEFT: f64 = 64.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 220.0;
const LABEL_H: f64 = 120.0;

/// One bar: label, mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

/// File stem for a metric name (`Cov.` becomes `Cov`).
pub fn file_stem(metric: &str) -> String {
    metric.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '-').collect()
}

pub fn bar_chart_svg(title: &str, note: &str, bars: &[Bar]) -> String {
    let n = bars.len() as f64;
    let width = LEFT + n * (BAR + GAP) + GAP;
    let height = TOP + PLOT_H + LABEL_H;
    let hi = bars.iter().map(|b| b.mean + b.std).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.mean - b.std).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let y = |v: f64| TOP + PLOT_H * (hi - v) / span;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
        num(width),
        num(height),
        num(width),
        num(height)
    );
    let _ = writeln!(s, "<desc>{}</desc>", escape(note));
    let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, num(LEFT), escape(title));
    let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#, num(LEFT), num(TOP), num(TOP + PLOT_H));
    let _ = writeln!(s, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="black"/>"#, num(LEFT), num(y(0.0)), num(width - GAP / 2.0));
    for tick in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, num(LEFT - 6.0), num(y(tick) + 4.0), format_tick(tick));
    }
    for (i, b) in bars.iter().enumerate() {
        let x = LEFT + GAP + i as f64 * (BAR + GAP);
        let (top, bottom) = (y(b.mean.max(0.0)), y(b.mean.min(0.0)));
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#4a7ab5"><title>{} = {}</title></rect>"##,
            num(x),
            num(top),
            num(BAR),
            num(bottom - top),
            escape(&b.label),
            format_tick(b.mean)
        );
        if b.std > 0.0 {
            let cx = x + BAR / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{0}" y1="{1}" x2="{0}" y2="{2}" stroke="black"/>"#,
                num(cx),
                num(y(b.mean + b.std)),
                num(y(b.mean - b.std))
            );
        }
        let lx = x + BAR / 2.0;
        let ly = TOP + PLOT_H + 12.0;
        let _ = writeln!(
            s,
            r#"<text x="{0}" y="{1}" transform="rotate(45 {0} {1})">{2}</text>"#,
            num(lx),
            num(ly),
            escape(&b.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn format_tick(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

/// Bars for `metric`, one per row that has a value.
pub fn metric_bars(report: &MetricReport, metric: &str) -> Vec<Bar> {
    report
        .rows
        .iter()
        .filter_map(|r| {
            let s = r.cell.as_ref()?.get(metric)?;
            Some(Bar { label: format!("{} / {}", r.variant, r.conditioning), mean: s.mean, std: s.std })
        })
        .collect()
}

/// Writes `<out_dir>/<metric>.svg` for every metric column with at least one
/// value and returns the written paths.
pub fn plot_report(csv: &str, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let report = MetricReport::from_csv(csv)?;
    let note = report.header.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("; ");
    let mut written = Vec::new();
    for metric in &report.columns {
        let bars = metric_bars(&report, metric);
        if bars.is_empty() {
            log::warn!("metric {metric} has no values; chart skipped");
            continue;
        }
        let path = out_dir.join(format!("{}.svg", file_stem(metric)));
        write_file(&path, bar_chart_svg(metric, &note, &bars).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "# config_hash=abc\nvariant,conditioning,status,batches,FAD_mean,FAD_std,APA_mean,APA_std\n\
                       real,original,ok,5,0.010000,0.001000,,\nc-dit,ctx,ok,5,0.300000,0.020000,,\n";

    #[test]
    fn two_cells_give_two_bars_and_empty_columns_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let files = plot_report(CSV, dir.path()).unwrap();
        assert_eq!(files, vec![dir.path().join("FAD.svg")]);
        let svg = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains("config_hash=abc"));
    }

    #[test]
    fn output_is_deterministic() {
        let report = MetricReport::from_csv(CSV).unwrap();
        let bars = metric_bars(&report, "FAD");
        assert_eq!(bar_chart_svg("FAD", "n", &bars), bar_chart_svg("FAD", "n", &bars));
    }

    #[test]
    fn malformed_csv_reports_the_line() {
        let err = plot_report("variant,conditioning,status,batches,FAD_mean,FAD_std\nx,y,ok,5,1.0\n", Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn file_stems_are_plain() {
        assert_eq!(file_stem("Cov."), "Cov");
        assert_eq!(file_stem("CS_AA"), "CS_AA");
    }
}
