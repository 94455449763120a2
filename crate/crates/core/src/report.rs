//! Charts and summary tables for finished runs.
//!
//! Charts are standalone SVG documents with no external assets.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{MetricsRow, RunSummary, METRICS_FILE, SUMMARY_FILE};

/// Default moving-average window for charts.
pub const DEFAULT_SMOOTH_WINDOW: usize = 100;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 180.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Reads a metrics CSV written by the trainer.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::Contract(format!("{}: no rows", path.display())));
    }
    Ok(rows)
}

/// Trailing moving average; the first `window - 1` points average what is available.
///
/// ```
/// use clipbench::report::moving_average;
/// assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
/// ```
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// One line of a chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders a line chart with axes, five ticks per axis and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" font-size="15" text-anchor="middle">{}</text>"#, MARGIN_LEFT + plot_w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ccc"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            MARGIN_Y,
            MARGIN_Y + plot_h,
            MARGIN_Y + plot_h + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ccc"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 6.0,
        escape(x_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = MARGIN_Y + 10.0 + 18.0 * i as f64;
        let lx = MARGIN_LEFT + plot_w + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 1.0 && v.abs() < 1e9 && v.fract() == 0.0 {
        format!("{v:.0}")
    } else if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

/// The metrics charted by [`render_report`] and whether each is smoothed.
pub const CHARTED: [(&str, bool); 4] = [("return", true), ("entropy", true), ("clip_frac", false), ("mean_kl3", false)];

fn column(rows: &[MetricsRow], name: &str) -> Vec<f64> {
    rows.iter()
        .map(|r| match name {
            "return" => r.mean_return,
            "entropy" => r.entropy,
            "clip_frac" => r.clip_frac,
            "mean_kl3" => r.mean_kl3,
            "length" => r.length,
            _ => unreachable!("unknown metric {name}"),
        })
        .collect()
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub run: String,
    pub steps: usize,
    pub final_return: f64,
    pub best_return: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mean_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_mean_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_pass_at_k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_pass_at_k: Option<f64>,
}

fn final_best(f: Option<f64>, b: Option<f64>) -> String {
    match (f, b) {
        (Some(f), Some(b)) => format!("{f:.3} ({b:.3})"),
        _ => "-".into(),
    }
}

/// Text table in `final (best)` format.
pub fn summary_table(lines: &[SummaryLine], window: usize) -> String {
    let mut out = format!(
        "{:<32} {:>6} {:>22} {:>16} {:>16}\n",
        "run",
        "steps",
        format!("return@{window} final (best)"),
        "mean@k",
        "pass@k"
    );
    for l in lines {
        let _ = writeln!(
            out,
            "{:<32} {:>6} {:>22} {:>16} {:>16}",
            l.run,
            l.steps,
            final_best(Some(l.final_return), Some(l.best_return)),
            final_best(l.final_mean_at_k, l.best_mean_at_k),
            final_best(l.final_pass_at_k, l.best_pass_at_k)
        );
    }
    out
}

/// What [`render_report`] produced.
#[derive(Debug, Clone, Default)]
pub struct ReportOutput {
    pub charts: Vec<PathBuf>,
    pub lines: Vec<SummaryLine>,
    /// Run directories that could not be read, with the reason.
    pub failures: Vec<(PathBuf, String)>,
}

fn run_name(dir: &Path) -> String {
    let parts: Vec<String> = dir
        .components()
        .rev()
        .take(2)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    match parts.as_slice() {
        [last, parent] if last.starts_with("seed_") => format!("{parent}/{last}"),
        [last, ..] => last.clone(),
        [] => dir.display().to_string(),
    }
}

/// Charts every run in `run_dirs` into `out`, plus `summary.txt` and
/// `summary.json`. Unreadable runs are listed in the output and skipped.
pub fn render_report(run_dirs: &[PathBuf], out: &Path, window: usize) -> Result<ReportOutput> {
    let mut loaded = Vec::new();
    let mut output = ReportOutput::default();
    for dir in run_dirs {
        match read_metrics(&dir.join(METRICS_FILE)) {
            Ok(rows) => loaded.push((run_name(dir), dir.clone(), rows)),
            Err(e) => output.failures.push((dir.clone(), e.to_string())),
        }
    }
    if loaded.is_empty() {
        return Err(Error::Contract("no readable run directories".into()));
    }
    fs::create_dir_all(out)?;
    for (metric, smoothed) in CHARTED {
        let series: Vec<Series> = loaded
            .iter()
            .map(|(name, _, rows)| {
                let raw = column(rows, metric);
                let ys = if smoothed { moving_average(&raw, window) } else { raw };
                Series {
                    label: name.clone(),
                    points: rows.iter().zip(ys).map(|(r, y)| (r.step as f64, y)).collect(),
                }
            })
            .collect();
        let title = if smoothed {
            format!("{metric} ({window}-step moving average)")
        } else {
            metric.to_string()
        };
        let path = out.join(format!("{metric}.svg"));
        fs::write(&path, line_chart_svg(&title, "step", &series))?;
        output.charts.push(path);
    }
    for (name, dir, rows) in &loaded {
        let smoothed = moving_average(&column(rows, "return"), window);
        let summary: Option<RunSummary> = fs::read_to_string(dir.join(SUMMARY_FILE))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        output.lines.push(SummaryLine {
            run: name.clone(),
            steps: rows.len(),
            final_return: *smoothed.last().expect("non-empty"),
            best_return: smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            final_mean_at_k: summary.as_ref().map(|s| s.final_mean_at_k),
            best_mean_at_k: summary.as_ref().map(|s| s.best_mean_at_k),
            final_pass_at_k: summary.as_ref().map(|s| s.final_pass_at_k),
            best_pass_at_k: summary.as_ref().map(|s| s.best_pass_at_k),
        });
    }
    fs::write(out.join("summary.txt"), summary_table(&output.lines, window))?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&output.lines)? + "\n")?;
    Ok(output)
}
