//! Run reports: timing tables, a Markdown summary and static SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::CliError;

pub const TIMING_FILE: &str = "timing.csv";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TUNE_FILE: &str = "tune.csv";
pub const SWEEP_FILE: &str = "alpha_sweep.csv";
pub const BO_FILE: &str = "bo_history.csv";
pub const SUMMARY_FILE: &str = "summary.md";
pub const REPORT_FILE: &str = "report.toml";

/// Wall-clock cost of one tuning or training method.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub method: String,
    pub seconds: f64,
    pub evaluations: usize,
    pub training_steps: usize,
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Read `method,seconds,evaluations,training_steps`.
pub fn read_timing(path: &Path) -> Result<Vec<TimingRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| invalid(path, e))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| invalid(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| invalid(path, "short row"));
        out.push(TimingRow {
            method: field(0)?.to_string(),
            seconds: field(1)?.parse().map_err(|e| invalid(path, e))?,
            evaluations: field(2)?.parse().map_err(|e| invalid(path, e))?,
            training_steps: field(3)?.parse().map_err(|e| invalid(path, e))?,
        });
    }
    Ok(out)
}

/// Add or replace the row for `row.method` in the timing table under `dir`.
pub fn record_timing(dir: &Path, row: TimingRow) -> Result<(), CliError> {
    let path = dir.join(TIMING_FILE);
    let mut rows = if path.exists() { read_timing(&path)? } else { Vec::new() };
    rows.retain(|r| r.method != row.method);
    rows.push(row);
    let mut s = String::from("method,seconds,evaluations,training_steps\n");
    for r in &rows {
        let _ = writeln!(s, "{},{},{},{}", r.method, r.seconds, r.evaluations, r.training_steps);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Numeric columns of a CSV file by header name; non-numeric rows (such as a
/// trailing `alpha_star` line) are skipped.
pub fn read_columns(path: &Path, names: &[&str]) -> Result<Vec<Vec<f64>>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| invalid(path, e))?;
    let headers = rdr.headers().map_err(|e| invalid(path, e))?.clone();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == *n)
                .ok_or_else(|| invalid(path, format!("missing column {n:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut cols = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| invalid(path, e))?;
        let vals: Option<Vec<f64>> = idx.iter().map(|&i| rec.get(i)?.parse().ok()).collect();
        if let Some(v) = vals {
            for (c, x) in cols.iter_mut().zip(v) {
                c.push(x);
            }
        }
    }
    Ok(cols)
}

/// The `alpha_star` line of a grid-search table.
pub fn read_alpha_star(path: &Path) -> Result<Option<f64>, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("alpha_star,"))
        .and_then(|v| v.trim().parse().ok()))
}

/// One line of a plot.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A self-contained SVG line plot with axes, five ticks per axis and a
/// legend. Non-finite points are dropped.
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().filter(finite).copied()).collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r##"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="#ddd"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            top,
            top + ph,
            top + ph + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            left + pw,
            left - 6.0,
            py + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let kept: Vec<(f64, f64)> = ser.points.iter().filter(finite).map(|&(x, y)| (sx(x), sy(y))).collect();
        let pts: Vec<String> = kept.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        if let [(x, y)] = kept[..] {
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        } else if !pts.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + pw - 150.0,
            left + pw - 130.0,
            left + pw - 124.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Averages of consecutive windows so long loss logs stay readable.
pub fn smooth(points: &[(f64, f64)], max_points: usize) -> Vec<(f64, f64)> {
    if points.len() <= max_points || max_points == 0 {
        return points.to_vec();
    }
    let window = points.len().div_ceil(max_points);
    points
        .chunks(window)
        .map(|c| {
            let n = c.len() as f64;
            (
                c.iter().map(|p| p.0).sum::<f64>() / n,
                c.iter().map(|p| p.1).sum::<f64>() / n,
            )
        })
        .collect()
}

/// What [`build_report`] found and wrote.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportSummary {
    pub grid_seconds: Option<f64>,
    pub bo_seconds: Option<f64>,
    /// BO-with-retraining wall clock over grid-search wall clock.
    pub ratio: Option<f64>,
    pub plots: Vec<PathBuf>,
}

fn label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Aggregate the CSV outputs found in `inputs` into `out`: `summary.md`,
/// `report.toml` and one SVG per available plot.
pub fn build_report(inputs: &[PathBuf], out: &Path) -> Result<ReportSummary, CliError> {
    let missing: Vec<String> = inputs
        .iter()
        .filter(|d| !d.is_dir())
        .map(|d| format!("report input {} is not a directory", d.display()))
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Config(missing));
    }
    fs::create_dir_all(out)?;
    let mut summary = ReportSummary::default();
    let mut md = String::from("# Registration report\n\n");

    let mut loss = Vec::new();
    let mut dice = Vec::new();
    let mut bending = Vec::new();
    let mut timing: Vec<(String, TimingRow)> = Vec::new();
    for dir in inputs {
        let name = label(dir);
        let p = dir.join(LOSS_LOG_FILE);
        if p.exists() {
            let c = read_columns(&p, &["epoch", "total", "sim", "reg"])?;
            let pts: Vec<(f64, f64)> = c[0].iter().copied().zip(c[1].iter().copied()).collect();
            if let Some(last) = pts.last() {
                let _ = writeln!(
                    md,
                    "- `{name}`: {} epochs, final total loss {:.6}",
                    pts.len(),
                    last.1
                );
            }
            loss.push(Series {
                label: name.clone(),
                points: smooth(&pts, 400),
            });
        }
        let p = dir.join(TUNE_FILE);
        if p.exists() {
            let c = read_columns(&p, &["alpha", "dice"])?;
            dice.push(Series {
                label: name.clone(),
                points: c[0].iter().copied().zip(c[1].iter().copied()).collect(),
            });
            if let Some(a) = read_alpha_star(&p)? {
                let _ = writeln!(md, "- `{name}`: grid-search alpha_star = {a}");
            }
        }
        let p = dir.join(SWEEP_FILE);
        if p.exists() {
            let c = read_columns(&p, &["alpha", "bending"])?;
            bending.push(Series {
                label: name.clone(),
                points: c[0].iter().copied().zip(c[1].iter().copied()).collect(),
            });
        }
        let p = dir.join(TIMING_FILE);
        if p.exists() {
            timing.extend(read_timing(&p)?.into_iter().map(|r| (name.clone(), r)));
        }
    }

    if !timing.is_empty() {
        md.push_str("\n## Wall clock\n\n| run | method | seconds | evaluations | training steps |\n|---|---|---|---|---|\n");
        for (name, r) in &timing {
            let _ = writeln!(
                md,
                "| {name} | {} | {:.3} | {} | {} |",
                r.method, r.seconds, r.evaluations, r.training_steps
            );
        }
        let total = |m: &str| {
            let rows: Vec<f64> = timing.iter().filter(|(_, r)| r.method == m).map(|(_, r)| r.seconds).collect();
            (!rows.is_empty()).then(|| rows.iter().sum::<f64>())
        };
        summary.grid_seconds = total("grid");
        summary.bo_seconds = total("bo");
        if let (Some(g), Some(b)) = (summary.grid_seconds, summary.bo_seconds) {
            summary.ratio = Some(b / g.max(f64::MIN_POSITIVE));
            let _ = writeln!(
                md,
                "\nGrid search on the conditioned checkpoint: {g:.3} s. \
                 Bayesian optimization with retraining: {b:.3} s. \
                 Ratio (BO / grid): {:.2}.",
                b / g.max(f64::MIN_POSITIVE)
            );
        }
    }

    md.push_str("\n## Plots\n");
    let plots: [(&str, &str, &str, &str, &[Series]); 3] = [
        ("loss_curve.svg", "Training loss", "epoch", "total loss", &loss),
        ("alpha_dice.svg", "Dice versus alpha", "alpha", "Dice", &dice),
        ("alpha_bending.svg", "Bending energy versus alpha", "alpha", "bending energy", &bending),
    ];
    for (file, title, x, y, s) in plots {
        if s.is_empty() {
            continue;
        }
        let path = out.join(file);
        fs::write(&path, line_plot_svg(title, x, y, s))?;
        let _ = writeln!(md, "\n![{title}]({file})");
        summary.plots.push(path);
    }

    fs::write(out.join(SUMMARY_FILE), md)?;
    let mut t = toml::Table::new();
    if let Some(g) = summary.grid_seconds {
        t.insert("grid_seconds".into(), toml::Value::Float(g));
    }
    if let Some(b) = summary.bo_seconds {
        t.insert("bo_seconds".into(), toml::Value::Float(b));
    }
    if let Some(r) = summary.ratio {
        t.insert("ratio_bo_over_grid".into(), toml::Value::Float(r));
    }
    fs::write(out.join(REPORT_FILE), toml::to_string(&t).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    Ok(summary)
}
