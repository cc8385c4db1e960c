//! Dependency-free SVG charts. Every chart is a function of parsed CSV
//! tables only, so regenerating from the files reproduces the image.

use std::fmt::Write as _;

use crate::io::{SeedTable, SummaryRow, TraceTable};

const W: f64 = 720.0;
const H: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
/// Values below this are drawn on the floor of a log axis.
const LOG_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Iterations,
    Exchanges,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        escape(title)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * k as f64;
        let x = W - RIGHT + 15.0;
        let c = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{c}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 22.0,
            x + 28.0,
            y + 4.0,
            escape(name)
        );
    }
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e9 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Line chart; with `log_y` the vertical axis spans whole decades.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let finite = |p: &&(f64, f64)| p.0.is_finite() && p.1.is_finite();
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().filter(finite).copied()).collect();
    let ty = |y: f64| if log_y { y.max(LOG_FLOOR).log10() } else { y };
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(ty(p.1)), b.max(ty(p.1))));
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if log_y {
        y0 = y0.floor();
        y1 = y1.ceil();
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in nice_ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 16.0,
            fmt_tick(t)
        );
    }
    let yticks: Vec<f64> = if log_y {
        let step = ((y1 - y0) / 10.0).ceil().max(1.0);
        let mut v = Vec::new();
        let mut t = y0;
        while t <= y1 + 1e-9 {
            v.push(t);
            t += step;
        }
        v
    } else {
        nice_ticks(y0, y1)
    };
    for t in yticks {
        let y = sy(t);
        let label = if log_y { format!("1e{t:.0}") } else { fmt_tick(t) };
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let mut d = String::new();
        let mut pen_down = false;
        for p in &s.points {
            if !(p.0.is_finite() && p.1.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, sx(p.0), sy(ty(p.1)));
            pen_down = true;
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.8"/>"#,
            d.trim_end(),
            PALETTE[k % PALETTE.len()]
        );
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Relative error against iterations or exchanges, one line per trace.
pub fn trace_chart(title: &str, tables: &[TraceTable], axis: XAxis) -> String {
    let series: Vec<Series> = tables
        .iter()
        .map(|t| Series {
            name: t.meta.label.clone(),
            points: t
                .rows
                .iter()
                .map(|r| {
                    let x = match axis {
                        XAxis::Iterations => r.iteration,
                        XAxis::Exchanges => r.exchanges,
                    };
                    (x as f64, r.error)
                })
                .collect(),
        })
        .collect();
    let x_label = match axis {
        XAxis::Iterations => "iteration",
        XAxis::Exchanges => "information exchanges per node",
    };
    line_chart(title, x_label, "relative error", &series, true)
}

/// Iterations to the first threshold in the summary, per label, against
/// the numeric value in each `name=value` cell.
pub fn sweep_chart(title: &str, axis: &str, rows: &[SummaryRow]) -> String {
    let threshold = rows.first().map(|r| r.threshold);
    let mut series: Vec<Series> = Vec::new();
    for r in rows.iter().filter(|r| Some(r.threshold) == threshold) {
        let x = r
            .cell
            .split_once('=')
            .and_then(|(_, v)| v.parse::<f64>().ok())
            .unwrap_or(f64::NAN);
        let y = r.iterations.map_or(f64::NAN, |i| i as f64);
        match series.iter_mut().find(|s| s.name == r.label) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                name: r.label.clone(),
                points: vec![(x, y)],
            }),
        }
    }
    let y_label = match threshold {
        Some(t) => format!("iterations to {t:e}"),
        None => "iterations".to_string(),
    };
    line_chart(title, axis, &y_label, &series, false)
}

/// Grouped histogram of exchanges-to-threshold with shared bins.
pub fn histogram_chart(title: &str, table: &SeedTable, bins: usize) -> String {
    let labels = table.labels();
    let crossed: Vec<usize> = table.rows.iter().filter_map(|r| r.exchanges).collect();
    let bins = bins.max(1);
    let lo = crossed.iter().min().copied().unwrap_or(0) as f64;
    let hi = crossed.iter().max().copied().unwrap_or(1) as f64;
    let width = ((hi - lo) / bins as f64).max(1.0);
    let counts: Vec<Vec<usize>> = labels
        .iter()
        .map(|l| {
            let mut c = vec![0usize; bins];
            for e in table.rows.iter().filter(|r| &r.label == l).filter_map(|r| r.exchanges) {
                c[(((e as f64 - lo) / width) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let censored: Vec<usize> = labels
        .iter()
        .map(|l| table.rows.iter().filter(|r| &r.label == l && r.exchanges.is_none()).count())
        .collect();
    let ymax = counts.iter().flatten().copied().max().unwrap_or(1).max(1) as f64;

    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let slot = pw / bins as f64;
    let bar = slot / labels.len().max(1) as f64;
    for (k, c) in counts.iter().enumerate() {
        for (b, &v) in c.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let h = v as f64 / ymax * ph;
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
                LEFT + b as f64 * slot + k as f64 * bar,
                TOP + ph - h,
                bar,
                PALETTE[k % PALETTE.len()]
            );
        }
    }
    for b in (0..=bins).step_by(bins.div_ceil(6)) {
        let x = LEFT + b as f64 * slot;
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 16.0,
            fmt_tick(lo + b as f64 * width)
        );
    }
    for t in nice_ticks(0.0, ymax) {
        let y = TOP + ph - t / ymax * ph;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">exchanges per node to reach {:e}</text>"#,
        LEFT + pw / 2.0,
        H - 18.0,
        table.threshold
    );
    let names: Vec<String> = labels
        .iter()
        .zip(&censored)
        .map(|(l, c)| if *c > 0 { format!("{l} ({c} censored)") } else { l.clone() })
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    legend(&mut out, &refs);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{SeedRow, TraceMetaLine, TraceRecord};

    fn trace(label: &str, rate: f64) -> TraceTable {
        TraceTable {
            meta: TraceMetaLine {
                label: label.into(),
                ..TraceMetaLine::default()
            },
            with_diagnostics: false,
            rows: (0..30)
                .map(|t| TraceRecord {
                    iteration: t,
                    error: rate.powi(t as i32),
                    consensus_residual: 0.0,
                    exchanges: 7 * t,
                    update_norm: 0.0,
                    diagnostics: None,
                })
                .collect(),
        }
    }

    #[test]
    fn one_path_per_series_and_log_ticks() {
        let svg = trace_chart("demo", &[trace("a", 0.5), trace("b<>", 0.0)], XAxis::Exchanges);
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("1e-20") && svg.contains("1e0"));
        assert!(svg.contains("b&lt;&gt;"));
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn deterministic_output() {
        let t = [trace("a", 0.7)];
        assert_eq!(trace_chart("x", &t, XAxis::Iterations), trace_chart("x", &t, XAxis::Iterations));
    }

    #[test]
    fn non_finite_points_break_the_path() {
        let s = Series {
            name: "s".into(),
            points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 0.1), (3.0, 0.01)],
        };
        let svg = line_chart("t", "x", "y", &[s], true);
        let path = svg.lines().find(|l| l.starts_with("<path")).unwrap();
        assert_eq!(path.matches('M').count(), 2);
    }

    #[test]
    fn histogram_reports_censored() {
        let row = |label: &str, seed, e: Option<usize>| SeedRow {
            label: label.into(),
            seed,
            iterations: e.map(|v| v / 7),
            exchanges: e,
            failure: String::new(),
        };
        let table = SeedTable {
            threshold: 1e-5,
            budget: 100,
            rows: vec![row("pdqn", 0, Some(56)), row("pdqn", 1, Some(63)), row("da", 0, None), row("da", 1, Some(80))],
        };
        let svg = histogram_chart("h", &table, 4);
        assert!(svg.contains("da (1 censored)"));
        assert_eq!(svg.matches("<rect").count(), 2 + 3);
    }
}
