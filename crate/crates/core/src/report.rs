//! SVG charts for report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// A parsed report: header plus rows, each tagged with its file line.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub path: String,
    pub headers: Vec<String>,
    pub rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let name = path.display().to_string();
        let err = |line: u64, msg: String| Error::Csv {
            path: name.clone(),
            line,
            msg,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| err(csv_line(&e), e.to_string()))?;
        let headers = rdr
            .headers()
            .map_err(|e| err(csv_line(&e), e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| err(csv_line(&e), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec.iter().map(str::to_string).collect()));
        }
        Ok(Table { path: name, headers, rows })
    }

    fn column(&self, name: &str) -> usize {
        self.headers.iter().position(|h| h == name).expect("schema checked")
    }

    fn number(&self, line: u64, row: &[String], col: &str) -> Result<f64> {
        let s = &row[self.column(col)];
        s.parse::<f64>().map_err(|_| Error::Csv {
            path: self.path.clone(),
            line,
            msg: format!("column {col}: {s:?} is not a number"),
        })
    }

    fn text<'a>(&self, row: &'a [String], col: &str) -> &'a str {
        &row[self.column(col)]
    }
}

fn csv_line(e: &csv::Error) -> u64 {
    e.position().map_or(1, |p| p.line())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chart {
    Bars { title: String, y_label: String, bars: Vec<Bar> },
    Lines { title: String, x_label: String, y_label: String, series: Vec<Series> },
}

fn lines(table: &Table, x: &str, y: &str, keys: &[&str], title: &str, y_label: &str) -> Result<Chart> {
    let mut by: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (line, row) in &table.rows {
        let name = keys.iter().map(|k| table.text(row, k)).collect::<Vec<_>>().join("/");
        let px = table.number(*line, row, x)?;
        let py = table.number(*line, row, y)?;
        by.entry(name).or_default().push((px, py));
    }
    let series = by
        .into_iter()
        .map(|(name, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { name, points }
        })
        .collect();
    Ok(Chart::Lines {
        title: title.to_string(),
        x_label: x.to_string(),
        y_label: y_label.to_string(),
        series,
    })
}

/// Picks the chart for a report from its header.
pub fn chart_for(table: &Table) -> Result<Chart> {
    let h: Vec<&str> = table.headers.iter().map(String::as_str).collect();
    let title = Path::new(&table.path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report")
        .to_string();
    match h.as_slice() {
        ["partition", "kind", "layer", "mean", "std"] => {
            let mut bars = Vec::new();
            for (line, row) in &table.rows {
                let layer = table.text(row, "layer");
                let mut label = format!("{}/{}", table.text(row, "partition"), table.text(row, "kind"));
                if layer != "-" {
                    label.push_str(&format!("/L{layer}"));
                }
                bars.push(Bar {
                    label,
                    value: table.number(*line, row, "mean")?,
                    err: table.number(*line, row, "std")?,
                });
            }
            Ok(Chart::Bars {
                title,
                y_label: "cosine".into(),
                bars,
            })
        }
        ["layer", "stream", "IE"] => lines(table, "layer", "IE", &["stream"], &title, "entropy (bits)"),
        ["step", "pair", "partition", "kind", "mean"] => lines(table, "step", "mean", &["pair", "partition", "kind"], &title, "cosine"),
        ["step", "task", "m", "w"] => lines(table, "step", "w", &["task"], &title, "weight"),
        ["step", "batch", "n_mean", "m_mean", "ratio"] => lines(table, "batch", "ratio", &["step"], &title, "length ratio"),
        _ => Err(Error::Csv {
            path: table.path.clone(),
            line: 1,
            msg: format!("unrecognized report header {h:?}"),
        }),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    (lo, hi)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn y(&self, v: f64, lo: f64, hi: f64) -> f64 {
        HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
    }

    fn x(&self, v: f64) -> f64 {
        LEFT + (v - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }
}

fn axes(svg: &mut String, title: &str, x_label: &str, y_label: &str, f: &Frame) {
    let (l, r, t, b) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(svg, r#"<line x1="{l:.1}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{l:.1}" y1="{t:.1}" x2="{l:.1}" y2="{b:.1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let y = f.y(v, f.y0, f.y1);
        let _ = writeln!(svg, r#"<line x1="{:.1}" y1="{y:.1}" x2="{l:.1}" y2="{y:.1}" stroke="black"/>"#, l - 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.3}</text>"#, l - 6.0, y + 3.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, (l + r) / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (t + b) / 2.0,
        (t + b) / 2.0,
        escape(y_label)
    );
}

/// Deterministic SVG rendering.
pub fn render(chart: &Chart) -> String {
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    match chart {
        Chart::Bars { title, y_label, bars } => {
            let (lo, hi) = range(bars.iter().flat_map(|b| [b.value - b.err, b.value + b.err]), true);
            let f = Frame {
                x0: 0.0,
                x1: bars.len().max(1) as f64,
                y0: lo,
                y1: hi,
            };
            axes(&mut svg, title, "", y_label, &f);
            let zero = f.y(0.0, lo, hi);
            let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;
            for (i, b) in bars.iter().enumerate() {
                let x = f.x(i as f64) + slot * 0.15;
                let y = f.y(b.value, lo, hi);
                let (top, h) = if y < zero { (y, zero - y) } else { (zero, y - zero) };
                let color = PALETTE[i % PALETTE.len()];
                let _ = writeln!(svg, r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{h:.1}" fill="{color}"/>"#, slot * 0.7);
                if b.err > 0.0 {
                    let cx = x + slot * 0.35;
                    let _ = writeln!(
                        svg,
                        r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                        f.y(b.value - b.err, lo, hi),
                        f.y(b.value + b.err, lo, hi)
                    );
                }
                let lx = x + slot * 0.35;
                let ly = HEIGHT - BOTTOM + 12.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" font-size="9" transform="rotate(-30 {lx:.1} {ly:.1})">{}</text>"#,
                    escape(&b.label)
                );
            }
        }
        Chart::Lines {
            title,
            x_label,
            y_label,
            series,
        } => {
            let pts = || series.iter().flat_map(|s| s.points.iter());
            let (x0, x1) = range(pts().map(|p| p.0), false);
            let (lo, hi) = range(pts().map(|p| p.1), false);
            let f = Frame { x0, x1, y0: lo, y1: hi };
            axes(&mut svg, title, x_label, y_label, &f);
            for i in 0..=4 {
                let v = x0 + (x1 - x0) * i as f64 / 4.0;
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
                    f.x(v),
                    HEIGHT - BOTTOM + 14.0,
                    fmt_tick(v)
                );
            }
            for (i, s) in series.iter().enumerate() {
                let color = PALETTE[i % PALETTE.len()];
                let coords: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.x(x), f.y(y, lo, hi))).collect();
                let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, coords.join(" "));
                for c in &coords {
                    let (cx, cy) = c.split_once(',').expect("pair");
                    let _ = writeln!(svg, r#"<circle cx="{cx}" cy="{cy}" r="2" fill="{color}"/>"#);
                }
                let ly = TOP + 14.0 * i as f64;
                let lx = WIDTH - RIGHT + 10.0;
                let _ = writeln!(svg, r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="3" fill="{color}"/>"#, ly - 3.0);
                let _ = writeln!(svg, r#"<text x="{:.1}" y="{ly:.1}" font-size="10">{}</text>"#, lx + 14.0, escape(&s.name));
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// One SVG per CSV, named after the CSV, written into `out`.
pub fn export_plots(csvs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::with_capacity(csvs.len());
    for path in csvs {
        let chart = chart_for(&Table::read(path)?)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let target = out.join(format!("{stem}.svg"));
        std::fs::write(&target, render(&chart))?;
        written.push(target);
    }
    Ok(written)
}
