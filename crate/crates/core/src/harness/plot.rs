//! Hand-written SVG rendering of harness CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Columns never drawn as curves.
const SKIP_COLUMNS: [&str; 2] = ["t", "selected_candidate"];

/// Renders each CSV to `<out_dir>/<stem>.svg`: a bar chart of
/// `target_accuracy` for metrics tables, otherwise one polyline per numeric
/// column against the first column.
pub fn cmd_plot(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Vec::new();
    for p in paths {
        let table = read_table(p)?;
        let svg = if table.header.iter().any(|h| h == "target_accuracy") {
            bar_chart(p, &table)?
        } else {
            line_chart(p, &table)?
        };
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "plot".into());
        let target = out_dir.join(format!("{stem}.svg"));
        std::fs::write(&target, svg).map_err(|e| Error::io(&target, e))?;
        out.push(target);
    }
    Ok(out)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedCsv {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(malformed(path, "missing header"));
    }
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| malformed(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}

fn parse_cell(path: &Path, cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| malformed(path, format!("non-numeric value {cell:?}")))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn open_svg(title: &str, frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{b}" x2="{l}" y2="{t}" stroke="black"/>"#
    );
    for (v, y) in [(frame.y0, b), (frame.y1, t)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{:.3}</text>"#,
            l - 4.0,
            y + 3.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn line_chart(path: &Path, table: &Table) -> Result<String> {
    let x_name = table.header.first().cloned().unwrap_or_default();
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (col, name) in table.header.iter().enumerate().skip(1) {
        if SKIP_COLUMNS.contains(&name.as_str()) {
            continue;
        }
        let mut pts = Vec::new();
        for row in &table.rows {
            let x = parse_cell(path, row.first().map_or("", String::as_str))?;
            let y = parse_cell(path, row.get(col).map_or("", String::as_str))?;
            if let (Some(x), Some(y)) = (x, y) {
                pts.push((x, y));
            }
        }
        if !pts.is_empty() {
            series.push((name.clone(), pts));
        }
    }
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = span(all().map(|p| p.0));
    let (y0, y1) = span(all().map(|p| p.1));
    let frame = Frame { x0, x1, y0, y1 };
    let title = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut s = open_svg(&title, &frame, &x_name, "value");
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", frame.px(*x), frame.py(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = MARGIN + 14.0 * i as f64;
        let lx = WIDTH - MARGIN - 120.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10">{}</text>"#,
            lx + 20.0,
            ly + 3.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn bar_chart(path: &Path, table: &Table) -> Result<String> {
    let col = table
        .header
        .iter()
        .position(|h| h == "target_accuracy")
        .expect("checked by caller");
    let label_col = table.header.iter().position(|h| h == "run_id").unwrap_or(0);
    let mut bars = Vec::new();
    for row in &table.rows {
        let v = parse_cell(path, row.get(col).map_or("", String::as_str))?.unwrap_or(0.0);
        bars.push((row.get(label_col).cloned().unwrap_or_default(), v));
    }
    let frame = Frame {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0: 0.0,
        y1: 1.0,
    };
    let title = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut s = open_svg(&title, &frame, "run", "target_accuracy");
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = frame.px(i as f64 + 0.1);
        let w = frame.px(i as f64 + 0.9) - x;
        let top = frame.py(v.clamp(0.0, 1.0));
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{x:.2}" y="{top:.2}" width="{w:.2}" height="{:.2}" fill="{color}"/>"#,
            frame.py(0.0) - top
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="8">{}</text>"#,
            x + w / 2.0,
            HEIGHT - MARGIN + 12.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
