//! Deterministic SVG line charts of the emitted series.
//!
//! Coordinates are printed with fixed precision so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoagError, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn range(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    if hi - lo <= 1e-300 * (1.0 + hi.abs()) {
        let pad = if hi == 0.0 { 1.0 } else { 0.05 * hi.abs() };
        return Some((lo - pad, hi + pad));
    }
    Some((lo, hi))
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Render a chart; `None` when no series has a finite point.
pub fn line_chart(title: &str, xlabel: &str, series: &[Series]) -> Option<String> {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)))?;
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)))?;
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="#ddd"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"##,
            sx(xv),
            TOP,
            TOP + ph,
            TOP + ph + 16.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="#ddd"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"##,
            LEFT,
            sy(yv),
            LEFT + pw,
            LEFT - 6.0,
            sy(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, escape(xlabel));
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = TOP + 16.0 * (k as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - RIGHT + 10.0,
            W - RIGHT + 30.0,
            W - RIGHT + 36.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Columns of a headed CSV file as `f64`.
pub fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CoagError::Parse(e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CoagError::Parse(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CoagError::Parse(e.to_string()))?;
        for (c, f) in cols.iter_mut().zip(rec.iter()) {
            c.push(f.parse::<f64>().map_err(|e| CoagError::Parse(format!("{}: {e}", path.display())))?);
        }
    }
    Ok((header, cols))
}

fn column<'a>(header: &[String], cols: &'a [Vec<f64>], name: &str) -> Option<&'a [f64]> {
    header.iter().position(|h| h == name).map(|i| cols[i].as_slice())
}

fn zip(t: &[f64], v: &[f64]) -> Vec<(f64, f64)> {
    t.iter().cloned().zip(v.iter().cloned()).collect()
}

/// Charts written by [`emit_plots`] and notes about skipped ones.
#[derive(Debug, Default)]
pub struct PlotOutput {
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

/// Write `moments.svg`, `gel.svg` and `localization.svg` from the series in `dir`.
pub fn emit_plots(dir: &Path) -> Result<PlotOutput> {
    let mut out = PlotOutput::default();
    let emit = |name: &str, svg: Option<String>, why: &str, out: &mut PlotOutput| -> Result<()> {
        match svg {
            Some(svg) => {
                std::fs::write(dir.join(name), svg)?;
                out.files.push(name.to_string());
            }
            None => out.notes.push(format!("{name}: skipped ({why})")),
        }
        Ok(())
    };

    let moments = dir.join("moments.csv");
    if moments.exists() {
        let (h, c) = read_columns(&moments)?;
        let svg = column(&h, &c, "t").and_then(|t| {
            let series: Vec<Series> = ["M0", "Mhalf", "M1"]
                .iter()
                .filter_map(|n| column(&h, &c, n).map(|v| Series { name: n.to_string(), points: zip(t, v) }))
                .collect();
            line_chart("Moments", "t", &series)
        });
        emit("moments.svg", svg, "empty trajectory", &mut out)?;
    } else {
        out.notes.push("moments.svg: skipped (moments.csv missing)".into());
    }

    let gel = dir.join("gel.csv");
    if gel.exists() {
        let (h, c) = read_columns(&gel)?;
        let svg = match (column(&h, &c, "t"), column(&h, &c, "gel_mass")) {
            (Some(t), Some(g)) => line_chart("Gel mass", "t", &[Series { name: "gel".into(), points: zip(t, g) }]),
            _ => None,
        };
        emit("gel.svg", svg, "no gel series", &mut out)?;
    }

    let loc = dir.join("localization.csv");
    if loc.exists() {
        let (h, c) = read_columns(&loc)?;
        let svg = match (column(&h, &c, "t"), column(&h, &c, "D")) {
            (Some(t), Some(d)) => line_chart("Localization deficit", "t", &[Series { name: "D".into(), points: zip(t, d) }]),
            _ => None,
        };
        emit("localization.svg", svg, "no deficit series", &mut out)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic() {
        let s = || vec![Series { name: "M0".into(), points: (0..20).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect() }];
        let a = line_chart("Moments", "t", &s()).unwrap();
        assert_eq!(a, line_chart("Moments", "t", &s()).unwrap());
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_series_gives_no_chart() {
        assert!(line_chart("x", "t", &[Series { name: "a".into(), points: vec![] }]).is_none());
    }

    #[test]
    fn missing_moments_is_noted() {
        let dir = tempfile::tempdir().unwrap();
        let out = emit_plots(dir.path()).unwrap();
        assert!(out.files.is_empty());
        assert!(out.notes[0].contains("moments.csv missing"));
    }
}
