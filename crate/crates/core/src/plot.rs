//! Plain SVG/CSV renderings of training curves and α sweeps.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::train::MetricsRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        MARGIN + (x - self.x0) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        HEIGHT - MARGIN - (y - self.y0) / span * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str, frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, WIDTH / 2.0);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    for (v, label) in [(frame.y0, frame.y0), (frame.y1, frame.y1)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{label:.3}</text>"#,
            left - 4.0,
            frame.py(v) + 4.0
        );
    }
    for v in [frame.x0, frame.x1] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{v}</text>"#, frame.px(v), bottom + 16.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{y_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    s
}

fn polyline(frame: &Frame, pts: &[(f64, f64)], colour: &str) -> String {
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    format!(
        r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
        coords.join(" ")
    )
}

/// `d1` and `d2` against epoch.
pub fn distance_curves_svg(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no metrics rows to plot".into()));
    }
    let x1 = rows.iter().map(|r| r.epoch).max().unwrap_or(1) as f64;
    let y1 = rows.iter().map(|r| r.d1.max(r.d2)).fold(0.0, f64::max).max(1e-3);
    let frame = Frame {
        x0: 0.0,
        x1,
        y0: 0.0,
        y1,
    };
    let mut s = open_svg("Adaptive target distances", &frame, "epoch", "cosine distance");
    let d1: Vec<(f64, f64)> = rows.iter().map(|r| (r.epoch as f64, r.d1)).collect();
    let d2: Vec<(f64, f64)> = rows.iter().map(|r| (r.epoch as f64, r.d2)).collect();
    s.push_str(&polyline(&frame, &d1, "#1f77b4"));
    s.push('\n');
    s.push_str(&polyline(&frame, &d2, "#d62728"));
    s.push('\n');
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#1f77b4">d1</text>"##, WIDTH - 90.0);
    let _ = writeln!(s, r##"<text x="{}" y="40" fill="#d62728">d2</text>"##, WIDTH - 60.0);
    s.push_str("</svg>\n");
    Ok(s)
}

/// One α setting and the accuracy it reached.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub alpha: f64,
    pub mean_acc: f64,
    pub ci95: f64,
}

/// Reads `mean_acc` and `ci95` out of an evaluation report.
pub fn sweep_point_from_report(alpha: f64, json: &str) -> Result<SweepPoint> {
    let v: serde_json::Value =
        serde_json::from_str(json).map_err(|e| Error::InvalidInput(format!("report is not JSON: {e}")))?;
    let field = |k: &str| {
        v.get(k)
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::InvalidInput(format!("report lacks numeric '{k}'")))
    };
    Ok(SweepPoint {
        alpha,
        mean_acc: field("mean_acc")?,
        ci95: field("ci95")?,
    })
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("alpha,mean_acc,ci95\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.alpha, p.mean_acc, p.ci95);
    }
    s
}

/// Accuracy with 95% interval whiskers against α, points in the given order.
pub fn sweep_svg(points: &[SweepPoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::InvalidInput("no sweep points to plot".into()));
    }
    let lo = points.iter().map(|p| p.mean_acc - p.ci95).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.mean_acc + p.ci95).fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame {
        x0: 0.0,
        x1: (points.len() - 1).max(1) as f64,
        y0: lo.floor(),
        y1: hi.ceil().max(lo.floor() + 1.0),
    };
    let mut s = open_svg("Accuracy against alpha", &frame, "alpha", "accuracy (%)");
    let pts: Vec<(f64, f64)> = points.iter().enumerate().map(|(i, p)| (i as f64, p.mean_acc)).collect();
    s.push_str(&polyline(&frame, &pts, "#2ca02c"));
    s.push('\n');
    for (i, p) in points.iter().enumerate() {
        let x = frame.px(i as f64);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" x2="{x:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
            frame.py(p.mean_acc - p.ci95),
            frame.py(p.mean_acc + p.ci95)
        );
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="3"/>"#, frame.py(p.mean_acc));
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - MARGIN + 30.0,
            p.alpha
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
