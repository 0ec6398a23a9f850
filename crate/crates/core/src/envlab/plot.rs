//! CSV and SVG output for rollouts and point clouds.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use super::rollout::RolloutReport;
use super::{EnvKind, GOAL_A, GOAL_B, GOAL_RADIUS, MULTIROUTE_TARGET, MULTIROUTE_TARGET_RADIUS};
use crate::error::Result;

/// One row per executed step: `episode,step,x,y,ax,ay`, where `(x, y)` is the
/// position the action was taken from.
pub fn write_trajectories_csv(path: &Path, report: &RolloutReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "episode,step,x,y,ax,ay")?;
    for ep in &report.trajectories {
        for (t, a) in ep.actions.iter().enumerate() {
            let p = ep.positions[t];
            writeln!(w, "{},{},{},{},{},{}", ep.index, t, p[0], p[1], a[0], a[1])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

/// Maps data coordinates in `[lo, hi]²` onto a square canvas.
struct Canvas {
    lo: f64,
    hi: f64,
    size: f64,
    body: String,
}

impl Canvas {
    fn new(lo: f64, hi: f64, size: f64) -> Self {
        Canvas { lo, hi, size, body: String::new() }
    }

    fn x(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo) * self.size
    }

    fn y(&self, v: f64) -> f64 {
        self.size - self.x(v)
    }

    fn r(&self, v: f64) -> f64 {
        v / (self.hi - self.lo) * self.size
    }

    fn circle(&mut self, c: [f64; 2], r: f64, style: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" {style}/>"#,
            self.x(c[0]),
            self.y(c[1]),
            self.r(r)
        );
    }

    fn polyline(&mut self, pts: &[[f64; 2]], color: &str) {
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", self.x(p[0]), self.y(p[1]))).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1" stroke-opacity="0.5"/>"#,
            coords.join(" ")
        );
    }

    fn text(&mut self, at: [f64; 2], s: &str) {
        let _ = writeln!(self.body, r#"<text x="{:.1}" y="{:.1}" font-size="12" font-family="sans-serif">{s}</text>"#, at[0], at[1]);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            s = self.size
        )
    }
}

/// Overlay of every episode path, coloured by outcome symbol.
pub fn rollout_svg(report: &RolloutReport) -> String {
    let mut c = Canvas::new(-1.4, 1.4, 600.0);
    match report.env {
        EnvKind::Multiroute => c.circle(MULTIROUTE_TARGET, MULTIROUTE_TARGET_RADIUS, r##"fill="#ccc" stroke="black""##),
        EnvKind::Sequencing => {
            c.circle(GOAL_A, GOAL_RADIUS, r##"fill="#eee" stroke="black""##);
            c.circle(GOAL_B, GOAL_RADIUS, r##"fill="#eee" stroke="black""##);
        }
    }
    let symbols: Vec<&String> = report.symbol_counts.keys().collect();
    for ep in &report.trajectories {
        let i = symbols.iter().position(|s| **s == ep.symbol).unwrap_or(0);
        c.polyline(&ep.positions, PALETTE[i % PALETTE.len()]);
    }
    for (i, s) in symbols.iter().enumerate() {
        let n = report.symbol_counts[*s];
        let label = format!(r#"<tspan fill="{}">{s}: {n}</tspan>"#, PALETTE[i % PALETTE.len()]);
        c.text([10.0, 20.0 + 16.0 * i as f64], &label);
    }
    c.finish()
}

/// Scatter of 2-D samples, one colour per group.
pub fn scatter_svg(groups: &[(&str, &[Vec<f64>])], lo: f64, hi: f64) -> String {
    let mut c = Canvas::new(lo, hi, 600.0);
    let rad = (hi - lo) / 400.0;
    for (gi, (name, pts)) in groups.iter().enumerate() {
        let color = PALETTE[gi % PALETTE.len()];
        for p in pts.iter() {
            let y = p.get(1).copied().unwrap_or(0.0);
            c.circle([p[0], y], rad, &format!(r#"fill="{color}" fill-opacity="0.4""#));
        }
        c.text([10.0, 20.0 + 16.0 * gi as f64], &format!(r#"<tspan fill="{color}">{name}</tspan>"#));
    }
    c.finish()
}
