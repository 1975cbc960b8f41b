//! Tidy plot data and minimal SVG line charts.

use std::fmt::Write as _;

use crate::io::opt;
use crate::metrics::{summarize, EnsembleSummary};

pub const PLOT_HEADER: &str = "day,series_name,value,q1,q3";

#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub day: i64,
    pub value: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<PlotPoint>,
}

impl PlotSeries {
    pub fn line(name: &str, days: impl IntoIterator<Item = i64>, values: &[Option<f64>]) -> Self {
        Self {
            name: name.into(),
            points: days
                .into_iter()
                .zip(values)
                .map(|(day, &value)| PlotPoint {
                    day,
                    value,
                    q1: None,
                    q3: None,
                })
                .collect(),
        }
    }

    /// Per-day median and quartiles across replicas.
    pub fn band(name: &str, days: impl IntoIterator<Item = i64>, replicas: &[Vec<Option<f64>>]) -> Self {
        let points = days
            .into_iter()
            .enumerate()
            .map(|(t, day)| {
                let column: Vec<Option<f64>> = replicas.iter().map(|r| r.get(t).copied().flatten()).collect();
                let EnsembleSummary { median, q1, q3, .. } = summarize(&column, &[]);
                PlotPoint {
                    day,
                    value: median,
                    q1,
                    q3,
                }
            })
            .collect();
        Self {
            name: name.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
    /// Horizontal reference line, e.g. R = 1.
    pub reference: Option<f64>,
}

impl Figure {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{PLOT_HEADER}\n");
        for s in &self.series {
            for p in &s.points {
                let _ = writeln!(out, "{},{},{},{},{}", p.day, s.name, opt(p.value), opt(p.q1), opt(p.q3));
            }
        }
        out
    }

    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 360.0;
        const M: f64 = 48.0;
        const COLORS: [&str; 6] = ["#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];

        let values = self
            .series
            .iter()
            .flat_map(|s| &s.points)
            .flat_map(|p| [p.value, p.q1, p.q3])
            .flatten()
            .chain(self.reference)
            .filter(|v| v.is_finite());
        let (mut y0, mut y1) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let days = self.series.iter().flat_map(|s| &s.points).map(|p| p.day);
        let (x0, x1) = days.fold((i64::MAX, i64::MIN), |(a, b), d| (a.min(d), b.max(d)));
        if !y0.is_finite() {
            (y0, y1) = (0.0, 1.0);
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let y0 = y0.min(0.0);
        let (x0, x1) = if x0 > x1 {
            (0.0, 1.0)
        } else {
            (x0 as f64, (x1.max(x0 + 1)) as f64)
        };
        let sx = |d: f64| M + (d - x0) / (x1 - x0) * (W - 2.0 * M);
        let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            svg,
            r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
            H - M,
            W - M
        );
        for (v, anchor_y) in [(y0, H - M), (y1, M)] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{anchor_y:.1}" text-anchor="end">{v:.2}</text>"#,
                M - 4.0
            );
        }
        for (d, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{d}</text>"#,
                sx(d),
                H - M + 14.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(&self.y_label)
        );
        if let Some(r) = self.reference {
            let _ = writeln!(
                svg,
                r#"<line x1="{M}" x2="{}" y1="{y:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="4 3"/>"#,
                W - M,
                y = sy(r)
            );
        }
        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let band: Vec<&PlotPoint> = s.points.iter().filter(|p| p.q1.is_some() && p.q3.is_some()).collect();
            if band.len() > 1 {
                let mut d = String::new();
                for (i, p) in band.iter().enumerate() {
                    let _ = write!(
                        d,
                        "{}{:.2} {:.2} ",
                        if i == 0 { 'M' } else { 'L' },
                        sx(p.day as f64),
                        sy(p.q3.unwrap())
                    );
                }
                for p in band.iter().rev() {
                    let _ = write!(d, "L{:.2} {:.2} ", sx(p.day as f64), sy(p.q1.unwrap()));
                }
                let _ = writeln!(
                    svg,
                    r#"<path d="{}Z" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                    d
                );
            }
            for run in s.points.split(|p| p.value.is_none_or(|v| !v.is_finite())) {
                if run.len() < 2 {
                    continue;
                }
                let pts: Vec<String> = run
                    .iter()
                    .map(|p| format!("{:.2},{:.2}", sx(p.day as f64), sy(p.value.unwrap())))
                    .collect();
                let _ = writeln!(
                    svg,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                    pts.join(" ")
                );
            }
            let ly = M + 14.0 * k as f64;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
                W - M - 4.0,
                escape(&s.name)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
