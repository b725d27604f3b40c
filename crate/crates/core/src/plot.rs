//! Averaged eigenspectra and difference curves, rendered as SVG with the
//! underlying series as CSV.
//!
//! The figure has two panels: the per-class averaged spectra on the left and
//! `avg(SZ) − avg(HC)` on the right. Output is a pure function of the input
//! values, so identical spectra always give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eigen::{difference_curve, group_average, Eigenspectrum};
use crate::ingest::Label;
use crate::{Error, Result};

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 420.0;
const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 300.0;
const TOP: f64 = 60.0;
const LEFT: [f64; 2] = [70.0, 550.0];
const SZ_COLOR: &str = "#c0392b";
const HC_COLOR: &str = "#2471a3";
const DIFF_COLOR: &str = "#222222";

/// Series behind one eigenspectrum figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPlot {
    pub avg_sz: Vec<f64>,
    pub avg_hc: Vec<f64>,
    pub difference: Vec<f64>,
    /// Spectra averaged into each class curve.
    pub n_sz: usize,
    pub n_hc: usize,
}

impl SpectrumPlot {
    /// Averages labeled spectra per class. Unlabeled spectra are ignored.
    pub fn from_spectra(spectra: &[Eigenspectrum]) -> Result<Self> {
        let avg_sz = group_average(spectra, Label::Sz)?;
        let avg_hc = group_average(spectra, Label::Hc)?;
        let difference = difference_curve(&avg_sz, &avg_hc)?;
        let count = |l| spectra.iter().filter(|s| s.label == Some(l)).count();
        Ok(SpectrumPlot {
            avg_sz,
            avg_hc,
            difference,
            n_sz: count(Label::Sz),
            n_hc: count(Label::Hc),
        })
    }

    pub fn len(&self) -> usize {
        self.difference.len()
    }

    pub fn is_empty(&self) -> bool {
        self.difference.is_empty()
    }

    /// `rank,avg_sz,avg_hc,difference` rows, ranks from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,avg_sz,avg_hc,difference\n");
        for j in 0..self.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                j + 1,
                self.avg_sz[j],
                self.avg_hc[j],
                self.difference[j]
            );
        }
        out
    }

    pub fn to_svg(&self, title: &str) -> String {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
            WIDTH / 2.0,
            escape(title)
        );

        let (lo, hi) = range(self.avg_sz.iter().chain(&self.avg_hc), false);
        let left = Panel::new(0, "averaged eigenspectra", lo, hi, self.len());
        left.frame(&mut svg);
        left.curve(&mut svg, "avg-SZ", &self.avg_sz, SZ_COLOR);
        left.curve(&mut svg, "avg-HC", &self.avg_hc, HC_COLOR);
        left.legend(
            &mut svg,
            &[
                (format!("SZ (n={})", self.n_sz), SZ_COLOR),
                (format!("HC (n={})", self.n_hc), HC_COLOR),
            ],
        );

        let (lo, hi) = range(self.difference.iter(), true);
        let right = Panel::new(1, "difference (SZ − HC)", lo, hi, self.len());
        right.frame(&mut svg);
        right.zero_line(&mut svg);
        right.curve(&mut svg, "difference", &self.difference, DIFF_COLOR);

        svg.push_str("</svg>\n");
        svg
    }

    /// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str, title: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let svg_path = dir.join(format!("{stem}.svg"));
        let csv_path = dir.join(format!("{stem}.csv"));
        fs::write(&svg_path, self.to_svg(title)).map_err(|e| Error::io(&svg_path, e))?;
        fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        Ok((svg_path, csv_path))
    }
}

/// Padded value range; `symmetric` centres it on zero.
fn range<'a>(values: impl Iterator<Item = &'a f64>, symmetric: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if symmetric {
        let m = lo.abs().max(hi.abs());
        let m = if m > 0.0 { m * 1.05 } else { 1.0 };
        return (-m, m);
    }
    lo = lo.min(0.0);
    let span = hi - lo;
    if span <= 0.0 {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi + 0.05 * span)
    }
}

struct Panel {
    x0: f64,
    lo: f64,
    hi: f64,
    n: usize,
    title: &'static str,
}

impl Panel {
    fn new(index: usize, title: &'static str, lo: f64, hi: f64, n: usize) -> Self {
        Panel {
            x0: LEFT[index],
            lo,
            hi,
            n,
            title,
        }
    }

    fn x(&self, rank: usize) -> f64 {
        let steps = (self.n.max(2) - 1) as f64;
        self.x0 + PANEL_W * rank as f64 / steps
    }

    fn y(&self, v: f64) -> f64 {
        TOP + PANEL_H * (self.hi - v) / (self.hi - self.lo)
    }

    fn frame(&self, svg: &mut String) {
        let _ = writeln!(
            svg,
            r#"<g class="panel"><text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            self.x0 + PANEL_W / 2.0,
            TOP - 10.0,
            escape(self.title)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{TOP}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##,
            self.x0
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                self.x0 - 4.0,
                self.x0,
                self.x0 - 7.0,
                y + 4.0,
                tick_label(v)
            );
        }
        let last = self.n.max(1);
        for rank in tick_ranks(last) {
            let x = self.x(rank - 1);
            let y = TOP + PANEL_H;
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{y:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{rank}</text>"##,
                y + 4.0,
                y + 18.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">eigenvalue rank</text></g>"#,
            self.x0 + PANEL_W / 2.0,
            TOP + PANEL_H + 38.0
        );
    }

    fn zero_line(&self, svg: &mut String) {
        let y = self.y(0.0);
        let _ = writeln!(
            svg,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#999" stroke-dasharray="4 3"/>"##,
            self.x0,
            self.x0 + PANEL_W
        );
    }

    fn curve(&self, svg: &mut String, id: &str, values: &[f64], color: &str) {
        let mut points = String::new();
        for (j, &v) in values.iter().enumerate() {
            if !points.is_empty() {
                points.push(' ');
            }
            let _ = write!(points, "{:.2},{:.2}", self.x(j), self.y(v));
        }
        let _ = writeln!(
            svg,
            r#"<polyline id="{id}" fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>"#
        );
    }

    fn legend(&self, svg: &mut String, entries: &[(String, &str)]) {
        let x = self.x0 + PANEL_W - 110.0;
        for (i, (text, color)) in entries.iter().enumerate() {
            let y = TOP + 18.0 + 18.0 * i as f64;
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{y:.2}">{}</text>"#,
                y - 4.0,
                x + 20.0,
                y - 4.0,
                x + 26.0,
                escape(text)
            );
        }
    }
}

/// About five evenly spaced ranks including 1 and `n`.
fn tick_ranks(n: usize) -> Vec<usize> {
    if n <= 5 {
        return (1..=n).collect();
    }
    let mut ticks: Vec<usize> = (0..5).map(|i| 1 + (n - 1) * i / 4).collect();
    ticks.dedup();
    ticks
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.2}");
        if s == "-0.00" {
            "0.00".into()
        } else {
            s
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
