//! Minimal SVG charts: line charts for training curves and a 2-D scatter
//! with a dataset overlay. Output is plain text with fixed number formatting
//! so identical inputs give identical files.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn of<'a>(values: impl Iterator<Item = &'a f64>) -> Range {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Range { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            let pad = lo.abs().max(1.0) * 0.05;
            return Range {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        Range { lo, hi }
    }

    fn padded(self, frac: f64) -> Range {
        let pad = (self.hi - self.lo) * frac;
        Range {
            lo: self.lo - pad,
            hi: self.hi + pad,
        }
    }
}

struct Frame {
    x: Range,
    y: Range,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.lo) / (self.x.hi - self.x.lo) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.lo) / (self.y.hi - self.y.lo) * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = f.x.lo + t * (f.x.hi - f.x.lo);
        let yv = f.y.lo + t * (f.y.hi - f.y.lo);
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            f.px(xv),
            H - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            MARGIN - 4.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - MARGIN - 150.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            W - MARGIN - 134.0,
            y,
            escape(l)
        );
    }
}

/// Line chart of one or more series. Non-finite points break the line.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let f = Frame {
        x: Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| &p.0))),
        y: Range::of(series.iter().flat_map(|s| s.points.iter().map(|p| &p.1))).padded(0.05),
    };
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_down = false;
                continue;
            }
            let _ = write!(d, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, f.px(x), f.py(y));
            pen_down = true;
        }
        if !d.is_empty() {
            let _ = writeln!(
                out,
                "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
                d.trim_end()
            );
        }
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            if x.is_finite() && y.is_finite() {
                let _ = writeln!(out, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", f.px(x), f.py(y));
            }
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    out
}

/// Scatter of generated samples (first two coordinates) over the training
/// data, with mode centers marked as crosses.
pub fn scatter(title: &str, data: &[Vec<f64>], samples: &[Vec<f64>], centers: Option<&[Vec<f64>]>) -> String {
    let xs = data
        .iter()
        .chain(samples)
        .chain(centers.unwrap_or(&[]))
        .filter_map(|r| r.first());
    let ys = data
        .iter()
        .chain(samples)
        .chain(centers.unwrap_or(&[]))
        .filter_map(|r| r.get(1));
    let xr = Range::of(xs).padded(0.05);
    let yr = Range::of(ys).padded(0.05);
    // Equal aspect so rings look like rings.
    let half = ((xr.hi - xr.lo) / (W - 2.0 * MARGIN)).max((yr.hi - yr.lo) / (H - 2.0 * MARGIN)) / 2.0;
    let (cx, cy) = ((xr.hi + xr.lo) / 2.0, (yr.hi + yr.lo) / 2.0);
    let f = Frame {
        x: Range {
            lo: cx - half * (W - 2.0 * MARGIN),
            hi: cx + half * (W - 2.0 * MARGIN),
        },
        y: Range {
            lo: cy - half * (H - 2.0 * MARGIN),
            hi: cy + half * (H - 2.0 * MARGIN),
        },
    };
    let mut out = String::new();
    open(&mut out, title);
    axes(&mut out, &f, "x0", "x1");
    let point = |r: &Vec<f64>| -> Option<(f64, f64)> {
        let (x, y) = (*r.first()?, r.get(1).copied().unwrap_or(0.0));
        (x.is_finite() && y.is_finite()).then(|| (f.px(x), f.py(y)))
    };
    out.push_str("<g fill=\"#1f77b4\" fill-opacity=\"0.35\">\n");
    for (x, y) in data.iter().filter_map(point) {
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\"/>");
    }
    out.push_str("</g>\n<g fill=\"#d62728\" fill-opacity=\"0.5\">\n");
    for (x, y) in samples.iter().filter_map(point) {
        let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"1.5\"/>");
    }
    out.push_str("</g>\n");
    if let Some(cs) = centers {
        out.push_str("<g stroke=\"black\" stroke-width=\"1.5\">\n");
        for (x, y) in cs.iter().filter_map(point) {
            let _ = writeln!(
                out,
                "<path d=\"M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}\"/>",
                x - 5.0,
                y - 5.0,
                x + 5.0,
                y + 5.0,
                x - 5.0,
                y + 5.0,
                x + 5.0,
                y - 5.0
            );
        }
        out.push_str("</g>\n");
    }
    legend(&mut out, &["training data", "generated"]);
    out.push_str("</svg>\n");
    out
}
