//! Minimal SVG charts: lines, scatter, heatmap.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 360.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 45.0); // left, right, top, bottom
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

impl Series {
    pub fn new(name: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            points,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

pub enum Mark {
    Line,
    Dot,
    Bar,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub mark: Mark,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(t);
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str, mark: Mark) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            series: Vec::new(),
            mark,
        }
    }

    pub fn with(mut self, s: Series) -> Self {
        self.series.push(s);
        self
    }

    /// Chart body as a group offset by `dy`.
    fn group(&self, dy: f64) -> String {
        let (ml, mr, mt, mb) = MARGIN;
        let (pw, ph) = (W - ml - mr, H - mt - mb);
        let pts = || self.series.iter().flat_map(|s| s.points.iter());
        let (x0, x1) = bounds(pts().map(|p| p.0));
        let (mut y0, mut y1) = bounds(pts().map(|p| p.1));
        if matches!(self.mark, Mark::Bar) {
            y0 = y0.min(0.0);
            y1 = y1.max(0.0);
        }
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
        let mut g = format!("<g transform=\"translate(0,{dy})\">\n");
        let _ = writeln!(
            g,
            "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
            W / 2.0,
            esc(&self.title)
        );
        let _ = writeln!(
            g,
            "<rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
        );
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                g,
                "<line x1=\"{x:.1}\" y1=\"{}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"#444\"/><text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
                mt + ph,
                mt + ph + 4.0,
                mt + ph + 15.0,
                fmt_tick(t)
            );
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(
                g,
                "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{ml}\" y2=\"{y:.1}\" stroke=\"#444\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"10\">{}</text>",
                ml - 4.0,
                ml - 6.0,
                y + 3.0,
                fmt_tick(t)
            );
        }
        let _ = writeln!(
            g,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            ml + pw / 2.0,
            H - 8.0,
            esc(&self.x_label)
        );
        let _ = writeln!(
            g,
            "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>",
            mt + ph / 2.0,
            mt + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            match self.mark {
                Mark::Line => {
                    let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
                    let dash = if s.dashed { " stroke-dasharray=\"6 4\"" } else { "" };
                    let _ = writeln!(
                        g,
                        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
                        path.join(" ")
                    );
                }
                Mark::Dot => {
                    for &(x, y) in &s.points {
                        let _ = writeln!(
                            g,
                            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.5\" fill=\"{colour}\" fill-opacity=\"0.5\"/>",
                            sx(x),
                            sy(y)
                        );
                    }
                }
                Mark::Bar => {
                    let n = s.points.len().max(1) as f64;
                    let bw = (pw / n * 0.8).max(1.0);
                    let base = sy(0.0);
                    for &(x, y) in &s.points {
                        let top = sy(y).min(base);
                        let _ = writeln!(
                            g,
                            "<rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{colour}\"/>",
                            sx(x) - bw / 2.0,
                            (sy(y) - base).abs()
                        );
                    }
                }
            }
            let _ = writeln!(
                g,
                "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{}</text>",
                ml + 8.0,
                mt + 14.0 + 13.0 * i as f64,
                esc(&s.name)
            );
        }
        g.push_str("</g>\n");
        g
    }

    pub fn render(&self) -> String {
        document(H, &self.group(0.0))
    }
}

fn document(height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{height}\" viewBox=\"0 0 {W} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Charts stacked vertically in one document.
pub fn stacked(charts: &[Chart]) -> String {
    let body: String = charts.iter().enumerate().map(|(i, c)| c.group(i as f64 * H)).collect();
    document(H * charts.len() as f64, &body)
}

fn ramp(t: f64) -> String {
    // dark blue -> teal -> yellow
    const STOPS: [(f64, [f64; 3]); 3] = [(0.0, [40.0, 20.0, 100.0]), (0.5, [30.0, 150.0, 140.0]), (1.0, [250.0, 230.0, 40.0])];
    let t = t.clamp(0.0, 1.0);
    let i = if t <= 0.5 { 0 } else { 1 };
    let (a, ca) = STOPS[i];
    let (b, cb) = STOPS[i + 1];
    let u = (t - a) / (b - a);
    let c: Vec<u8> = (0..3).map(|k| (ca[k] + u * (cb[k] - ca[k])).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// `grid[row][col]`, rows drawn top to bottom.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, grid: &[Vec<f64>]) -> String {
    let (ml, mr, mt, mb) = MARGIN;
    let rows = grid.len().max(1);
    let cols = grid.first().map_or(1, Vec::len).max(1);
    let (pw, ph) = (W - ml - mr - 60.0, H - mt - mb);
    let (cw, ch) = (pw / cols as f64, ph / rows as f64);
    let (lo, hi) = grid
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut g = String::new();
    let _ = writeln!(
        g,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        esc(title)
    );
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let _ = writeln!(
                g,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                ml + c as f64 * cw,
                mt + r as f64 * ch,
                cw + 0.05,
                ch + 0.05,
                ramp((v - lo) / span)
            );
        }
    }
    let _ = writeln!(
        g,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        ml + pw / 2.0,
        H - 8.0,
        esc(x_label)
    );
    let _ = writeln!(
        g,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {})\">{}</text>",
        mt + ph / 2.0,
        mt + ph / 2.0,
        esc(y_label)
    );
    let lx = ml + pw + 20.0;
    for i in 0..20 {
        let t = 1.0 - i as f64 / 19.0;
        let _ = writeln!(
            g,
            "<rect x=\"{lx}\" y=\"{:.2}\" width=\"14\" height=\"{:.2}\" fill=\"{}\"/>",
            mt + i as f64 * ph / 20.0,
            ph / 20.0 + 0.05,
            ramp(t)
        );
    }
    let _ = writeln!(g, "<text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>", lx + 16.0, mt + 8.0, fmt_tick(hi));
    let _ = writeln!(g, "<text x=\"{}\" y=\"{}\" font-size=\"10\">{}</text>", lx + 16.0, mt + ph, fmt_tick(lo));
    document(H, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let grid = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let svg = heatmap("t", "x", "y", &grid);
        let cells = svg.matches("<rect x=").count() - 20;
        assert_eq!(cells, 6);
    }

    #[test]
    fn scatter_draws_every_point() {
        let pts: Vec<(f64, f64)> = (0..17).map(|i| (i as f64, (i * i) as f64)).collect();
        let svg = Chart::new("s", "x", "y", Mark::Dot).with(Series::new("p", pts)).render();
        assert_eq!(svg.matches("<circle").count(), 17);
    }

    #[test]
    fn labels_are_escaped() {
        let svg = Chart::new("a < b & c", "x", "y", Mark::Line).render();
        assert!(svg.contains("a &lt; b &amp; c"));
    }

    #[test]
    fn ticks_cover_range() {
        let t = ticks(0.0, 91.0);
        assert!(t.first().unwrap() >= &0.0 && t.last().unwrap() <= &91.0);
        assert!(t.len() >= 4);
    }
}
