//! Standalone SVG charts for sweep outputs: line charts for training
//! curves and bar charts with error whiskers for per-strategy aggregates.
//! The files are self-contained (no scripts, no external fonts) so they
//! render anywhere; every plotted number also lives in the sweep CSVs.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 42.0;
const MARGIN_B: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// One named line of a line chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One labeled bar with a symmetric error whisker (`err` may be 0).
#[derive(Debug, Clone)]
pub struct Bar {
    pub label: String,
    pub value: f64,
    pub err: f64,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.001..100_000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Maps data values in [lo, hi] onto pixel coordinates in [a, b].
struct Scale {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Scale {
    fn new(mut lo: f64, mut hi: f64, a: f64, b: f64) -> Scale {
        if lo == hi {
            // Degenerate range: pad so the single value sits mid-axis.
            let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.5 };
            lo -= pad;
            hi += pad;
        }
        Scale { lo, hi, a, b }
    }

    fn map(&self, v: f64) -> f64 {
        self.a + (v - self.lo) / (self.hi - self.lo) * (self.b - self.a)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

fn svg_open(out: &mut String, title: &str) {
    writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">"
    )
    .expect("string write");
    writeln!(out, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>").expect("string write");
    writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        WIDTH / 2.0,
        escape(title)
    )
    .expect("string write");
}

fn axes(out: &mut String, x: &Scale, y: &Scale, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    )
    .expect("string write");
    for t in x.ticks(5) {
        let px = x.map(t);
        writeln!(
            out,
            "<line x1=\"{px}\" y1=\"{y0}\" x2=\"{px}\" y2=\"{}\" stroke=\"black\"/>\n<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            y0 + 4.0,
            y0 + 18.0,
            tick_label(t)
        )
        .expect("string write");
    }
    for t in y.ticks(5) {
        let py = y.map(t);
        writeln!(
            out,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{x0}\" y2=\"{py}\" stroke=\"black\"/>\n<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\">{}</text>",
            x0 - 4.0,
            x0 - 7.0,
            py + 4.0,
            tick_label(t)
        )
        .expect("string write");
    }
    writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    )
    .expect("string write");
    writeln!(
        out,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .expect("string write");
}

/// Renders one polyline per series with a legend. Series order fixes the
/// color assignment, so output bytes are deterministic.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    assert!(!series.is_empty(), "line_chart: no series");
    assert!(
        series.iter().any(|s| !s.points.is_empty()),
        "line_chart: all series empty"
    );
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x_lo, x_hi) = bounds(xs);
    let (y_lo, y_hi) = bounds(ys);
    let x = Scale::new(x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R);
    let y = Scale::new(y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T);

    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &x, &y, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(px, py)| format!("{:.2},{:.2}", x.map(px), y.map(py)))
            .collect();
        if pts.len() == 1 {
            let (px, py) = s.points[0];
            writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                x.map(px),
                y.map(py)
            )
            .expect("string write");
        } else if !pts.is_empty() {
            writeln!(
                out,
                "<polyline class=\"series\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            )
            .expect("string write");
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        writeln!(
            out,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN_R - 150.0,
            WIDTH - MARGIN_R - 130.0,
            WIDTH - MARGIN_R - 124.0,
            ly + 4.0,
            escape(&s.label)
        )
        .expect("string write");
    }
    out.push_str("</svg>\n");
    out
}

/// Renders one bar per entry with an error whisker where `err > 0`. The
/// y-range always includes zero so bar heights are comparable.
pub fn bar_chart(title: &str, y_label: &str, bars: &[Bar]) -> String {
    assert!(!bars.is_empty(), "bar_chart: no bars");
    let lo = bars
        .iter()
        .map(|b| b.value - b.err)
        .fold(0.0f64, f64::min);
    let hi = bars
        .iter()
        .map(|b| b.value + b.err)
        .fold(0.0f64, f64::max);
    let y = Scale::new(lo, hi, HEIGHT - MARGIN_B, MARGIN_T);
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let slot = (x1 - x0) / bars.len() as f64;
    let bar_w = slot * 0.6;

    let mut out = String::new();
    svg_open(&mut out, title);
    // The x axis is categorical; fake a unit scale for the frame.
    let x = Scale::new(0.0, bars.len() as f64, x0, x1);
    axes(&mut out, &x, &y, "", y_label);
    let base = y.map(0.0);
    for (i, b) in bars.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let cx = x0 + slot * (i as f64 + 0.5);
        let top = y.map(b.value);
        let (rect_y, rect_h) = if top <= base {
            (top, base - top)
        } else {
            (base, top - base)
        };
        writeln!(
            out,
            "<rect class=\"bar\" x=\"{:.2}\" y=\"{rect_y:.2}\" width=\"{bar_w:.2}\" height=\"{rect_h:.2}\" fill=\"{color}\"/>",
            cx - bar_w / 2.0
        )
        .expect("string write");
        if b.err > 0.0 {
            let e_lo = y.map(b.value - b.err);
            let e_hi = y.map(b.value + b.err);
            writeln!(
                out,
                "<g class=\"err\" stroke=\"black\"><line x1=\"{cx:.2}\" y1=\"{e_lo:.2}\" x2=\"{cx:.2}\" y2=\"{e_hi:.2}\"/><line x1=\"{:.2}\" y1=\"{e_lo:.2}\" x2=\"{:.2}\" y2=\"{e_lo:.2}\"/><line x1=\"{:.2}\" y1=\"{e_hi:.2}\" x2=\"{:.2}\" y2=\"{e_hi:.2}\"/></g>",
                cx - 5.0,
                cx + 5.0,
                cx - 5.0,
                cx + 5.0
            )
            .expect("string write");
        }
        writeln!(
            out,
            "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>",
            HEIGHT - MARGIN_B + 32.0,
            escape(&b.label)
        )
        .expect("string write");
    }
    out.push_str("</svg>\n");
    out
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        assert!(v.is_finite(), "plot value {v} is not finite");
        lo = lo.min(v);
        hi = hi.max(v);
    }
    assert!(lo.is_finite(), "no plot values");
    (lo, hi)
}
