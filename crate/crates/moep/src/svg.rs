//! Minimal standalone SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        H - BOTTOM - (y - self.y0) / span * (H - TOP - BOTTOM)
    }

    fn axes(&self, s: &mut String, xlabel: &str, ylabel: &str) {
        let (l, r, t, b) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = write!(s, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let y = self.y0 + (self.y1 - self.y0) * i as f64 / 4.0;
            let py = self.py(y);
            let _ = write!(
                s,
                r##"<line x1="{l}" y1="{py}" x2="{r}" y2="{py}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{}</text>"##,
                l - 4.0,
                py + 4.0,
                trim(y)
            );
        }
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            (l + r) / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = write!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            (t + b) / 2.0,
            (t + b) / 2.0,
            escape(ylabel)
        );
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s.into()
    }
}

fn y_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let lo = lo.min(0.0);
    let hi = if hi > lo { hi * 1.05 } else { lo + 1.0 };
    (lo, hi)
}

/// Vertical bars with optional error bars and a horizontal reference line.
pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64, Option<f64>)], reference: Option<f64>) -> String {
    let (y0, y1) = y_range(bars.iter().map(|b| b.1 + b.2.unwrap_or(0.0)).chain(reference));
    let f = Frame {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0,
        y1,
    };
    let mut s = open(title);
    f.axes(&mut s, "", ylabel);
    let slot = f.px(1.0) - f.px(0.0);
    for (i, (label, v, err)) in bars.iter().enumerate() {
        let x = f.px(i as f64) + slot * 0.15;
        let (top, base) = (f.py(*v), f.py(0.0_f64.max(y0)));
        let _ = write!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            top.min(base),
            slot * 0.7,
            (base - top).abs(),
            PALETTE[i % PALETTE.len()]
        );
        if let Some(e) = err {
            let cx = x + slot * 0.35;
            let _ = write!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                f.py(v - e),
                f.py(v + e)
            );
        }
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(label)
        );
    }
    if let Some(r) = reference {
        let py = f.py(r);
        let _ = write!(
            s,
            r#"<line x1="{LEFT}" y1="{py:.1}" x2="{}" y2="{py:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            W - RIGHT
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline per series.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0));
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in xs {
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    let (y0, y1) = y_range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let f = Frame { x0, x1, y0, y1 };
    let mut s = open(title);
    f.axes(&mut s, xlabel, ylabel);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y)))
            .collect();
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        let ly = TOP + 12.0 * i as f64;
        let _ = write!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}">{}</text>"#,
            W - RIGHT - 90.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let b = bar_chart("t<1>", "acc", &[("a".into(), 0.5, Some(0.1)), ("b".into(), 0.7, None)], Some(0.25));
        assert!(b.starts_with("<svg") && b.trim_end().ends_with("</svg>"));
        assert!(b.contains("t&lt;1&gt;"));
        assert_eq!(b.matches("<rect").count(), 3);
        let l = line_chart("x", "step", "share", &[("e0".into(), vec![(0.0, 0.1), (1.0, 0.2)])]);
        assert_eq!(l.matches("<polyline").count(), 1);
        let empty = line_chart("x", "a", "b", &[]);
        assert!(empty.contains("</svg>"));
    }
}
