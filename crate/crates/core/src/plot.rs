//! Minimal static SVG charts.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, Copy)]
struct Frame {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x: f64, y: f64, w: f64, h: f64, xs: (f64, f64), ys: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            if hi - lo < 1e-12 {
                (lo - 1.0, hi + 1.0)
            } else {
                let m = 0.05 * (hi - lo);
                (lo - m, hi + m)
            }
        };
        let ((x0, x1), (y0, y1)) = (pad(xs), pad(ys));
        Frame { x, y, w, h, x0, x1, y0, y1 }
    }

    fn px(&self, v: f64) -> f64 {
        self.x + (v - self.x0) / (self.x1 - self.x0) * self.w
    }

    fn py(&self, v: f64) -> f64 {
        self.y + self.h - (v - self.y0) / (self.y1 - self.y0) * self.h
    }

    fn axes(&self, out: &mut String, title: &str, xlabel: &str, ylabel: &str) {
        let _ = write!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x, self.y, self.w, self.h
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            self.x + self.w / 2.0,
            self.y - 8.0,
            escape(title)
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            self.x + self.w / 2.0,
            self.y + self.h + 30.0,
            escape(xlabel)
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">{}</text>"#,
            self.x - 38.0,
            self.y + self.h / 2.0,
            self.x - 38.0,
            self.y + self.h / 2.0,
            escape(ylabel)
        );
        for (v, anchor) in [(self.x0, "start"), (self.x1, "end")] {
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="{anchor}">{v:.3}</text>"#,
                self.px(v),
                self.y + self.h + 12.0
            );
        }
        for v in [self.y0, self.y1] {
            let _ = write!(
                out,
                r#"<text x="{:.1}" y="{:.1}" font-size="9" text-anchor="end">{v:.3}</text>"#,
                self.x - 4.0,
                self.py(v) + 3.0
            );
        }
    }
}

fn document(w: f64, h: f64, body: &str) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif"><rect width="100%" height="100%" fill="white"/>{body}</svg>
"#
    )
}

fn bounds<'a>(vals: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// One panel of polylines.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub lines: Vec<Vec<[f64; 2]>>,
}

/// Panels side by side, each with its own axes.
pub fn polyline_panels(panels: &[Panel]) -> String {
    let (pw, ph, m) = (260.0, 240.0, 60.0);
    let mut body = String::new();
    for (i, p) in panels.iter().enumerate() {
        let pts = || p.lines.iter().flatten();
        let xs = bounds(pts().map(|q| &q[0]));
        let ys = bounds(pts().map(|q| &q[1]));
        let f = Frame::new(m + i as f64 * (pw + m), 40.0, pw, ph, xs, ys);
        f.axes(&mut body, &p.title, "pc1", "pc2");
        for (j, line) in p.lines.iter().enumerate() {
            let coords: Vec<String> = line
                .iter()
                .map(|q| format!("{:.2},{:.2}", f.px(q[0]), f.py(q[1])))
                .collect();
            let _ = write!(
                body,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2" opacity="0.8"/>"#,
                coords.join(" "),
                color(j)
            );
        }
    }
    document(m + panels.len() as f64 * (pw + m), ph + 90.0, &body)
}

/// Grouped bars: one group per category, one bar per series.
pub fn bar_chart(title: &str, ylabel: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, m) = (120.0 * categories.len().max(1) as f64, 260.0, 60.0);
    let hi = bounds(series.iter().flat_map(|s| s.1.iter())).1.max(0.0);
    let f = Frame::new(m, 40.0, w, h, (0.0, 1.0), (0.0, if hi > 0.0 { hi } else { 1.0 }));
    let mut body = String::new();
    f.axes(&mut body, title, "", ylabel);
    let group = w / categories.len().max(1) as f64;
    let bar = group * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = m + c as f64 * group + group * 0.1;
        for (s, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(c).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let top = f.py(v);
            let _ = write!(
                body,
                r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + s as f64 * bar,
                bar * 0.95,
                (f.py(0.0) - top).max(0.0),
                color(s)
            );
        }
        let _ = write!(
            body,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            gx + group * 0.4,
            40.0 + h + 14.0,
            escape(cat)
        );
    }
    legend(&mut body, m + w + 10.0, series.iter().map(|s| s.0.as_str()));
    document(m + w + 130.0, h + 90.0, &body)
}

/// Labelled points.
pub fn scatter(title: &str, xlabel: &str, ylabel: &str, points: &[(String, f64, f64)]) -> String {
    let (w, h, m) = (360.0, 280.0, 60.0);
    let f = Frame::new(
        m,
        40.0,
        w,
        h,
        bounds(points.iter().map(|p| &p.1)),
        bounds(points.iter().map(|p| &p.2)),
    );
    let mut body = String::new();
    f.axes(&mut body, title, xlabel, ylabel);
    for (i, (label, x, y)) in points.iter().enumerate() {
        if !(x.is_finite() && y.is_finite()) {
            continue;
        }
        let _ = write!(
            body,
            r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="{}"/><text x="{:.1}" y="{:.1}" font-size="10">{}</text>"#,
            f.px(*x),
            f.py(*y),
            color(i),
            f.px(*x) + 7.0,
            f.py(*y) - 5.0,
            escape(label)
        );
    }
    document(m + w + 40.0, h + 90.0, &body)
}

fn legend<'a>(body: &mut String, x: f64, names: impl Iterator<Item = &'a str>) {
    for (i, n) in names.enumerate() {
        let y = 50.0 + 16.0 * i as f64;
        let _ = write!(
            body,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}" font-size="10">{}</text>"#,
            y - 9.0,
            color(i),
            x + 14.0,
            escape(n)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let s = scatter("t", "x", "y", &[("a".into(), 0.0, 1.0), ("b<".into(), 1.0, 0.0)]);
        assert!(s.starts_with("<svg") && s.contains("b&lt;") && s.matches("<circle").count() == 2);
        let b = bar_chart("t", "y", &["256".into(), "512".into()], &[("s".into(), vec![0.5, 0.7])]);
        assert_eq!(b.matches("<rect").count(), 1 + 1 + 2 + 1);
        let p = polyline_panels(&[Panel {
            title: "p".into(),
            lines: vec![vec![[0.0, 0.0], [1.0, 1.0]]],
        }]);
        assert_eq!(p.matches("<polyline").count(), 1);
    }
}
