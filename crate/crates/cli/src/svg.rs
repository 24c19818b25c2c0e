//! Minimal SVG diagnostics: scatter, line and heatmap plots with axes and a legend.

use std::fmt::Write;

use ndarray::Array2;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    x: (f64, f64),
    y: (f64, f64),
}

impl Bounds {
    fn of<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Self {
        let mut b = Bounds {
            x: (f64::INFINITY, f64::NEG_INFINITY),
            y: (f64::INFINITY, f64::NEG_INFINITY),
        };
        for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            b.x = (b.x.0.min(x), b.x.1.max(x));
            b.y = (b.y.0.min(y), b.y.1.max(y));
        }
        b.x = widen(b.x);
        b.y = widen(b.y);
        b
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * plot_width()
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * plot_height()
    }
}

/// Non-empty range with a small pad; `(0, 1)` when there is no finite data.
fn widen((lo, hi): (f64, f64)) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let pad = if hi > lo {
        0.05 * (hi - lo)
    } else {
        0.5 * lo.abs().max(1.0)
    };
    (lo - pad, hi + pad)
}

fn plot_width() -> f64 {
    WIDTH - MARGIN_LEFT - MARGIN_RIGHT
}

fn plot_height() -> f64 {
    HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + plot_width() / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, b: &Bounds, x_label: &str, y_label: &str) {
    let (x0, y0) = (MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM);
    let _ = writeln!(
        s,
        r#"<rect x="{x0:.1}" y="{MARGIN_TOP:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        plot_width(),
        plot_height()
    );
    for i in 0..TICKS {
        let f = i as f64 / (TICKS - 1) as f64;
        let xv = b.x.0 + f * (b.x.1 - b.x.0);
        let yv = b.y.0 + f * (b.y.1 - b.y.0);
        let (px, py) = (b.px(xv), b.py(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.1}" y1="{y0:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{x0:.1}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_width() / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        MARGIN_TOP + plot_height() / 2.0,
        MARGIN_TOP + plot_height() / 2.0,
        escape(y_label)
    );
}

fn legend(s: &mut String, labels: &[&str]) {
    let x = WIDTH - MARGIN_RIGHT + 12.0;
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_TOP + 10.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            x + 15.0,
            y,
            escape(label)
        );
    }
}

pub fn scatter(title: &str, series: &[Series]) -> String {
    let b = Bounds::of(series.iter().flat_map(|s| &s.points));
    let mut s = open(title);
    axes(&mut s, &b, "x0", "x1");
    for (i, ser) in series.iter().enumerate() {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="0.5">"#, PALETTE[i % PALETTE.len()]);
        for &(x, y) in ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#, b.px(x), b.py(y));
        }
        s.push_str("</g>\n");
    }
    legend(&mut s, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Polylines with point markers; `log_y` plots `log10(y)` of positive values.
pub fn lines(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let transformed: Vec<Series> = series
        .iter()
        .map(|ser| Series {
            label: ser.label.clone(),
            points: ser
                .points
                .iter()
                .map(|&(x, y)| {
                    (
                        x,
                        if log_y {
                            if y > 0.0 {
                                y.log10()
                            } else {
                                f64::NAN
                            }
                        } else {
                            y
                        },
                    )
                })
                .collect(),
        })
        .collect();
    let b = Bounds::of(transformed.iter().flat_map(|s| &s.points));
    let mut s = open(title);
    let y_label = if log_y {
        format!("log10 {y_label}")
    } else {
        y_label.to_string()
    };
    axes(&mut s, &b, x_label, &y_label);
    for (i, ser) in transformed.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", b.px(x), b.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        for p in &pts {
            let (cx, cy) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{colour}"/>"#);
        }
    }
    legend(
        &mut s,
        &transformed.iter().map(|s| s.label.as_str()).collect::<Vec<_>>(),
    );
    s.push_str("</svg>\n");
    s
}

/// Linear blend through a dark-blue, teal, yellow ramp for `t` in [0, 1].
fn ramp(t: f64) -> String {
    const STOPS: [(f64, f64, f64); 3] = [(68.0, 1.0, 84.0), (33.0, 145.0, 140.0), (253.0, 231.0, 37.0)];
    let t = t.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (t.floor() as usize).min(STOPS.len() - 2);
    let f = t - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |x: f64, y: f64| (x + f * (y - x)).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// `values[[iy, ix]]` on the grid `(xs[ix], ys[iy])`, coloured by `log10(1 + v)`,
/// with `path` drawn on top. Non-finite cells are grey.
pub fn heatmap(title: &str, xs: &[f64], ys: &[f64], values: &Array2<f64>, path: &[(f64, f64)]) -> String {
    let corners = [(xs[0], ys[0]), (xs[xs.len() - 1], ys[ys.len() - 1])];
    let b = Bounds::of(corners.iter());
    let shade = |v: f64| (1.0 + v.max(0.0)).log10();
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).map(shade).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let cell_w = (b.px(xs[0] + step(xs)) - b.px(xs[0])).abs();
    let cell_h = (b.py(ys[0] + step(ys)) - b.py(ys[0])).abs();
    let mut s = open(title);
    for (iy, &y) in ys.iter().enumerate() {
        for (ix, &x) in xs.iter().enumerate() {
            let v = values[[iy, ix]];
            let fill = if v.is_finite() {
                ramp((shade(v) - lo) / span)
            } else {
                "#bbbbbb".to_string()
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                b.px(x) - cell_w / 2.0,
                b.py(y) - cell_h / 2.0,
                cell_w,
                cell_h
            );
        }
    }
    axes(&mut s, &b, "trajectory coordinate", "transverse coordinate");
    let pts: Vec<String> = path
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", b.px(x), b.py(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="white" stroke-width="1.5"/>"#,
        pts.join(" ")
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}">log10(1 + energy)</text>"#,
        WIDTH - MARGIN_RIGHT + 12.0,
        MARGIN_TOP + 10.0
    );
    for (i, label) in [format!("{lo:.3}"), format!("{hi:.3}")].iter().enumerate() {
        let y = MARGIN_TOP + 26.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}">{label}</text>"#,
            WIDTH - MARGIN_RIGHT + 12.0,
            y - 9.0,
            ramp(i as f64),
            WIDTH - MARGIN_RIGHT + 27.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn step(v: &[f64]) -> f64 {
    if v.len() < 2 {
        1.0
    } else {
        (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64
    }
}
