//! Static SVG line charts. Output is a pure function of the input series,
//! so charts can be regenerated offline from the CSV artifacts.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// One labeled line, optionally wrapped in a shaded min..max band.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    /// (x, y), ascending in x.
    pub points: Vec<(f64, f64)>,
    /// (x, lo, hi) envelope, same x grid as `points`.
    pub band: Option<Vec<(f64, f64, f64)>>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 78.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 46.0;
const MARGIN_B: f64 = 58.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf",
    "#7f7f7f", "#bcbd22", "#e377c2",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick step of the form {1, 2, 2.5, 5} x 10^k giving about `target` ticks.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for m in [1.0, 2.0, 2.5, 5.0, 10.0] {
        let step = m * mag;
        if span / step <= target as f64 {
            return step;
        }
    }
    10.0 * mag
}

fn ticks(lo: f64, hi: f64, target: usize) -> (Vec<f64>, f64) {
    let step = nice_step(hi - lo, target);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut v = first;
    while v <= hi + step * 1e-9 {
        // snap near-zero ticks so labels do not read "-0"
        out.push(if v.abs() < step * 1e-9 { 0.0 } else { v });
        v += step;
    }
    (out, step)
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i32).clamp(0, 6) as usize
    };
    format!("{v:.decimals$}")
}

struct Frame {
    x_lo: f64,
    x_hi: f64,
    y_lo: f64,
    y_hi: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        MARGIN_L + (v - self.x_lo) / (self.x_hi - self.x_lo) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN_B
            - (v - self.y_lo) / (self.y_hi - self.y_lo) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Render labeled lines with optional bands into a standalone SVG document.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::invalid("chart needs at least one data point"));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        if let Some(band) = &s.band {
            if band.len() != s.points.len() {
                return Err(Error::invalid(format!(
                    "series {} band length mismatch",
                    s.label
                )));
            }
            for &(x, lo, hi) in band {
                xs.push(x);
                ys.extend([lo, hi]);
            }
        }
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.iter().chain(&ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("chart values must be finite"));
    }
    let (mut x_lo, mut x_hi) = min_max(&xs);
    let (mut y_lo, mut y_hi) = min_max(&ys);
    if x_lo == x_hi {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    if y_lo == y_hi {
        y_lo -= 1.0;
        y_hi += 1.0;
    }
    let pad = (y_hi - y_lo) * 0.06;
    let frame = Frame { x_lo, x_hi, y_lo: y_lo - pad, y_hi: y_hi + pad };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">"
    );
    let _ = writeln!(svg, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        xml_escape(title)
    );

    // gridlines and axis labels
    let (x_ticks, x_step) = ticks(frame.x_lo, frame.x_hi, 7);
    let (y_ticks, y_step) = ticks(frame.y_lo, frame.y_hi, 6);
    for &t in &x_ticks {
        let x = frame.x(t);
        let _ = writeln!(
            svg,
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>",
            MARGIN_T,
            HEIGHT - MARGIN_B
        );
        let _ = writeln!(
            svg,
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\">{}</text>",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t, x_step)
        );
    }
    for &t in &y_ticks {
        let y = frame.y(t);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>",
            MARGIN_L,
            WIDTH - MARGIN_R
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\">{}</text>",
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(t, y_step)
        );
    }
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.2}\" height=\"{:.2}\" \
         fill=\"none\" stroke=\"#333333\"/>",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\">{}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 14.0,
        xml_escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text x=\"20\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 20 {:.2})\">{}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        xml_escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(band) = &s.band {
            if band.len() > 1 {
                let mut pts = String::new();
                for &(x, _, hi) in band {
                    let _ = write!(pts, "{:.2},{:.2} ", frame.x(x), frame.y(hi));
                }
                for &(x, lo, _) in band.iter().rev() {
                    let _ = write!(pts, "{:.2},{:.2} ", frame.x(x), frame.y(lo));
                }
                let _ = writeln!(
                    svg,
                    "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" \
                     stroke=\"none\"/>",
                    pts.trim_end()
                );
            }
        }
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                frame.x(x),
                frame.y(y)
            );
        } else {
            let mut pts = String::new();
            for &(x, y) in &s.points {
                let _ = write!(pts, "{:.2},{:.2} ", frame.x(x), frame.y(y));
            }
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.8\"/>",
                pts.trim_end()
            );
        }
    }

    // legend, one row per series, inside the top-left corner
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MARGIN_T + 16.0 + i as f64 * 18.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"{color}\" stroke-width=\"3\"/>",
            MARGIN_L + 10.0,
            MARGIN_L + 34.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">{}</text>",
            MARGIN_L + 40.0,
            y + 4.0,
            xml_escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_series() -> Vec<Series> {
        vec![
            Series {
                label: "first".into(),
                points: vec![(0.0, 1.0), (50.0, 3.0), (100.0, 2.0)],
                band: Some(vec![(0.0, 0.5, 1.5), (50.0, 2.5, 3.5), (100.0, 1.5, 2.5)]),
            },
            Series {
                label: "second & <b>".into(),
                points: vec![(0.0, 0.0), (50.0, 1.0), (100.0, 4.0)],
                band: None,
            },
        ]
    }

    #[test]
    fn renders_every_series_and_escapes_labels() {
        let svg = line_chart("demo", "iteration", "value", &demo_series()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 1);
        assert!(svg.contains("second &amp; &lt;b&gt;"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn output_is_deterministic() {
        let a = line_chart("demo", "x", "y", &demo_series()).unwrap();
        let b = line_chart("demo", "x", "y", &demo_series()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(line_chart("t", "x", "y", &[]).is_err());
        let empty = Series { label: "e".into(), points: vec![], band: None };
        assert!(line_chart("t", "x", "y", &[empty]).is_err());
        let nan = Series {
            label: "n".into(),
            points: vec![(0.0, f64::NAN)],
            band: None,
        };
        assert!(line_chart("t", "x", "y", &[nan]).is_err());
    }

    #[test]
    fn single_point_series_renders_a_marker() {
        let one = Series { label: "dot".into(), points: vec![(3.0, 7.0)], band: None };
        let svg = line_chart("t", "x", "y", &[one]).unwrap();
        assert!(svg.contains("<circle"));
    }

    #[test]
    fn tick_steps_are_round_numbers() {
        let (ticks, step) = ticks(0.0, 5000.0, 7);
        assert_eq!(step, 1000.0);
        assert_eq!(ticks.first().copied(), Some(0.0));
        assert_eq!(ticks.last().copied(), Some(5000.0));
        let (_, fine) = ticks2(-0.05, 0.65);
        assert!(fine <= 0.25);
    }

    fn ticks2(lo: f64, hi: f64) -> (Vec<f64>, f64) {
        ticks(lo, hi, 6)
    }
}
