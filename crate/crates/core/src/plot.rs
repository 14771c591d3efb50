//! Static SVG plots: schedule curves, accuracy vs retraining budget, and
//! accuracy vs sparsity.

use crate::error::{Error, Result};
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Schedule,
    AccVsBudget,
    AccVsSparsity,
}

impl std::str::FromStr for PlotKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule" => Ok(PlotKind::Schedule),
            "acc_vs_budget" => Ok(PlotKind::AccVsBudget),
            "acc_vs_sparsity" => Ok(PlotKind::AccVsSparsity),
            other => Err(Error::Config(format!("unknown plot kind '{other}'"))),
        }
    }
}

/// One named line with optional per-point error bars.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub err: Vec<f64>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
            err: Vec::new(),
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else if v.abs() >= 0.01 {
        format!("{v:.3}")
            .trim_end_matches('0')
            .trim_end_matches('.')
            .to_string()
    } else {
        format!("{v:e}")
    }
}

/// Render series to an SVG document. `x_ticks`: exact tick positions, or
/// None for an automatic spread.
pub fn render_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_ticks: Option<&[f64]>,
) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Data("nothing to plot".into()));
    }
    let pts = || series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    for (s, &(_, y)) in series.iter().flat_map(|s| s.err.iter().zip(&s.points)) {
        y0 = y0.min(y - s);
        y1 = y1.max(y + s);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad_y = (y1 - y0) * 0.05;
    y0 -= pad_y;
    y1 += pad_y;

    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y0) / (y1 - y0) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .ok();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).ok();
    writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="15" font-family="sans-serif">{title}</text>"#,
        WIDTH / 2.0
    )
    .ok();
    // axes
    writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    )
    .ok();
    writeln!(
        svg,
        r#"<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{}" stroke="black"/>"#,
        HEIGHT - MARGIN_B
    )
    .ok();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12" font-family="sans-serif">{x_label}</text>"#,
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0
    )
    .ok();
    writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" font-size="12" font-family="sans-serif" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    )
    .ok();

    // x ticks
    let auto: Vec<f64> = (0..=5).map(|i| x0 + (x1 - x0) * i as f64 / 5.0).collect();
    let ticks: &[f64] = x_ticks.unwrap_or(&auto);
    for &t in ticks {
        let x = px(t);
        writeln!(
            svg,
            r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#,
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        )
        .ok();
        writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle" font-size="11" font-family="sans-serif" class="xtick">{}</text>"#,
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t)
        )
        .ok();
    }
    // y ticks
    for i in 0..=5 {
        let v = y0 + (y1 - y0) * i as f64 / 5.0;
        let y = py(v);
        writeln!(
            svg,
            r#"<line x1="{}" y1="{y}" x2="{MARGIN_L}" y2="{y}" stroke="black"/>"#,
            MARGIN_L - 5.0
        )
        .ok();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="11" font-family="sans-serif">{}</text>"#,
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(v)
        )
        .ok();
    }

    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#,
            pts.join(" ")
        )
        .ok();
        for (&e, &(x, y)) in s.err.iter().zip(&s.points) {
            if e > 0.0 {
                writeln!(
                    svg,
                    r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="{color}"/>"#,
                    px(x),
                    py(y - e),
                    py(y + e)
                )
                .ok();
            }
        }
        // legend
        let ly = MARGIN_T + 16.0 * si as f64 + 8.0;
        writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 30.0
        )
        .ok();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" font-family="sans-serif">{}</text>"#,
            WIDTH - MARGIN_R + 34.0,
            ly + 4.0,
            s.label
        )
        .ok();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Plot learning-rate schedules (one series per schedule, per-epoch values).
pub fn plot_schedules(schedules: &[(&str, &crate::schedule::Schedule)]) -> Result<String> {
    let series: Vec<Series> = schedules
        .iter()
        .map(|(label, s)| {
            let pts = s
                .emit()
                .into_iter()
                .map(|(_, step, lr)| (step as f64 / s.steps_per_epoch as f64, lr))
                .collect();
            Series::new(label.to_string(), pts)
        })
        .collect();
    render_svg("learning rate schedules", "epoch", "learning rate", &series, None)
}

/// Accuracy vs retraining budget with exact budget ticks.
pub fn plot_acc_vs_budget(series: &[Series], budgets: &[f64]) -> Result<String> {
    render_svg(
        "accuracy vs retraining budget",
        "retraining epochs",
        "test accuracy",
        series,
        Some(budgets),
    )
}

pub fn plot_acc_vs_sparsity(series: &[Series]) -> Result<String> {
    render_svg("accuracy vs sparsity", "sparsity", "test accuracy", series, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_ft, build_original, Profile};

    #[test]
    fn ft_plot_is_a_single_horizontal_line() {
        let orig = build_original(Profile::Cifar, 2).unwrap();
        let ft = build_ft(&orig, 5).unwrap();
        let svg = plot_schedules(&[("ft", &ft)]).unwrap();
        assert!(svg.contains("<svg"));
        let poly = svg
            .lines()
            .find(|l| l.contains("<polyline"))
            .expect("one polyline");
        let points: Vec<&str> = poly
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>")
            .split_whitespace()
            .collect();
        let ys: Vec<&str> = points.iter().map(|p| p.split(',').nth(1).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[0] == w[1]), "constant lr must be flat");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(render_svg("t", "x", "y", &[], None).is_err());
        assert!(plot_acc_vs_budget(&[], &[]).is_err());
    }

    #[test]
    fn budget_ticks_are_exact() {
        let s = [Series::new("clr", vec![(20.0, 0.8), (40.0, 0.85), (80.0, 0.9)])];
        let svg = plot_acc_vs_budget(&s, &[20.0, 40.0, 80.0]).unwrap();
        let ticks: Vec<&str> = svg
            .lines()
            .filter(|l| l.contains("class=\"xtick\""))
            .collect();
        assert_eq!(ticks.len(), 3);
        assert!(ticks[0].contains(">20<"));
        assert!(ticks[1].contains(">40<"));
        assert!(ticks[2].contains(">80<"));
    }
}
