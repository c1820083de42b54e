//! Deterministic SVG line charts with a shaded band per series.
//!
//! Output depends only on the input numbers: fixed canvas, fixed palette,
//! fixed decimal formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use offoab_core::{Error, Result};

use crate::metrics::MetricsRow;
use crate::variance_lab::VarianceRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Centre line and band half-width at each x.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub center: Vec<f64>,
    pub spread: Vec<f64>,
}

/// Mean and population std over runs that share their x grid.
pub fn mean_band(label: &str, runs: &[Vec<(f64, f64)>]) -> Result<Series> {
    let first = runs.first().ok_or_else(|| Error::input("runs", format!("series `{label}` has no runs")))?;
    let x: Vec<f64> = first.iter().map(|p| p.0).collect();
    for r in runs {
        if r.len() != x.len() || r.iter().zip(&x).any(|(p, x)| p.0 != *x) {
            return Err(Error::input("runs", format!("series `{label}`: runs disagree on x values")));
        }
    }
    let n = runs.len() as f64;
    let mut center = Vec::with_capacity(x.len());
    let mut spread = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let m = runs.iter().map(|r| r[k].1).sum::<f64>() / n;
        let v = runs.iter().map(|r| (r[k].1 - m).powi(2)).sum::<f64>() / n;
        center.push(m);
        spread.push(v.sqrt());
    }
    Ok(Series { label: label.into(), x, center, spread })
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for k in 0..s.x.len() {
            let (lo, hi) = (s.center[k] - s.spread[k], s.center[k] + s.spread[k]);
            if !(lo.is_finite() && hi.is_finite()) {
                continue;
            }
            x0 = x0.min(s.x[k]);
            x1 = x1.max(s.x[k]);
            y0 = y0.min(lo);
            y1 = y1.max(hi);
        }
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    (x0, x1, y0, y1)
}

/// Renders series onto one chart. Non-finite points are skipped.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::input("series", "nothing to plot"));
    }
    let (l, r, t, b) = MARGIN;
    let (x0, x1, y0, y1) = bounds(series);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (WIDTH - l - r);
    let py = |y: f64| HEIGHT - b - (y - y0) / (y1 - y0) * (HEIGHT - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{:.2},{:.2}V{:.2}H{:.2}" fill="none" stroke="black"/>"#,
        l,
        t,
        HEIGHT - b,
        WIDTH - r
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, px(fx), HEIGHT - b + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, l - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<usize> = (0..ser.x.len())
            .filter(|&j| (ser.center[j] - ser.spread[j]).is_finite() && (ser.center[j] + ser.spread[j]).is_finite())
            .collect();
        if !pts.is_empty() {
            let mut band = String::new();
            for &j in &pts {
                let _ = write!(band, "{:.2},{:.2} ", px(ser.x[j]), py(ser.center[j] + ser.spread[j]));
            }
            for &j in pts.iter().rev() {
                let _ = write!(band, "{:.2},{:.2} ", px(ser.x[j]), py(ser.center[j] - ser.spread[j]));
            }
            let _ = writeln!(s, r#"<polygon points="{}" fill="{colour}" fill-opacity="0.2" stroke="none"/>"#, band.trim_end());
            let line: Vec<String> = pts.iter().map(|&j| format!("{:.2},{:.2}", px(ser.x[j]), py(ser.center[j]))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#, line.join(" "));
        }
        let ly = t + 14.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{colour}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            l + 10.0,
            ly,
            l + 30.0,
            ly,
            l + 36.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Evaluation return against timestep, one band per group of seeds.
pub fn returns_plot(groups: &[(String, Vec<Vec<MetricsRow>>)]) -> Result<String> {
    if groups.is_empty() {
        return Err(Error::input("metrics", "no metrics files given"));
    }
    let series = groups
        .iter()
        .map(|(label, runs)| {
            let pts: Vec<Vec<(f64, f64)>> =
                runs.iter().map(|r| r.iter().map(|m| (m.timestep as f64, m.eval_mean_return)).collect()).collect();
            mean_band(label, &pts)
        })
        .collect::<Result<Vec<_>>>()?;
    render_svg("Evaluation return", "environment steps", "mean return", &series)
}

/// `log10` gradient variance against timestep, one band per baseline.
pub fn variance_plot(rows: &[VarianceRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::input("variance", "no variance rows given"));
    }
    // baseline -> seed -> points, ordered for determinism.
    let mut by: BTreeMap<String, BTreeMap<u64, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        by.entry(r.baseline.name().to_string())
            .or_default()
            .entry(r.seed)
            .or_default()
            .push((r.timestep as f64, r.log10_variance));
    }
    let series = by
        .into_iter()
        .map(|(label, seeds)| {
            let mut runs: Vec<Vec<(f64, f64)>> = seeds.into_values().collect();
            runs.iter_mut().for_each(|r| r.sort_by(|a, b| a.0.total_cmp(&b.0)));
            mean_band(&label, &runs)
        })
        .collect::<Result<Vec<_>>>()?;
    render_svg("Gradient variance", "environment steps", "log10 variance", &series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_run_has_zero_width_band() {
        let s = mean_band("a", &[vec![(1.0, 2.0), (2.0, 3.0)]]).unwrap();
        assert_eq!(s.spread, vec![0.0, 0.0]);
    }

    #[test]
    fn band_is_population_std() {
        let s = mean_band("a", &[vec![(1.0, 1.0)], vec![(1.0, 3.0)]]).unwrap();
        assert_eq!((s.center[0], s.spread[0]), (2.0, 1.0));
    }

    #[test]
    fn mismatched_grids_and_empty_input_are_errors() {
        assert!(mean_band("a", &[vec![(1.0, 1.0)], vec![(2.0, 1.0)]]).is_err());
        assert!(mean_band("a", &[]).is_err());
        assert!(render_svg("t", "x", "y", &[]).is_err());
        assert!(returns_plot(&[]).is_err());
        assert!(variance_plot(&[]).is_err());
    }

    #[test]
    fn rendering_is_stable_and_escaped() {
        let s = mean_band("a<b", &[vec![(0.0, 1.0), (1.0, f64::NEG_INFINITY), (2.0, 0.5)]]).unwrap();
        let one = render_svg("t", "x", "y", &[s.clone()]).unwrap();
        assert_eq!(one, render_svg("t", "x", "y", &[s]).unwrap());
        assert!(one.contains("a&lt;b"));
        assert!(!one.contains("inf") && !one.contains("NaN"));
    }
}
