//! Minimal SVG renderings for quick visual checks.

use std::fmt::Write as _;

use mollify_core::autodiff::Tensor;
use mollify_core::evalmetrics::DensityGrid;

const SIZE: f64 = 480.0;

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
    }
}

/// Scatter plot of 2-D points.
pub fn scatter(points: &Tensor) -> String {
    let n = points.rows();
    let (x0, x1) = extent((0..n).map(|i| points.get(i, 0)));
    let (y0, y1) = extent((0..n).map(|i| points.get(i, 1)));
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#);
    out.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..n {
        let px = (points.get(i, 0) - x0) / (x1 - x0) * SIZE;
        let py = SIZE - (points.get(i, 1) - y0) / (y1 - y0) * SIZE;
        write!(out, r#"<circle cx="{px:.2}" cy="{py:.2}" r="1.2" fill="black" fill-opacity="0.4"/>"#).unwrap();
    }
    out.push_str("</svg>\n");
    out
}

/// Grey-scale heat map of a density grid, darker is denser.
pub fn heatmap(density: &DensityGrid) -> String {
    let r = density.grid.resolution;
    let cell = SIZE / r as f64;
    let peak = density.values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}">"#);
    for i in 0..r {
        for j in 0..r {
            let v = if peak > 0.0 { density.values[i * r + j] / peak } else { 0.0 };
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let y = SIZE - (i + 1) as f64 * cell;
            write!(
                out,
                r#"<rect x="{:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                j as f64 * cell,
                cell + 0.05,
                cell + 0.05
            )
            .unwrap();
        }
    }
    out.push_str("</svg>\n");
    out
}
