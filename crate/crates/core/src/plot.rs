//! SVG charts: loss curves, sweep metrics, 2-D scatter and heatmaps.

use std::path::Path;

use plotters::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("plot {path}: {message}")]
pub struct PlotError {
    pub path: String,
    pub message: String,
}

fn err(path: &Path, e: impl std::fmt::Display) -> PlotError {
    PlotError { path: path.display().to_string(), message: e.to_string() }
}

fn padded_range(values: impl Iterator<Item = f64>) -> std::ops::Range<f64> {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return 0.0..1.0;
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad)..(hi + pad)
}

/// One named polyline.
pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a legend, one line per series.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<(), PlotError> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(path, e))?;
    let xs = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = padded_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(70)
        .build_cartesian_2d(xs, ys)
        .map_err(|e| err(path, e))?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(|e| err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| err(path, e))?
            .label(s.name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(path, e))?;
    root.present().map_err(|e| err(path, e))
}

/// Scatter plot colored by cluster label.
pub fn scatter(path: &Path, title: &str, points: &[[f64; 2]], labels: &[usize]) -> Result<(), PlotError> {
    let root = SVGBackend::new(path, (700, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(path, e))?;
    let xs = padded_range(points.iter().map(|p| p[0]));
    let ys = padded_range(points.iter().map(|p| p[1]));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(xs, ys)
        .map_err(|e| err(path, e))?;
    chart.configure_mesh().draw().map_err(|e| err(path, e))?;
    chart
        .draw_series(points.iter().enumerate().map(|(i, p)| {
            let c = labels.get(i).copied().unwrap_or(0);
            Circle::new((p[0], p[1]), 4, Palette99::pick(c).filled())
        }))
        .map_err(|e| err(path, e))?;
    root.present().map_err(|e| err(path, e))
}

/// Maps a value in `[lo, hi]` to a white → dark-blue ramp.
fn ramp(v: f64, lo: f64, hi: f64) -> RGBColor {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Annotated heatmap; row 0 is drawn at the top.
pub fn heatmap(
    path: &Path,
    title: &str,
    row_names: &[String],
    col_names: &[String],
    values: &[Vec<f64>],
) -> Result<(), PlotError> {
    let (rows, cols) = (row_names.len(), col_names.len());
    let cell = 90u32;
    let w = 160 + cell * cols.max(1) as u32;
    let h = 90 + cell * rows.max(1) as u32;
    let root = SVGBackend::new(path, (w, h)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(path, e))?;
    let lo = values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let title_style = ("sans-serif", 20).into_font();
    root.draw(&Text::new(title.to_string(), (10, 10), title_style)).map_err(|e| err(path, e))?;
    let (x0, y0) = (150i32, 70i32);
    let c = cell as i32;
    let label = ("sans-serif", 13).into_font();
    for (j, name) in col_names.iter().enumerate() {
        root.draw(&Text::new(name.clone(), (x0 + j as i32 * c + 6, y0 - 20), label.clone()))
            .map_err(|e| err(path, e))?;
    }
    for (i, name) in row_names.iter().enumerate() {
        root.draw(&Text::new(name.clone(), (10, y0 + i as i32 * c + c / 2 - 6), label.clone()))
            .map_err(|e| err(path, e))?;
        for (j, &v) in values[i].iter().enumerate().take(cols) {
            let (x, y) = (x0 + j as i32 * c, y0 + i as i32 * c);
            let fill = ramp(v, lo, hi);
            root.draw(&Rectangle::new([(x, y), (x + c, y + c)], fill.filled())).map_err(|e| err(path, e))?;
            root.draw(&Rectangle::new([(x, y), (x + c, y + c)], WHITE.stroke_width(1)))
                .map_err(|e| err(path, e))?;
            let dark = (u32::from(fill.0) + u32::from(fill.1) + u32::from(fill.2)) < 380;
            let text_color = if dark { WHITE } else { BLACK };
            root.draw(&Text::new(format!("{v:.2}"), (x + c / 2 - 14, y + c / 2 - 7), label.clone().color(&text_color)))
                .map_err(|e| err(path, e))?;
        }
    }
    root.present().map_err(|e| err(path, e))
}
