//! Chart rendering for concept reports and learning curves.
//!
//! Output format follows the file extension: `.svg` writes vector output, anything
//! else a PNG. Bitmap text needs a TrueType font; without one, PNG charts are
//! drawn without labels.

use std::path::Path;
use std::sync::OnceLock;

use plotters::coord::Shift;
use plotters::prelude::*;

use crate::error::{Result, XaiError};

const FONT_CANDIDATES: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
];

const FAMILY: &str = "sans-serif";

fn bitmap_font() -> bool {
    static READY: OnceLock<bool> = OnceLock::new();
    *READY.get_or_init(|| {
        let path = std::env::var("XAI_FONT")
            .ok()
            .into_iter()
            .chain(FONT_CANDIDATES.iter().map(|s| s.to_string()))
            .find(|p| Path::new(p).is_file());
        let Some(path) = path else { return false };
        let Ok(bytes) = std::fs::read(&path) else { return false };
        let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
        plotters::style::register_font(FAMILY, FontStyle::Normal, bytes).is_ok()
    })
}

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> XaiError + '_ {
    move |e| XaiError::format(path, format!("chart rendering failed: {e}"))
}

/// One group of bars in a grouped bar chart.
#[derive(Debug, Clone, PartialEq)]
pub struct BarGroup {
    pub label: String,
    pub values: Vec<f64>,
}

/// Grouped bars on a [0, 1] axis; every group must have one value per series.
pub fn grouped_bars(path: &Path, title: &str, series: &[&str], groups: &[BarGroup]) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|g| g.values.len() != series.len()) {
        return Err(XaiError::InvalidInput("every bar group needs one value per series".into()));
    }
    if is_svg(path) {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        bars_on(root, true, title, series, groups).map_err(draw_err(path))
    } else {
        let text = bitmap_font();
        let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
        bars_on(root, text, title, series, groups).map_err(draw_err(path))
    }
}

const PALETTE: [RGBColor; 4] = [RGBColor(52, 101, 164), RGBColor(204, 0, 0), RGBColor(78, 154, 6), RGBColor(117, 80, 123)];

fn bars_on<DB: DrawingBackend>(
    root: DrawingArea<DB, Shift>,
    text: bool,
    title: &str,
    series: &[&str],
    groups: &[BarGroup],
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    root.fill(&WHITE)?;
    let n = groups.len() as f64;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20).x_label_area_size(40).y_label_area_size(50);
    if text {
        builder.caption(title, (FAMILY, 22));
    }
    let mut chart = builder.build_cartesian_2d(0f64..n, 0f64..1f64)?;
    if text {
        let labels: Vec<String> = groups.iter().map(|g| g.label.clone()).collect();
        chart
            .configure_mesh()
            .disable_x_mesh()
            .x_labels(groups.len() * 2 + 1)
            .x_label_formatter(&|x| {
                let k = x.floor() as usize;
                if (x - k as f64 - 0.5).abs() < 1e-6 {
                    labels.get(k).cloned().unwrap_or_default()
                } else {
                    String::new()
                }
            })
            .y_desc("probability")
            .label_style((FAMILY, 14))
            .draw()?;
    }
    let width = 0.8 / series.len() as f64;
    for (s, name) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let rects = groups.iter().enumerate().map(move |(g, group)| {
            let x0 = g as f64 + 0.1 + s as f64 * width;
            Rectangle::new([(x0, 0.0), (x0 + width * 0.9, group.values[s].clamp(0.0, 1.0))], color.filled())
        });
        let drawn = chart.draw_series(rects)?;
        if text {
            drawn
                .label(*name)
                .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 10, y + 5)], color.filled()));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .position(SeriesLabelPosition::UpperMiddle)
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FAMILY, 14))
            .draw()?;
    }
    root.present()
}

/// Line chart of several named series over 1-based epochs.
pub fn line_chart(path: &Path, title: &str, series: &[(&str, &[f64])]) -> Result<()> {
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let (mut lo, mut hi) = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let x_max = len.max(2) as f64;
    if is_svg(path) {
        let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
        lines_on(root, true, title, series, (1.0, x_max), (lo.min(0.0), hi)).map_err(draw_err(path))
    } else {
        let text = bitmap_font();
        let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
        lines_on(root, text, title, series, (1.0, x_max), (lo.min(0.0), hi)).map_err(draw_err(path))
    }
}

fn lines_on<DB: DrawingBackend>(
    root: DrawingArea<DB, Shift>,
    text: bool,
    title: &str,
    series: &[(&str, &[f64])],
    x: (f64, f64),
    y: (f64, f64),
) -> std::result::Result<(), DrawingAreaErrorKind<DB::ErrorType>> {
    root.fill(&WHITE)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20).x_label_area_size(40).y_label_area_size(50);
    if text {
        builder.caption(title, (FAMILY, 22));
    }
    let mut chart = builder.build_cartesian_2d(x.0..x.1, y.0..y.1)?;
    if text {
        chart.configure_mesh().x_desc("epoch").label_style((FAMILY, 14)).draw()?;
    }
    for (s, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points = values.iter().enumerate().map(|(k, &v)| ((k + 1) as f64, v));
        let drawn = chart.draw_series(LineSeries::new(points, color.stroke_width(2)))?;
        if text {
            drawn
                .label(*name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font((FAMILY, 14))
            .draw()?;
    }
    root.present()
}

fn is_svg(path: &Path) -> bool {
    path.extension().map(|e| e.eq_ignore_ascii_case("svg")).unwrap_or(false)
}
