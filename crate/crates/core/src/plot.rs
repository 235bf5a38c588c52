//! SVG charts: per-task scores of several evaluation reports side by side,
//! and score against memory size for a sweep.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::{EvalReport, SweepReport};
use crate::tasks::Split;

const PALETTE: [RGBColor; 6] = [
    RGBColor(66, 103, 172),
    RGBColor(221, 132, 82),
    RGBColor(85, 168, 104),
    RGBColor(196, 78, 82),
    RGBColor(129, 114, 179),
    RGBColor(147, 120, 96),
];

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn padded_range(values: impl Iterator<Item = f64>, always: &[f64]) -> (f64, f64) {
    let (lo, hi) = values
        .chain(always.iter().copied())
        .filter(|v| v.is_finite())
        .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = ((hi - lo) * 0.08).max(0.05);
    (lo - pad, hi + pad)
}

/// Grouped bars of normalized Average per task, one bar per report, over
/// every task any report contains. The random (0) and optimal (1) anchors
/// are drawn as reference lines.
pub fn score_bars(reports: &[&EvalReport], split: Option<Split>, title: &str, path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::contract("no reports to plot"));
    }
    let mut tasks: Vec<&str> = Vec::new();
    for t in reports.iter().flat_map(|r| &r.tasks) {
        if split.map_or(true, |s| t.split == s) && !tasks.contains(&t.task_id.as_str()) {
            tasks.push(&t.task_id);
        }
    }
    if tasks.is_empty() {
        return Err(Error::contract("no tasks to plot"));
    }
    let value = |r: &EvalReport, task: &str| r.task(task).map(|t| t.normalized_average);
    let reports: Vec<&EvalReport> = reports
        .iter()
        .copied()
        .filter(|r| tasks.iter().any(|t| value(r, t).is_some()))
        .collect();
    let (lo, hi) = padded_range(
        reports.iter().flat_map(|r| tasks.iter().filter_map(move |t| value(r, t))),
        &[0.0, 1.0],
    );
    // Headroom for the legend.
    let hi = hi + 0.25 * (hi - lo);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let width = (160 + 70 * tasks.len() * reports.len().max(1)).clamp(480, 1600) as u32;
    let root = SVGBackend::new(path, (width, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let n = tasks.len() as f64;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(0.0..n, lo..hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .light_line_style(TRANSPARENT)
        .x_labels(tasks.len() * 2 + 1)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 1e-6 && i < tasks.len() {
                tasks[i].to_owned()
            } else {
                String::new()
            }
        })
        .y_label_formatter(&|y| format!("{:.1}", if y.abs() < 1e-9 { 0.0 } else { *y }))
        .y_desc("normalized Average")
        .draw()
        .map_err(plot_err)?;

    for (level, name, color) in [(0.0, "random", BLACK.mix(0.5)), (1.0, "optimal", PALETTE[2].mix(0.9))] {
        let style = color.stroke_width(2);
        chart
            .draw_series(LineSeries::new([(0.0, level), (n, level)], style))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], style));
    }

    let group = 0.8 / reports.len() as f64;
    for (ri, r) in reports.iter().enumerate() {
        let color = PALETTE[ri % PALETTE.len()];
        let bars = tasks.iter().enumerate().filter_map(|(ti, t)| {
            let v = value(r, t)?;
            let x0 = ti as f64 + 0.1 + ri as f64 * group;
            Some(Rectangle::new([(x0, 0.0f64.clamp(lo, hi)), (x0 + group * 0.9, v)], color.filled()))
        });
        chart
            .draw_series(bars)
            .map_err(plot_err)?
            .label(r.label.clone())
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK.mix(0.3))
        .position(SeriesLabelPosition::UpperRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Normalized Average against slot count, on a log₂ axis.
pub fn sweep_curve(report: &SweepReport, path: &Path) -> Result<()> {
    if report.rows.is_empty() {
        return Err(Error::contract("empty sweep"));
    }
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .map(|r| ((r.slots as f64).log2(), r.normalized))
        .collect();
    let (xlo, xhi) = padded_range(pts.iter().map(|p| p.0), &[]);
    let (ylo, yhi) = padded_range(pts.iter().map(|p| p.1), &[0.0]);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let root = SVGBackend::new(path, (560, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("memory slots ({} steps each)", report.steps), ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(52)
        .build_cartesian_2d(xlo..xhi, ylo..yhi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .light_line_style(TRANSPARENT)
        .x_desc("slots")
        .y_desc("normalized Average")
        .x_labels((xhi - xlo).ceil() as usize + 1)
        .x_label_formatter(&|x| {
            // Label powers of two only.
            if (x - x.round()).abs() < 1e-6 {
                format!("{}", 2f64.powf(x.round()))
            } else {
                String::new()
            }
        })
        .y_label_formatter(&|y| format!("{:.2}", if y.abs() < 1e-9 { 0.0 } else { *y }))
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(LineSeries::new(pts.clone(), PALETTE[0].stroke_width(2)))
        .map_err(plot_err)?;
    chart
        .draw_series(pts.iter().map(|&p| Circle::new(p, 4, PALETTE[0].filled())))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}
