//! Static SVG charts.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use testam_core::eval::EXPERT_NAMES;
use testam_core::training::EpochRecord;
use testam_core::RoutingReport;

const SIZE: (u32, u32) = (800, 480);
const EXPERT_COLORS: [RGBColor; 3] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44)];

fn err(e: impl std::fmt::Display) -> anyhow::Error {
    anyhow!("plotting: {e}")
}

pub fn history(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let last = records.last().map_or(1, |r| r.epoch + 1);
    let first = records.first().map_or(0, |r| r.epoch);
    let top = records
        .iter()
        .flat_map(|r| [r.train_mae, r.val_mae])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-6)
        * 1.05;
    let mut chart = ChartBuilder::on(&root)
        .caption("Training history", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(first as f64..last as f64, 0.0..top)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("MAE")
        .draw()
        .map_err(err)?;
    let series: [(&str, RGBColor, fn(&EpochRecord) -> f64); 2] =
        [("train", EXPERT_COLORS[0], |r| r.train_mae), ("validation", EXPERT_COLORS[1], |r| r.val_mae)];
    for (label, color, f) in series {
        chart
            .draw_series(LineSeries::new(records.iter().map(|r| (r.epoch as f64, f(r))), color.stroke_width(2)))
            .map_err(err)?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

pub fn routes_by_hour(path: &Path, report: &RoutingReport) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Expert selection by hour of day", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..23.0, 0.0..1.0)
        .map_err(err)?;
    chart
        .configure_mesh()
        .x_desc("hour")
        .y_desc("share")
        .draw()
        .map_err(err)?;
    for (e, name) in EXPERT_NAMES.iter().enumerate() {
        let color = EXPERT_COLORS[e];
        let points = report
            .per_hour
            .iter()
            .enumerate()
            .filter_map(|(h, s)| s.map(|s| (h as f64, s[e])));
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// Stacked bars of expert shares, one per node.
pub fn routes_by_node(path: &Path, report: &RoutingReport) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let n = report.per_node.len().max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption("Expert selection by node", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..n as f64, 0.0..1.0)
        .map_err(err)?;
    let labels: Vec<String> = report
        .per_node
        .iter()
        .map(|s| match &s.class {
            Some(c) => format!("{} ({})", s.node, &c[..1]),
            None => s.node.clone(),
        })
        .collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.min(40))
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("share")
        .draw()
        .map_err(err)?;
    for (e, name) in EXPERT_NAMES.iter().enumerate() {
        let color = EXPERT_COLORS[e];
        let bars = report.per_node.iter().enumerate().map(|(i, s)| {
            let lo: f64 = s.shares[..e].iter().sum();
            Rectangle::new([(i as f64 + 0.1, lo), (i as f64 + 0.9, lo + s.shares[e])], color.filled())
        });
        chart
            .draw_series(bars)
            .map_err(err)?
            .label(*name)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}
