use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;

use wla::griddata::GridField;

use crate::run::{CliError, CliResult};

/// A CSV file held as strings, with numeric access by column name.
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn num(&self, row: usize, col: usize) -> Option<f64> {
        self.rows[row].get(col)?.parse().ok()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n|{}\n", self.header.join(" | "), "---|".repeat(self.header.len()));
        for r in &self.rows {
            s.push_str(&format!("| {} |\n", r.join(" | ")));
        }
        s
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()?;
    Ok(Table { header, rows })
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Plot(e.to_string())
}

/// One SVG line chart with a line per named series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> CliResult<()> {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() || !y0.is_finite() {
        return Err(CliError::Plot(format!("{title}: nothing to plot")));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, p)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(p.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn need(t: &Table, name: &str) -> CliResult<usize> {
    t.column(name).ok_or_else(|| CliError::Plot(format!("missing column {name:?}")))
}

/// RMSE against lead, one chart per channel with a line per model.
pub fn forecast_plots(t: &Table, out: &Path, tag: &str) -> CliResult<usize> {
    let (m, c, l, r) = (need(t, "model")?, need(t, "channel")?, need(t, "lead")?, need(t, "rmse")?);
    let mut by_channel: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for (i, row) in t.rows.iter().enumerate() {
        if let (Some(lead), Some(rmse)) = (t.num(i, l), t.num(i, r)) {
            by_channel.entry(row[c].clone()).or_default().entry(row[m].clone()).or_default().push((lead, rmse));
        }
    }
    for (channel, models) in &by_channel {
        let series: Vec<_> = models.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let path = out.join(format!("{tag}_rmse_vs_lead_{channel}.svg"));
        line_plot(&path, &format!("{channel} RMSE"), "lead (steps)", "RMSE", &series)?;
    }
    Ok(by_channel.len())
}

/// Ratio against codebook width, one line per level count.
pub fn sweep_plot(t: &Table, out: &Path, tag: &str) -> CliResult<usize> {
    let (c, nb, r) = (need(t, "channels")?, need(t, "nb")?, need(t, "ratio")?);
    let mut lines: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, row) in t.rows.iter().enumerate() {
        if let (Ok(levels), Some(x), Some(y)) = (row[c].parse::<usize>(), t.num(i, nb), t.num(i, r)) {
            lines.entry(levels).or_default().push((x, y));
        }
    }
    let series: Vec<_> = lines.into_iter().map(|(k, v)| (format!("{k} levels"), v)).collect();
    line_plot(&out.join(format!("{tag}_ratio_vs_codebook.svg")), "Compression ratio", "nb (bits per token)", "ratio", &series)?;
    Ok(1)
}

/// Every numeric loss column against step.
pub fn loss_plot(t: &Table, out: &Path, tag: &str) -> CliResult<usize> {
    let s = need(t, "step")?;
    let mut series = Vec::new();
    for (col, name) in t.header.iter().enumerate() {
        if col == s || !(name.contains("loss") || name == "bce" || name == "recon" || name == "total") {
            continue;
        }
        let pts: Vec<(f64, f64)> = (0..t.rows.len()).filter_map(|i| Some((t.num(i, s)?, t.num(i, col)?))).collect();
        if !pts.is_empty() {
            series.push((name.clone(), pts));
        }
    }
    if series.is_empty() {
        return Ok(0);
    }
    line_plot(&out.join(format!("{tag}_loss.svg")), "Training loss", "step", "loss", &series)?;
    Ok(1)
}

/// White to dark red.
fn heat(t: f64) -> RGBColor {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    RGBColor(lerp(255.0, 140.0), lerp(255.0, 0.0), lerp(255.0, 20.0))
}

/// One latitude-longitude heatmap per channel of a mean absolute error map.
pub fn mae_plots(map: &GridField, out: &Path, tag: &str) -> CliResult<usize> {
    let (h, w) = (map.height(), map.width());
    for (c, entry) in map.meta().entries().iter().enumerate() {
        let plane = map.channel(c);
        let max = plane.iter().copied().fold(0f32, f32::max).max(f32::MIN_POSITIVE) as f64;
        let path = out.join(format!("{tag}_mae_{entry}.svg"));
        let root = SVGBackend::new(&path, (720, 400)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{entry} mean absolute error (max {max:.3})"), ("sans-serif", 18))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(40)
            .build_cartesian_2d(0..w, 0..h)
            .map_err(plot_err)?;
        chart.configure_mesh().disable_mesh().x_desc("longitude index").y_desc("latitude index").draw().map_err(plot_err)?;
        chart
            .draw_series((0..h).flat_map(|i| {
                (0..w).map(move |j| {
                    let v = plane[i * w + j] as f64 / max;
                    // north at the top
                    let y = h - 1 - i;
                    Rectangle::new([(j, y), (j + 1, y + 1)], heat(v).filled())
                })
            }))
            .map_err(plot_err)?;
        root.present().map_err(plot_err)?;
    }
    Ok(map.channels())
}
