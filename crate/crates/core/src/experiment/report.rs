//! Human-readable tables and SVG plots from an evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::model::TrainLog;
use crate::probe::{CellStatus, EvalReport, MetricSummary, ProbeKind};
use crate::tasks::Task;

pub const REPORT_MARKDOWN: &str = "report.md";
pub const LOSS_PLOT: &str = "loss.svg";
pub const MASK_PLOT: &str = "metric-vs-mask.svg";

/// Reads an evaluation report, reporting any malformation as a schema error.
pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_tsv(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn cell(s: Option<&MetricSummary>) -> String {
    match s {
        Some(s) => format!("{:.4} ± {:.4} ({})", s.mean, s.std, s.n),
        None => "n/a".to_string(),
    }
}

/// One table per (task, probe): representations as rows, the task's
/// metrics as columns. Cells without a successful value read `n/a`.
pub fn render_tables(report: &EvalReport) -> String {
    let summary = report.summary();
    let mut reps: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !reps.contains(&r.representation.as_str()) {
            reps.push(&r.representation);
        }
    }
    let mut out = String::new();
    for task in Task::ALL {
        for probe in [ProbeKind::Linear, ProbeKind::Conformer] {
            let rows: Vec<&str> = reps
                .iter()
                .copied()
                .filter(|rep| report.rows.iter().any(|r| r.task == task && r.probe == probe && r.representation == *rep))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let metrics = task.metrics();
            let _ = writeln!(out, "## {} ({} probe)\n", task.name(), probe.name());
            let _ = writeln!(out, "| representation | {} | cells |", metrics.join(" | "));
            let _ = writeln!(out, "|---|{}---|", "---|".repeat(metrics.len()));
            for rep in rows {
                let cells: Vec<&crate::probe::EvalRow> =
                    report.rows.iter().filter(|r| r.task == task && r.probe == probe && r.representation == rep).collect();
                let ok = cells.iter().filter(|r| r.status == CellStatus::Ok).count();
                let absent = cells.iter().filter(|r| r.status == CellStatus::Absent).count();
                let failed = cells.len() - ok - absent;
                let values: Vec<String> = metrics
                    .iter()
                    .map(|m| cell(summary.iter().find(|s| s.representation == rep && s.probe == probe && s.task == task && s.metric == *m)))
                    .collect();
                let mut status = format!("{ok} ok");
                if absent > 0 {
                    let _ = write!(status, ", {absent} absent");
                }
                if failed > 0 {
                    let _ = write!(status, ", {failed} failed");
                }
                let _ = writeln!(out, "| {rep} | {} | {status} |", values.join(" | "));
            }
            out.push('\n');
        }
    }
    out
}

pub fn plot_loss_curves(logs: &[(String, TrainLog)], path: &Path) -> Result<()> {
    let steps = logs.iter().map(|(_, l)| l.losses.len()).max().unwrap_or(0).max(1);
    let top = logs
        .iter()
        .flat_map(|(_, l)| l.losses.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("MPM training loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..steps as f64, 0f64..top)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("normalized loss").draw().map_err(plot_err)?;
    for (i, (name, log)) in logs.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let points = log.losses.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(s, v)| (s as f64, *v));
        chart
            .draw_series(LineSeries::new(points, colour))
            .map_err(plot_err)?
            .label(format!("m = {name}"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Mean of each task's first metric against span length for fixed-length
/// MPM strategies. Returns false when the report has none.
pub fn plot_metric_vs_mask(report: &EvalReport, path: &Path) -> Result<bool> {
    let summary = report.summary();
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in &summary {
        let Some(m) = s.representation.strip_prefix("mpm:").and_then(|m| m.parse::<f64>().ok()) else {
            continue;
        };
        if s.metric != s.task.metrics()[0] {
            continue;
        }
        series.entry(format!("{} {} ({})", s.task.name(), s.metric, s.probe.name())).or_default().push((m, s.mean));
    }
    if series.is_empty() {
        return Ok(false);
    }
    let max_m = series.values().flatten().map(|p| p.0).fold(1.0f64, f64::max);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Probe metric against mask span length", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0.5f64..max_m * 2.0).log_scale(), 0f64..1.0)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("span length m").y_desc("metric").draw().map_err(plot_err)?;
    for (i, (name, mut pts)) in series.into_iter().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let colour = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.clone(), colour))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        chart.draw_series(pts.into_iter().map(|p| Circle::new(p, 3, colour.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(true)
}

/// Writes `report.md` and the plots into `out_dir`; returns the files written.
pub fn write_report(report: &EvalReport, logs: &[(String, TrainLog)], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = Vec::new();
    let mut md = String::from("# Probe results\n\n");
    if let Some(h) = report.rows.first().map(|r| r.config_hash.clone()) {
        let _ = writeln!(md, "Config hash `{h}`. Cells show mean ± sample std (cell count) over folds and seeds.\n");
    }
    md.push_str(&render_tables(report));
    if !logs.is_empty() {
        let p = out_dir.join(LOSS_PLOT);
        plot_loss_curves(logs, &p)?;
        let _ = writeln!(md, "![training loss]({LOSS_PLOT})\n");
        files.push(p);
    }
    let p = out_dir.join(MASK_PLOT);
    if plot_metric_vs_mask(report, &p)? {
        let _ = writeln!(md, "![metric against mask size]({MASK_PLOT})\n");
        files.push(p);
    }
    let md_path = out_dir.join(REPORT_MARKDOWN);
    std::fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    files.insert(0, md_path);
    Ok(files)
}
