//! CSV and SVG report emission. Headers are fixed per schema version; tools
//! downstream parse these files, so the formats only change with the version
//! constants.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::losses::MetricReport;
use crate::pipeline::EpochLog;
use crate::robustness::RobustnessReport;

pub const METRICS_SCHEMA: &str = "metrics.v1";
pub const TRAIN_LOG_SCHEMA: &str = "train_log.v1";
pub const ROBUSTNESS_SCHEMA: &str = "robustness.v1";
pub const ABLATION_SCHEMA: &str = "ablation.v1";

pub const METRICS_HEADER: &str = "image_id,iou,f1,stage";
pub const TRAIN_LOG_HEADER: &str = "epoch,l_crs,l_ref,l_total,val_iou_crs,val_iou_ref,val_f1_ref";
pub const ROBUSTNESS_HEADER: &str = "kind,level,mean_iou,mean_f1,n_images";
pub const ABLATION_HEADER: &str =
    "index,use_dssn_dual,use_tapi,use_adaptive_decoder,seed,val_iou_ref,val_f1_ref";

fn write_file(path: &Path, content: String) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Per-image metrics for both stages.
pub fn write_metrics_csv(
    path: &Path,
    coarse: &MetricReport,
    refined: &MetricReport,
) -> Result<()> {
    let mut out = format!("# {METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    for (stage, report) in [("coarse", coarse), ("refined", refined)] {
        for m in &report.per_image {
            writeln!(out, "{},{:.6},{:.6},{}", m.id, m.iou, m.f1, stage).unwrap();
        }
    }
    write_file(path, out)
}

pub fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = format!("# {TRAIN_LOG_SCHEMA}\n{TRAIN_LOG_HEADER}\n");
    for row in log {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch,
            row.l_crs,
            row.l_ref,
            row.l_total,
            row.val_iou_crs,
            row.val_iou_ref,
            row.val_f1_ref
        )
        .unwrap();
    }
    write_file(path, out)
}

pub fn write_robustness_csv(path: &Path, report: &RobustnessReport) -> Result<()> {
    let mut out = format!("# {ROBUSTNESS_SCHEMA}\n{ROBUSTNESS_HEADER}\n");
    for row in &report.rows {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            row.kind.as_str(),
            row.level,
            row.mean_iou,
            row.mean_f1,
            row.n_images
        )
        .unwrap();
    }
    write_file(path, out)
}

/// One ablation row per (configuration, seed).
pub struct AblationRow {
    pub index: String,
    pub use_dssn_dual: bool,
    pub use_tapi: bool,
    pub use_adaptive_decoder: bool,
    pub seed: u64,
    pub val_iou_ref: f64,
    pub val_f1_ref: f64,
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut out = format!("# {ABLATION_SCHEMA}\n{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6}",
            r.index,
            r.use_dssn_dual,
            r.use_tapi,
            r.use_adaptive_decoder,
            r.seed,
            r.val_iou_ref,
            r.val_f1_ref
        )
        .unwrap();
    }
    write_file(path, out)
}

/// Minimal SVG line chart; one polyline per series, legend on the right.
pub fn svg_line_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const ML: f64 = 60.0;
    const MR: f64 = 150.0;
    const MT: f64 = 44.0;
    const MB: f64 = 52.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (0.0f64, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    y1 = y1.max(y0 + 1e-9).max(1.0);

    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    write!(
        svg,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>",
        (W - MR + ML) / 2.0
    )
    .unwrap();
    // axes
    write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB,
        W - MR,
        H - MB
    )
    .unwrap();
    write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>",
        H - MB
    )
    .unwrap();
    // ticks
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.2}</text>",
            sx(xv),
            H - MB + 18.0,
            xv
        )
        .unwrap();
        write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{:.2}</text>",
            ML - 6.0,
            sy(yv) + 4.0,
            yv
        )
        .unwrap();
    }
    write!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{x_label}</text>",
        (W - MR + ML) / 2.0,
        H - 12.0
    )
    .unwrap();
    write!(
        svg,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        (H - MB + MT) / 2.0,
        (H - MB + MT) / 2.0
    )
    .unwrap();

    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let path_d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path_d.join(" ")
        )
        .unwrap();
        for &(x, y) in pts {
            write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            )
            .unwrap();
        }
        let ly = MT + 18.0 * i as f64;
        write!(
            svg,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>",
            W - MR + 10.0,
            W - MR + 34.0
        )
        .unwrap();
        write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>",
            W - MR + 40.0,
            ly + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>");
    write_file(path, svg)
}
