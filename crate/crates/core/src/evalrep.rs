//! One-pass evaluation, best-proposal curves and report emission.
//!
//! Success averages, over IoU thresholds τ = 0, 0.01, …, 1, the percentage
//! of frames whose IoU reaches τ; a frame with no overlap never counts.
//! Precision averages, over distance thresholds δ = 0, 0.02, …, 2 m, the
//! percentage of frames whose center error is at most δ.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::geom::{center_distance, oriented_iou, project_to_bev, Box3d, Rect};
use crate::track::ProposalStream;

pub const THRESHOLD_STEPS: usize = 100;
pub const MAX_CENTER_ERROR: f64 = 2.0;
/// Slack on IoU thresholds for polygon-clipping round-off.
const IOU_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpeSummary {
    pub success: f64,
    pub precision: f64,
}

/// OPE from per-frame IoUs and center errors.
pub fn ope_from_errors(ious: &[f64], dists: &[f64]) -> Result<OpeSummary> {
    if ious.len() != dists.len() || ious.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} IoUs and {} distances; need equal non-zero counts",
            ious.len(),
            dists.len()
        )));
    }
    let n = ious.len() as f64;
    let mut success = 0.0;
    let mut precision = 0.0;
    for i in 0..=THRESHOLD_STEPS {
        let tau = i as f64 / THRESHOLD_STEPS as f64;
        let delta = MAX_CENTER_ERROR * tau;
        success += ious.iter().filter(|&&v| v > 0.0 && v + IOU_SLACK >= tau).count() as f64 / n;
        precision += dists.iter().filter(|&&d| d <= delta).count() as f64 / n;
    }
    let k = (THRESHOLD_STEPS + 1) as f64;
    Ok(OpeSummary {
        success: 100.0 * success / k,
        precision: 100.0 * precision / k,
    })
}

pub fn ope_metrics(pred: &[Box3d], gt: &[Box3d]) -> Result<OpeSummary> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground-truth boxes", pred.len(), gt.len())));
    }
    let ious: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| oriented_iou(&project_to_bev(p), &project_to_bev(g)))
        .collect();
    let dists: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_distance(&p.pose, &g.pose)).collect();
    ope_from_errors(&ious, &dists)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub count: usize,
    pub oracle: OpeSummary,
    pub selector: OpeSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalCurve {
    pub points: Vec<CurvePoint>,
}

/// Per-frame proposal streams with their ground truth, pooled over tracklets.
#[derive(Debug, Clone, Default)]
pub struct StreamSet<'a> {
    pub frames: Vec<(&'a ProposalStream, &'a Box3d)>,
}

fn prefix(stream: &ProposalStream, c: usize) -> &[Rect] {
    &stream.rects[..c.min(stream.rects.len())]
}

/// Per count `C`, OPE of the best of the first `C` proposals of every frame:
/// highest IoU for Success and smallest center error for Precision.
pub fn best_proposal_curve(streams: &StreamSet, counts: &[usize]) -> Result<Vec<(usize, OpeSummary)>> {
    counts
        .iter()
        .map(|&c| {
            let mut ious = Vec::with_capacity(streams.frames.len());
            let mut dists = Vec::with_capacity(streams.frames.len());
            for (s, g) in &streams.frames {
                let gr = project_to_bev(g);
                let rects = prefix(s, c);
                ious.push(rects.iter().map(|r| oriented_iou(r, &gr)).fold(0.0, f64::max));
                dists.push(rects.iter().map(|r| center_distance(&r.pose, &g.pose)).fold(f64::INFINITY, f64::min));
            }
            Ok((c, ope_from_errors(&ious, &dists)?))
        })
        .collect()
}

/// Per count `C`, OPE when each frame keeps the best-scored of its first `C`
/// proposals (lowest index on ties).
pub fn selector_curve(streams: &StreamSet, counts: &[usize]) -> Result<Vec<(usize, OpeSummary)>> {
    counts
        .iter()
        .map(|&c| {
            let mut ious = Vec::with_capacity(streams.frames.len());
            let mut dists = Vec::with_capacity(streams.frames.len());
            for (s, g) in &streams.frames {
                let rects = prefix(s, c);
                let mut best = 0;
                for i in 1..rects.len() {
                    if s.scores[i] > s.scores[best] {
                        best = i;
                    }
                }
                let r = rects[best];
                ious.push(oriented_iou(&r, &project_to_bev(g)));
                dists.push(center_distance(&r.pose, &g.pose));
            }
            Ok((c, ope_from_errors(&ious, &dists)?))
        })
        .collect()
}

pub fn proposal_curve(streams: &StreamSet, counts: &[usize]) -> Result<ProposalCurve> {
    let oracle = best_proposal_curve(streams, counts)?;
    let selector = selector_curve(streams, counts)?;
    Ok(ProposalCurve {
        points: oracle
            .into_iter()
            .zip(selector)
            .map(|((count, o), (_, s))| CurvePoint {
                count,
                oracle: o,
                selector: s,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRun {
    pub label: String,
    pub summary: OpeSummary,
    pub curve: Option<ProposalCurve>,
}

pub fn format_table(runs: &[ReportRun]) -> String {
    let width = runs.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}  Success / Precision\n", "run");
    for r in runs {
        let _ = writeln!(s, "{:<width$}  {:.1} / {:.1}", r.label, r.summary.success, r.summary.precision);
    }
    s
}

pub fn format_curves_csv(runs: &[ReportRun]) -> String {
    let mut s = String::from("label,C,success,precision,kind\n");
    for r in runs {
        for p in r.curve.iter().flat_map(|c| &c.points) {
            for (kind, v) in [("oracle", p.oracle), ("selector", p.selector)] {
                let _ = writeln!(s, "{},{},{:.4},{:.4},{}", r.label, p.count, v.success, v.precision, kind);
            }
        }
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Success and Precision against candidate count; solid lines are the
/// best-proposal curves, dashed lines the selector curves.
pub fn render_svg(runs: &[ReportRun]) -> String {
    let (pw, ph, margin) = (420.0, 300.0, 50.0);
    let width = 2.0 * pw + 3.0 * margin;
    let height = ph + 2.0 * margin + 20.0 * runs.len() as f64;
    let max_c = runs
        .iter()
        .flat_map(|r| r.curve.iter().flat_map(|c| c.points.iter().map(|p| p.count)))
        .max()
        .unwrap_or(1)
        .max(2) as f64;
    let xmap = |c: usize| (c as f64).ln() / max_c.ln() * pw;
    let ymap = |v: f64| ph - v / 100.0 * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    for (panel, title) in ["Success", "Precision"].iter().enumerate() {
        let ox = margin + panel as f64 * (pw + margin);
        let _ = writeln!(s, r#"<g transform="translate({ox},{margin})">"#);
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="-10" text-anchor="middle">{title}</text>"#, pw / 2.0);
        for v in [0, 25, 50, 75, 100] {
            let y = ymap(v as f64);
            let _ = writeln!(s, r#"<text x="-6" y="{y}" text-anchor="end">{v}</text>"#);
        }
        let mut tick = 1;
        while tick as f64 <= max_c {
            let x = xmap(tick);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{tick}</text>"#, ph + 16.0);
            tick *= 2;
        }
        for (i, r) in runs.iter().enumerate() {
            let Some(curve) = &r.curve else { continue };
            let color = PALETTE[i % PALETTE.len()];
            for (dash, pick) in [("", 0usize), (r#" stroke-dasharray="6,4""#, 1)] {
                let pts: Vec<String> = curve
                    .points
                    .iter()
                    .map(|p| {
                        let v = if pick == 0 { p.oracle } else { p.selector };
                        let v = if panel == 0 { v.success } else { v.precision };
                        format!("{:.2},{:.2}", xmap(p.count), ymap(v))
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
                    pts.join(" ")
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    for (i, r) in runs.iter().enumerate() {
        let y = ph + 2.0 * margin + 20.0 * i as f64 - 10.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<line x1="{margin}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} {:.1} / {:.1}</text>"#,
            margin + 30.0,
            margin + 38.0,
            y + 4.0,
            escape(&r.label),
            r.summary.success,
            r.summary.precision
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.txt`, `curves.csv` and `curves.svg` into `dir`.
pub fn emit_report(dir: &Path, runs: &[ReportRun]) -> Result<Vec<PathBuf>> {
    if runs.is_empty() {
        return Err(Error::InvalidInput("nothing to report".into()));
    }
    let files = [
        ("report.txt", format_table(runs)),
        ("curves.csv", format_curves_csv(runs)),
        ("curves.svg", render_svg(runs)),
    ];
    let mut out = Vec::new();
    for (name, body) in files {
        let p = dir.join(name);
        atomic_write(&p, body.as_bytes())?;
        out.push(p);
    }
    Ok(out)
}
