//! Localization metrics: proposal recall against a budget, CorLoc, and mean
//! IoU across refinement iterations. Plus plain-text tables and SVG curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::io::atomic_write;

/// Proposal budgets for recall curves.
pub const DEFAULT_K_GRID: [usize; 10] = [1, 2, 5, 10, 20, 50, 100, 200, 500, 1000];

/// Ranked proposals of one image with its ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub proposals: Vec<BBox>,
    pub gts: Vec<BBox>,
}

fn best_iou(b: &BBox, gts: &[BBox]) -> f64 {
    gts.iter().map(|g| iou(b, g)).fold(0.0, f64::max)
}

fn covered(proposals: &[BBox], g: &BBox, iou_thresh: f64) -> bool {
    proposals.iter().any(|p| iou(p, g) > iou_thresh)
}

/// Fraction of all ground truths with at least one of the top-`k` proposals
/// at IoU above `iou_thresh`. A proposal may cover several ground truths.
/// Zero when there are no ground truths at all.
pub fn recall_at(records: &[EvalRecord], iou_thresh: f64, k: usize) -> f64 {
    assert!(k >= 1, "recall budget must be at least 1");
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records {
        let top = &r.proposals[..k.min(r.proposals.len())];
        total += r.gts.len();
        hit += r.gts.iter().filter(|g| covered(top, g, iou_thresh)).count();
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn recall_curve(records: &[EvalRecord], iou_thresh: f64, ks: &[usize]) -> Vec<(usize, f64)> {
    ks.iter().map(|&k| (k, recall_at(records, iou_thresh, k))).collect()
}

/// Percentage of images whose top-1 proposal overlaps some ground truth at
/// IoU > 0.5. Images with no proposal count as misses.
pub fn corloc(records: &[EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| r.proposals.first().is_some_and(|p| best_iou(p, &r.gts) > 0.5))
        .count();
    100.0 * hits as f64 / records.len() as f64
}

/// Mean over boxes of the IoU with the best-overlapping ground truth.
pub fn mean_iou(boxes: &[BBox], gts: &[BBox]) -> Result<f64> {
    if boxes.is_empty() {
        return Err(Error::EmptyInput("boxes"));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("ground truths"));
    }
    Ok(boxes.iter().map(|b| best_iou(b, gts)).sum::<f64>() / boxes.len() as f64)
}

/// Mean IoU of the input boxes followed by one entry per refinement iteration.
pub fn mean_iou_trajectory(before: &[BBox], trajectory: &[Vec<BBox>], gts: &[BBox]) -> Result<Vec<f64>> {
    if trajectory.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    std::iter::once(before)
        .chain(trajectory.iter().map(Vec::as_slice))
        .map(|b| mean_iou(b, gts))
        .collect()
}

/// Comma-separated table with a header row. Floats use shortest round-trip form.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(Error::DimensionMismatch {
            expected: header.len(),
            actual: r.len(),
        });
    }
    atomic_write(path, |w| {
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            writeln!(w, "{}", r.join(","))?;
        }
        Ok(())
    })
}

/// One named recall curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Recall-vs-budget plot on a log10 x axis and a [0, 1] y axis.
pub fn render_recall_svg(title: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let kmax = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(1)
        .max(10) as f64;
    let decades = kmax.log10().ceil().max(1.0);
    let px = |k: usize| m + (k.max(1) as f64).log10() / decades * (w - 2.0 * m);
    let py = |r: f64| h - m - r.clamp(0.0, 1.0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m},{} L{m},{} L{},{}" fill="none" stroke="black"/>"#,
        m,
        h - m,
        w - m,
        h - m
    );
    for d in 0..=decades as u32 {
        let k = 10usize.pow(d);
        let x = px(k);
        let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#, h - m, h - m + 5.0);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{k}</text>"#, h - m + 20.0);
    }
    for tick in 0..=5 {
        let r = tick as f64 / 5.0;
        let y = py(r);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{m}" y2="{y}" stroke="black"/>"#, m - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{r:.1}</text>"#, m - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">number of proposals</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">recall</text>"#, h / 2.0, h / 2.0);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(k, r)| format!("{:.2},{:.2}", px(k), py(r))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = m + 10.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 150.0, w - m - 125.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, w - m - 120.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_recall_svg(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    let svg = render_recall_svg(title, series);
    atomic_write(path, |w| Ok(w.write_all(svg.as_bytes())?))
}
