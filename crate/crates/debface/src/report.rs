//! Static plot emission: cohort heatmaps, marginal bar charts,
//! false-accept matrices, and imposter-percentile comparisons as PNG
//! files. Rendering is a pure function of the report values, so
//! regenerated plots are byte-identical.

use image::{Rgb, RgbImage};
use std::path::Path;

use crate::error::{DebfaceError, Result};
use crate::evalkit::{BiasReport, FalseAcceptMatrix, PercentileReport};

const CELL: u32 = 36;
const GAP: u32 = 3;
const MARGIN: u32 = 12;
const ABSENT: Rgb<u8> = Rgb([150, 150, 150]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);

/// Map a value in [0,1] onto a white-to-blue ramp. Values outside the
/// range are clamped. Distinct from the absent-cell gray.
fn heat_color(v: f64) -> Rgb<u8> {
    let t = v.clamp(0.0, 1.0);
    let r = (245.0 - 215.0 * t) as u8;
    let g = (245.0 - 140.0 * t) as u8;
    let b = 250u8;
    Rgb([r, g, b])
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32, color: Rgb<u8>) {
    for y in y0..(y0 + h).min(img.height()) {
        for x in x0..(x0 + w).min(img.width()) {
            img.put_pixel(x, y, color);
        }
    }
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| DebfaceError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}

fn grid_image(rows: u32, cols: u32) -> RgbImage {
    let w = 2 * MARGIN + cols * (CELL + GAP);
    let h = 2 * MARGIN + rows * (CELL + GAP);
    let mut img = RgbImage::new(w, h);
    fill_rect(&mut img, 0, 0, w, h, BACKGROUND);
    img
}

fn put_cell(img: &mut RgbImage, row: u32, col: u32, color: Rgb<u8>) {
    let x = MARGIN + col * (CELL + GAP);
    let y = MARGIN + row * (CELL + GAP);
    fill_rect(img, x, y, CELL, CELL, color);
}

/// Cohort AUC heatmap: one row per (gender, age) combination, one
/// column per race. Absent cohorts are gray.
pub fn render_cohort_heatmap(report: &BiasReport, path: &Path) -> Result<()> {
    if report.cohorts.is_empty() {
        return Err(DebfaceError::EmptyInput("render_cohort_heatmap".into()));
    }
    let n_g = 1 + report
        .cohorts
        .iter()
        .map(|c| c.cohort.gender)
        .max()
        .unwrap();
    let n_a = 1 + report
        .cohorts
        .iter()
        .map(|c| c.cohort.age_group)
        .max()
        .unwrap();
    let n_r = 1 + report.cohorts.iter().map(|c| c.cohort.race).max().unwrap();
    let mut img = grid_image((n_g * n_a) as u32, n_r as u32);
    // Cells with no record at all render as background; recorded but
    // under-supported cohorts render gray.
    for c in &report.cohorts {
        let row = (c.cohort.gender * n_a + c.cohort.age_group) as u32;
        let col = c.cohort.race as u32;
        let color = match c.auc {
            Some(v) => heat_color(v),
            None => ABSENT,
        };
        put_cell(&mut img, row, col, color);
    }
    save(&img, path)
}

/// Grouped bar chart of marginal per-attribute AUCs, one bar group per
/// attribute value, one bar per report (model).
pub fn render_marginal_bars(reports: &[&BiasReport], path: &Path) -> Result<()> {
    if reports.is_empty() || reports.iter().any(|r| r.marginals.is_empty()) {
        return Err(DebfaceError::EmptyInput("render_marginal_bars".into()));
    }
    let groups = reports[0].marginals.len() as u32;
    let models = reports.len() as u32;
    let bar_w = 14u32;
    let group_w = models * (bar_w + 2) + 10;
    let chart_h = 160u32;
    let w = 2 * MARGIN + groups * group_w;
    let h = 2 * MARGIN + chart_h;
    let mut img = RgbImage::new(w, h);
    fill_rect(&mut img, 0, 0, w, h, BACKGROUND);
    let palette = [
        Rgb([60, 100, 200]),
        Rgb([210, 120, 40]),
        Rgb([60, 170, 90]),
        Rgb([160, 70, 160]),
    ];
    for (gi, _) in reports[0].marginals.iter().enumerate() {
        for (mi, r) in reports.iter().enumerate() {
            let m = r.marginals.get(gi).ok_or_else(|| {
                DebfaceError::ShapeMismatch("reports have different marginal layouts".into())
            })?;
            let x = MARGIN + gi as u32 * group_w + mi as u32 * (bar_w + 2);
            match m.auc {
                Some(v) => {
                    let bh = (v.clamp(0.0, 1.0) * chart_h as f64) as u32;
                    fill_rect(
                        &mut img,
                        x,
                        MARGIN + chart_h - bh,
                        bar_w,
                        bh,
                        palette[mi % palette.len()],
                    );
                }
                None => {
                    fill_rect(&mut img, x, MARGIN + chart_h - 6, bar_w, 6, ABSENT);
                }
            }
        }
    }
    save(&img, path)
}

/// Symmetric group-pair percentage matrix for one attribute.
pub fn render_false_accept_matrix(m: &FalseAcceptMatrix, path: &Path) -> Result<()> {
    if m.cardinality == 0 {
        return Err(DebfaceError::EmptyInput(
            "render_false_accept_matrix".into(),
        ));
    }
    let k = m.cardinality as u32;
    let mut img = grid_image(k, k);
    let max = m
        .percent
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for i in 0..m.cardinality {
        for j in 0..m.cardinality {
            let v = m.percent[i.min(j)][i.max(j)];
            put_cell(&mut img, i as u32, j as u32, heat_color(v / max));
        }
    }
    save(&img, path)
}

/// Per-partition top-decile imposter scores, one bar group per
/// homogeneity pattern, one bar per report (model). Scores are mapped
/// from [-1,1] onto the bar height; absent partitions are gray stubs.
pub fn render_percentile_comparison(reports: &[&PercentileReport], path: &Path) -> Result<()> {
    if reports.is_empty() || reports.iter().any(|r| r.partitions.is_empty()) {
        return Err(DebfaceError::EmptyInput(
            "render_percentile_comparison".into(),
        ));
    }
    let groups = reports.iter().map(|r| r.partitions.len()).max().unwrap() as u32;
    let models = reports.len() as u32;
    let bar_w = 14u32;
    let group_w = models * (bar_w + 2) + 10;
    let chart_h = 160u32;
    let w = 2 * MARGIN + groups * group_w;
    let h = 2 * MARGIN + chart_h;
    let mut img = RgbImage::new(w, h);
    fill_rect(&mut img, 0, 0, w, h, BACKGROUND);
    let palette = [
        Rgb([60, 100, 200]),
        Rgb([210, 120, 40]),
        Rgb([60, 170, 90]),
        Rgb([160, 70, 160]),
    ];
    for gi in 0..groups as usize {
        for (mi, r) in reports.iter().enumerate() {
            let x = MARGIN + gi as u32 * group_w + mi as u32 * (bar_w + 2);
            let value = r.partitions.get(gi).and_then(|p| p.percentile_score);
            match value {
                Some(v) => {
                    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                    let bh = (t * chart_h as f64) as u32;
                    fill_rect(
                        &mut img,
                        x,
                        MARGIN + chart_h - bh,
                        bar_w,
                        bh.max(1),
                        palette[mi % palette.len()],
                    );
                }
                None => {
                    fill_rect(&mut img, x, MARGIN + chart_h - 6, bar_w, 6, ABSENT);
                }
            }
        }
    }
    save(&img, path)
}
