//! Summary table and figures for one or more cross-validation runs.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_cross_mut, draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use ndarray::Array2;
use serde::Serialize;

use super::crossval::{RunReport, REPORT_FILE};
use super::eval::OverlaySample;
use crate::error::{Error, Result};
use crate::io::read_json;

pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    n: usize,
    dice: String,
    dice_mean: f64,
    dice_std: f64,
    accuracy: f64,
    both_empty: usize,
}

/// Files written by [`render_report`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub figures: Vec<PathBuf>,
}

pub fn load_run(dir: &Path) -> Result<RunReport> {
    read_json(&dir.join(REPORT_FILE))
}

/// `summary.csv` with one `mean±std` row per run, plus loss curves, Dice
/// histograms and up to `overlays` CAM/mask overlays per run.
pub fn render_report(runs: &[RunReport], out_dir: &Path, overlays: usize) -> Result<ReportFiles> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no runs to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let summary = out_dir.join(SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&summary).map_err(|e| Error::format(&summary, e.to_string()))?;
    for run in runs {
        let a = &run.aggregate;
        w.serialize(SummaryRow {
            method: &run.method,
            n: a.n,
            dice: format!("{:.3}±{:.3}", a.dice_mean, a.dice_std),
            dice_mean: a.dice_mean,
            dice_std: a.dice_std,
            accuracy: a.accuracy,
            both_empty: a.both_empty,
        })
        .map_err(|e| Error::format(&summary, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&summary, e))?;

    let mut figures = Vec::new();
    for run in runs {
        let tag = run.method.replace(['=', ' '], "_");
        let path = out_dir.join(format!("loss_{tag}.png"));
        save(&loss_curves(run), &path)?;
        figures.push(path);
        let path = out_dir.join(format!("dice_hist_{tag}.png"));
        save(&dice_histogram(run.records.iter().map(|r| r.dice), 10), &path)?;
        figures.push(path);
        for s in run.samples.iter().take(2 * overlays) {
            let path = out_dir.join(format!("overlay_{tag}_{}_{}.png", s.case_id, s.view));
            save(&overlay(s, 4), &path)?;
            figures.push(path);
        }
    }
    Ok(ReportFiles { summary, figures })
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

const W: u32 = 480;
const H: u32 = 320;
const PAD: f32 = 20.0;

/// Classification loss (red) and distance loss (blue) per step, folds
/// concatenated, each scaled to its own maximum.
fn loss_curves(run: &RunReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let steps: Vec<_> = run.folds.iter().flat_map(|f| f.history.iter()).collect();
    axes(&mut img);
    let n = steps.len().max(2) as f32 - 1.0;
    for (series, color) in [(steps.iter().map(|s| s.loss1).collect::<Vec<_>>(), Rgb([200, 30, 30])), (steps.iter().map(|s| s.loss2).collect(), Rgb([30, 60, 200]))] {
        let top = series.iter().copied().fold(0.0f64, f64::max).max(1e-12);
        let pt = |i: usize, v: f64| {
            (PAD + (W as f32 - 2.0 * PAD) * i as f32 / n, H as f32 - PAD - (H as f32 - 2.0 * PAD) * (v / top) as f32)
        };
        for i in 1..series.len() {
            draw_line_segment_mut(&mut img, pt(i - 1, series[i - 1]), pt(i, series[i]), color);
        }
    }
    img
}

fn dice_histogram(values: impl Iterator<Item = f64>, bins: usize) -> RgbImage {
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    axes(&mut img);
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f32;
    let bw = (W as f32 - 2.0 * PAD) / bins as f32;
    for (i, c) in counts.iter().enumerate() {
        let h = ((H as f32 - 2.0 * PAD) * *c as f32 / top) as u32;
        if h == 0 {
            continue;
        }
        let x = (PAD + bw * i as f32) as i32 + 1;
        let y = (H as f32 - PAD) as i32 - h as i32;
        draw_filled_rect_mut(&mut img, Rect::at(x, y).of_size((bw as u32).saturating_sub(2).max(1), h), Rgb([70, 130, 180]));
    }
    img
}

fn axes(img: &mut RgbImage) {
    let black = Rgb([0, 0, 0]);
    let (w, h) = (W as f32, H as f32);
    draw_line_segment_mut(img, (PAD, h - PAD), (w - PAD, h - PAD), black);
    draw_line_segment_mut(img, (PAD, PAD), (PAD, h - PAD), black);
}

/// Projection in gray with the CAM blended in red, the true silhouette
/// outline in green, the predicted one in blue and the center as a cross.
/// The first image axis runs left to right, the second bottom to top.
pub fn overlay(s: &OverlaySample, scale: u32) -> RgbImage {
    let (nu, nv) = s.mip.dim();
    let (cu, cv) = s.cam.dim();
    let peak = s.mip.iter().copied().fold(0.0f32, f32::max).max(1e-12);
    let mut img = RgbImage::new(nu as u32 * scale, nv as u32 * scale);
    let truth_edge = edges(&s.truth_silhouette);
    let pred_edge = edges(&s.predicted_silhouette);
    for u in 0..nu {
        for v in 0..nv {
            let g = s.mip[[u, v]] / peak;
            let a = 0.6 * s.cam[[(u * cu / nu).min(cu - 1), (v * cv / nv).min(cv - 1)]].clamp(0.0, 1.0);
            let mut px = [g * (1.0 - a) + a, g * (1.0 - a), g * (1.0 - a)];
            if truth_edge[[u, v]] {
                px = [0.0, 1.0, 0.0];
            }
            if pred_edge[[u, v]] {
                px = [0.2, 0.4, 1.0];
            }
            let rgb = Rgb(px.map(|c| (c.clamp(0.0, 1.0) * 255.0) as u8));
            let row = (nv - 1 - v) as u32 * scale;
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(u as u32 * scale + dx, row + dy, rgb);
                }
            }
        }
    }
    let x = (s.center.u as u32 * scale + scale / 2) as i32;
    let y = ((nv - 1 - s.center.v) as u32 * scale + scale / 2) as i32;
    draw_cross_mut(&mut img, Rgb([255, 220, 0]), x, y);
    img
}

fn edges(m: &Array2<bool>) -> Array2<bool> {
    let (nu, nv) = m.dim();
    Array2::from_shape_fn((nu, nv), |(u, v)| {
        m[[u, v]]
            && (u == 0
                || v == 0
                || u + 1 == nu
                || v + 1 == nv
                || !m[[u - 1, v]]
                || !m[[u + 1, v]]
                || !m[[u, v - 1]]
                || !m[[u, v + 1]])
    })
}
