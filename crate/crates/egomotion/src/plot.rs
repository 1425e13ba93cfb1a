//! Static PNG figures: overhead trajectories and per-metric bar charts.

use std::path::Path;

use egomotion_core::metrics::MetricReport;
use egomotion_core::{GlobalMotion, SkeletonConfig};
use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{HarnessError, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const MARGIN: f64 = 24.0;
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn color(i: usize) -> Rgb<u8> {
    PALETTE[i % PALETTE.len()]
}

fn lighten(c: Rgb<u8>) -> Rgb<u8> {
    Rgb(c.0.map(|v| ((v as u16 + 2 * 255) / 3) as u8))
}

/// Planar `(x, z)` path of one joint, one point per frame.
pub fn joint_path(m: &GlobalMotion, joint: usize) -> Vec<(f64, f64)> {
    (0..m.num_frames()).map(|t| {
        let p = m.joint(t, joint);
        (p.x, p.z)
    })
    .collect()
}

/// Overhead view: head path in full colour, foot paths lighter, start marked with a square.
pub fn trajectory_plot(motions: &[&GlobalMotion], skel: &SkeletonConfig, size: u32) -> Result<RgbImage> {
    if motions.is_empty() || motions.iter().any(|m| m.num_frames() == 0) {
        return Err(HarnessError::Plot("no frames to plot".into()));
    }
    let mut paths: Vec<(Vec<(f64, f64)>, Rgb<u8>)> = Vec::new();
    for (i, m) in motions.iter().enumerate() {
        for &f in &skel.foot_joints {
            paths.push((joint_path(m, f), lighten(color(i))));
        }
        paths.push((joint_path(m, skel.head_joint), color(i)));
    }
    let pts = paths.iter().flat_map(|(p, _)| p.iter());
    let (mut x0, mut x1, mut z0, mut z1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, z) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    if !(x0.is_finite() && x1.is_finite() && z0.is_finite() && z1.is_finite()) {
        return Err(HarnessError::Plot("non-finite joint positions".into()));
    }
    let span = (x1 - x0).max(z1 - z0).max(1e-3);
    let scale = (size as f64 - 2.0 * MARGIN) / span;
    let (cx, cz) = ((x0 + x1) / 2.0, (z0 + z1) / 2.0);
    let half = size as f64 / 2.0;
    let to_px = |(x, z): (f64, f64)| ((half + (x - cx) * scale) as f32, (half - (z - cz) * scale) as f32);

    let mut img = RgbImage::from_pixel(size, size, BACKGROUND);
    draw_hollow_rect_mut(&mut img, Rect::at(0, 0).of_size(size, size), AXIS);
    for (path, c) in &paths {
        for w in path.windows(2) {
            draw_line_segment_mut(&mut img, to_px(w[0]), to_px(w[1]), *c);
        }
    }
    for (i, m) in motions.iter().enumerate() {
        let (x, y) = to_px(joint_path(m, skel.head_joint)[0]);
        draw_filled_rect_mut(&mut img, Rect::at(x as i32 - 3, y as i32 - 3).of_size(7, 7), color(i));
    }
    Ok(img)
}

/// One panel per metric, one bar per report; bars are scaled to the panel's largest magnitude.
pub fn metric_bars(reports: &[(String, MetricReport)], panel: u32) -> Result<RgbImage> {
    if reports.is_empty() {
        return Err(HarnessError::Plot("no reports to plot".into()));
    }
    for (name, r) in reports {
        r.validate().map_err(|e| HarnessError::Plot(format!("report {name}: {e}")))?;
    }
    let metrics = reports[0].1.entries().len() as u32;
    let mut img = RgbImage::from_pixel(panel * metrics, panel, BACKGROUND);
    let n = reports.len() as u32;
    let inner = panel.saturating_sub(2 * MARGIN as u32).max(n);
    let bar = (inner / n).max(1);
    for m in 0..metrics as usize {
        let left = m as u32 * panel;
        draw_hollow_rect_mut(&mut img, Rect::at(left as i32, 0).of_size(panel, panel), AXIS);
        let values: Vec<f64> = reports.iter().map(|(_, r)| r.entries()[m].1).collect();
        let top = values.iter().fold(0f64, |a, v| a.max(v.abs()));
        let baseline = panel - MARGIN as u32;
        for (i, v) in values.iter().enumerate() {
            let frac = if top > 0.0 { v.abs() / top } else { 0.0 };
            let h = ((frac * inner as f64).round() as u32).max(1);
            let x = left + MARGIN as u32 + i as u32 * bar;
            draw_filled_rect_mut(
                &mut img,
                Rect::at(x as i32, (baseline - h.min(baseline)) as i32).of_size(bar.saturating_sub(2).max(1), h),
                color(i),
            );
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
