//! Evaluation metrics: PSNR against hidden ground truth, an identity proxy,
//! a motion-stability score and render speed.

use std::time::Instant;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::avatar::{deform_gaussians, GaussianAvatar};
use crate::headmodel::{deform_mesh, CameraPose, Expression, ParametricHead};
use crate::oracle::OracleWorld;
use crate::render::{render_avatar, render_pinhole, Image};
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 100.0;
pub const MIN_STABILITY_FRAMES: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub id_consistency: f64,
    pub motion_stability: f64,
    /// Absent when no avatar is available to time (frame-directory evaluation).
    pub render_fps: Option<f64>,
}

pub fn psnr(image: &Image, reference: &Image) -> Result<f64> {
    let mse = image.mse(reference)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Mean per-frame PSNR of two equally long videos.
pub fn video_psnr(frames: &[Image], reference: &[Image]) -> Result<f64> {
    if frames.is_empty() || frames.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} reference frames",
            frames.len(),
            reference.len()
        )));
    }
    let mut total = 0.0;
    for (f, r) in frames.iter().zip(reference) {
        total += psnr(f, r)?;
    }
    Ok(total / frames.len() as f64)
}

/// Per-view PSNR of the avatar against the hidden ground truth.
pub fn held_out_psnr(
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    world: &OracleWorld,
    views: &[(CameraPose, Expression)],
    width: usize,
    height: usize,
) -> Vec<f64> {
    views
        .iter()
        .map(|(c, e)| {
            let ours = render_avatar(avatar, head, e, c, width, height, world.background);
            let truth = world.gt_render(c, e, width, height);
            psnr(&ours, &truth).expect("same resolution")
        })
        .collect()
}

const EMBED_GRID: usize = 8;
const HIST_BINS: usize = 4;

/// Hand-crafted appearance embedding: an 8x8 area-averaged thumbnail plus a
/// 4x4x4 color histogram, mean-centered.
pub fn identity_embedding(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut out = Vec::with_capacity(3 * EMBED_GRID * EMBED_GRID + HIST_BINS.pow(3));
    for gy in 0..EMBED_GRID {
        let (y0, y1) = (gy * h / EMBED_GRID, ((gy + 1) * h / EMBED_GRID).max(gy * h / EMBED_GRID + 1));
        for gx in 0..EMBED_GRID {
            let (x0, x1) = (gx * w / EMBED_GRID, ((gx + 1) * w / EMBED_GRID).max(gx * w / EMBED_GRID + 1));
            let mut sum = [0.0; 3];
            let mut n = 0.0;
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    let p = img.pixel(x, y);
                    for k in 0..3 {
                        sum[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            out.extend(sum.map(|s| s / f64::max(n, 1.0)));
        }
    }
    let mut hist = vec![0.0; HIST_BINS.pow(3)];
    let bin = |v: f64| ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
    for p in img.rgb.chunks_exact(3) {
        hist[(bin(p[0]) * HIST_BINS + bin(p[1])) * HIST_BINS + bin(p[2])] += 1.0;
    }
    // Scaled so both halves of the embedding carry comparable weight.
    let scale = EMBED_GRID as f64 / (w * h).max(1) as f64;
    out.extend(hist.iter().map(|c| c * scale));
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between each frame's embedding and the reference's.
pub fn id_consistency(frames: &[Image], reference: &Image) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("identity consistency needs at least one frame".into()));
    }
    let r = identity_embedding(reference);
    Ok(frames
        .iter()
        .map(|f| cosine(&identity_embedding(f), &r))
        .sum::<f64>()
        / frames.len() as f64)
}

fn luminance(img: &Image) -> Vec<f64> {
    img.rgb
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

struct BlockMatcher<'a> {
    width: usize,
    reference: &'a [f64],
    block: usize,
    radius: i64,
}

impl BlockMatcher<'_> {
    /// Mean-removed block with top-left corner `(x, y)`.
    fn patch(&self, frame: &[f64], x: i64, y: i64) -> Vec<f64> {
        let b = self.block as i64;
        let mut v: Vec<f64> = (0..b)
            .flat_map(|j| (0..b).map(move |i| (x + i, y + j)))
            .map(|(px, py)| frame[py as usize * self.width + px as usize])
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|p| *p -= mean);
        v
    }

    /// Sub-pixel displacement of the block at `(x, y)` from the reference
    /// frame to `frame`.
    fn displacement(&self, frame: &[f64], x: i64, y: i64) -> (f64, f64) {
        let base = self.patch(self.reference, x, y);
        let r = self.radius;
        let side = (2 * r + 1) as usize;
        let mut cost = vec![0.0; side * side];
        for dy in -r..=r {
            for dx in -r..=r {
                let p = self.patch(frame, x + dx, y + dy);
                cost[(dy + r) as usize * side + (dx + r) as usize] =
                    base.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        // Zero displacement wins ties.
        let mut best = (0i64, 0i64);
        let at = |dx: i64, dy: i64| cost[(dy + r) as usize * side + (dx + r) as usize];
        for dy in -r..=r {
            for dx in -r..=r {
                if at(dx, dy) < at(best.0, best.1) {
                    best = (dx, dy);
                }
            }
        }
        let refine = |lo: f64, mid: f64, hi: f64| {
            let denom = lo - 2.0 * mid + hi;
            if denom > 0.0 {
                (0.5 * (lo - hi) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        };
        let (bx, by) = best;
        let sx = if bx.abs() < r {
            refine(at(bx - 1, by), at(bx, by), at(bx + 1, by))
        } else {
            0.0
        };
        let sy = if by.abs() < r {
            refine(at(bx, by - 1), at(bx, by), at(bx, by + 1))
        } else {
            0.0
        };
        (bx as f64 + sx, by as f64 + sy)
    }
}

fn low_band_fraction(planner: &mut FftPlanner<f64>, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let fft = planner.plan_fft_forward(n);
    let energy = |signal: &[f64]| -> Vec<f64> {
        let mean = signal.iter().sum::<f64>() / n as f64;
        let mut buf: Vec<Complex<f64>> = signal.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
        fft.process(&mut buf);
        buf[1..=n / 2].iter().map(|c| c.norm_sqr()).collect()
    };
    let (ex, ey) = (energy(x), energy(y));
    let n_low = ex.len().div_ceil(4).max(1);
    let low: f64 = ex[..n_low].iter().chain(&ey[..n_low]).sum();
    let total: f64 = ex.iter().chain(&ey).sum();
    if total <= 1e-18 {
        1.0
    } else {
        low / total
    }
}

/// Fraction of estimated 2D motion energy in the lowest quarter of the
/// temporal spectrum, averaged over a coarse grid of blocks. A video without
/// motion scores 1.
pub fn motion_stability(frames: &[Image]) -> Result<f64> {
    if frames.len() < MIN_STABILITY_FRAMES {
        return Err(Error::InvalidArgument(format!(
            "motion stability needs at least {MIN_STABILITY_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    if frames.iter().any(|f| f.width != w || f.height != h) {
        return Err(Error::ShapeMismatch("frames differ in size".into()));
    }
    let side = w.min(h);
    let block = (side / 8).max(4);
    let radius = (side / 16).max(2) as i64;
    let margin = radius as usize;
    if w < block + 2 * margin || h < block + 2 * margin {
        return Err(Error::InvalidArgument(format!("frames of {w}x{h} are too small")));
    }
    let gray: Vec<Vec<f64>> = frames.iter().map(luminance).collect();
    let matcher = BlockMatcher {
        width: w,
        reference: &gray[0],
        block,
        radius,
    };
    const GRID: usize = 4;
    let span = |extent: usize, i: usize| -> i64 {
        let lo = margin;
        let hi = extent - margin - block;
        (lo + (hi - lo) * i / (GRID - 1)) as i64
    };
    let mut planner = FftPlanner::new();
    let mut sum = 0.0;
    for gy in 0..GRID {
        for gx in 0..GRID {
            let (x, y) = (span(w, gx), span(h, gy));
            let (dx, dy): (Vec<f64>, Vec<f64>) = gray.iter().map(|f| matcher.displacement(f, x, y)).unzip();
            sum += low_band_fraction(&mut planner, &dx, &dy);
        }
    }
    Ok(sum / (GRID * GRID) as f64)
}

/// Median frames per second of deform-and-render over `n_trials` timed runs,
/// after one warm-up.
pub fn render_fps(
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    camera: &CameraPose,
    width: usize,
    height: usize,
    n_trials: usize,
) -> Result<f64> {
    if n_trials < 10 {
        return Err(Error::InvalidArgument(format!("render_fps needs n_trials >= 10, got {n_trials}")));
    }
    let pin = camera.pinhole(width, height);
    let expr = Expression::neutral();
    let run = || {
        let world = deform_gaussians(avatar, &deform_mesh(head, &expr));
        render_pinhole(&world, &pin, [0.5; 3])
    };
    std::hint::black_box(run());
    let mut fps: Vec<f64> = (0..n_trials)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(run());
            1.0 / t.elapsed().as_secs_f64().max(1e-9)
        })
        .collect();
    Ok(median(&mut fps))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
