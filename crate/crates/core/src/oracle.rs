//! Stand-in for a portrait video generator.
//!
//! The oracle owns a hidden ground-truth head. Asked for a video along given
//! cameras and expressions it renders the truth, but perturbs camera, expression
//! and pixels in proportion to how hard the frame is (side views, strong
//! expressions). Guidance frames that already resemble the truth shrink the
//! perturbation, and landmark maps shrink the geometric part further.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::avatar::{initial_log_scale, logit, triangle_frames, triangle_pattern, GaussianAvatar};
use crate::headmodel::{
    landmark_pixels, CameraPose, Expression, HeadConfig, ParametricHead, NUM_BLENDSHAPES,
};
use crate::render::{render_avatar, Image, Video, DEFAULT_BACKGROUND};
use crate::{seed, Error, Result};

/// Resolution of the low-frequency pixel noise grid.
const NOISE_GRID: usize = 8;
const GT_OPACITY: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Camera jitter in degrees at unit difficulty.
    pub sigma_pose: f64,
    pub sigma_expr: f64,
    pub sigma_pixel: f64,
    pub w_view: f64,
    pub w_expr: f64,
    /// Guidance MSE at which guidance stops helping.
    pub tau: f64,
    pub gamma_lm: f64,
    /// Classifier-free guidance weight of a real diffusion backend. Recorded,
    /// not used.
    pub cfg_weight: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            sigma_pose: 8.0,
            sigma_expr: 0.25,
            sigma_pixel: 0.15,
            w_view: 1.0,
            w_expr: 1.0,
            tau: 0.02,
            gamma_lm: 0.5,
            cfg_weight: 3.5,
        }
    }
}

impl CorruptionConfig {
    /// No corruption at all: the oracle returns ground truth.
    pub fn disabled() -> Self {
        CorruptionConfig {
            sigma_pose: 0.0,
            sigma_expr: 0.0,
            sigma_pixel: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let sigmas = [self.sigma_pose, self.sigma_expr, self.sigma_pixel, self.w_view, self.w_expr];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err("sigmas and difficulty weights must be finite and non-negative".into());
        }
        if !(self.tau > 0.0) {
            return Err("tau must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma_lm) {
            return Err("gamma_lm must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Hidden ground truth plus the corruption model.
#[derive(Clone, Debug)]
pub struct OracleWorld {
    pub gt_head: ParametricHead,
    /// Per-vertex identity colors.
    pub gt_texture: Vec<[f64; 3]>,
    pub corruption: CorruptionConfig,
    pub seed: u64,
    pub background: [f64; 3],
    gt_avatar: GaussianAvatar,
}

/// Request for one video.
#[derive(Clone, Debug, Default)]
pub struct GuidedRequest {
    pub cameras: Vec<CameraPose>,
    pub expressions: Vec<Expression>,
    /// Avatar renders along the same cameras and expressions.
    pub guidance_frames: Option<Video>,
    pub landmark_frames: Option<Video>,
    pub sample_seed: u64,
}

impl GuidedRequest {
    pub fn unguided(cameras: Vec<CameraPose>, expressions: Vec<Expression>, sample_seed: u64) -> Self {
        GuidedRequest {
            cameras,
            expressions,
            guidance_frames: None,
            landmark_frames: None,
            sample_seed,
        }
    }
}

/// What the oracle actually rendered for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTrace {
    pub camera: CameraPose,
    pub expression: Expression,
    pub guidance_quality: f64,
    pub difficulty: f64,
}

/// Seeded identity texture over the unit-sphere directions of the head.
fn identity_texture(head: &ParametricHead, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = seed::rng(seed, "oracle-texture", 0);
    let skin = [
        0.80 + rng.random_range(-0.08..0.08),
        0.60 + rng.random_range(-0.08..0.08),
        0.48 + rng.random_range(-0.08..0.08),
    ];
    let hair = [
        rng.random_range(0.08..0.35),
        rng.random_range(0.05..0.22),
        rng.random_range(0.03..0.15),
    ];
    let lips = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.12..0.25),
        rng.random_range(0.18..0.3),
    ];
    let band_freq = rng.random_range(2.0..4.0);
    let band_angle: f64 = rng.random_range(-0.6..0.6);
    let band_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let hairline = rng.random_range(0.45..0.6);
    let front = |x: f64, y: f64| nalgebra::Vector3::new(x, y, (1.0 - x * x - y * y).max(0.0).sqrt());

    head.sphere_dirs
        .iter()
        .map(|u| {
            let along = u.y * band_angle.cos() + u.x * band_angle.sin();
            let band = 1.0 + 0.12 * (std::f64::consts::PI * band_freq * along + band_phase).sin();
            let mut c = skin.map(|s| s * band);
            for side in [-1.0, 1.0] {
                let cheek = (u - front(0.45 * side, -0.2)).norm();
                if cheek < 0.22 {
                    let w = 1.0 - cheek / 0.22;
                    c = [c[0] + 0.12 * w, c[1] - 0.05 * w, c[2] - 0.03 * w];
                }
            }
            if u.y > hairline || (u.z < -0.25 && u.y > -0.3) {
                c = hair;
            }
            for side in [-1.0, 1.0] {
                let brow = (u - front(0.30 * side, 0.47)).norm();
                if brow < 0.13 {
                    c = hair.map(|h| h * 0.8);
                }
                let eye = (u - front(0.31 * side, 0.24)).norm();
                if eye < 0.10 {
                    c = [0.08, 0.06, 0.10];
                } else if eye < 0.16 {
                    c = [0.93, 0.93, 0.90];
                }
            }
            let mx = u.x / 0.26;
            let my = (u.y + 0.45) / 0.11;
            if u.z > 0.0 && mx * mx + my * my < 1.0 {
                c = lips;
            }
            c.map(|v| v.clamp(0.0, 1.0))
        })
        .collect()
}

/// Dense, opaque Gaussian avatar colored by the identity texture.
fn ground_truth_avatar(head: &ParametricHead, texture: &[[f64; 3]]) -> GaussianAvatar {
    const PER_TRIANGLE: usize = 4;
    let mesh = head.neutral_mesh();
    let frames = triangle_frames(&mesh, None);
    let pattern = triangle_pattern(PER_TRIANGLE);
    let log_scale = initial_log_scale(PER_TRIANGLE).map(|s| s + 0.35);
    let mut a = GaussianAvatar::default();
    for (t, frame) in frames.iter().enumerate() {
        let [p0, p1, p2] = mesh.triangle(t);
        let tri = head.triangles[t];
        for b in &pattern {
            let p = p0 * b[0] + p1 * b[1] + p2 * b[2];
            let color: [f64; 3] =
                std::array::from_fn(|k| (0..3).map(|v| b[v] * texture[tri[v] as usize][k]).sum());
            a.triangle_id.push(t as u32);
            a.mu_local.push(frame.to_local(&p).into());
            a.rot_local.push([1.0, 0.0, 0.0, 0.0]);
            a.log_scale.push(log_scale);
            a.opacity_logit.push(logit(GT_OPACITY));
            a.color.push(color);
        }
    }
    a
}

impl OracleWorld {
    pub fn new(head_config: &HeadConfig, corruption: CorruptionConfig, seed: u64) -> Self {
        let gt_head = ParametricHead::new(head_config);
        let gt_texture = identity_texture(&gt_head, seed);
        let gt_avatar = ground_truth_avatar(&gt_head, &gt_texture);
        OracleWorld {
            gt_head,
            gt_texture,
            corruption,
            seed,
            background: DEFAULT_BACKGROUND,
            gt_avatar,
        }
    }

    /// The hidden avatar itself, for tests that need a converged learner.
    #[cfg(test)]
    pub(crate) fn gt_avatar(&self) -> &GaussianAvatar {
        &self.gt_avatar
    }

    pub fn difficulty(&self, camera: &CameraPose, expr: &Expression) -> f64 {
        difficulty(&self.corruption, camera, expr)
    }

    /// Clean render of the hidden truth. Only evaluation code should call this.
    pub fn gt_render(&self, camera: &CameraPose, expr: &Expression, width: usize, height: usize) -> Image {
        render_avatar(&self.gt_avatar, &self.gt_head, expr, camera, width, height, self.background)
    }

    pub fn gt_video(&self, cameras: &[CameraPose], expressions: &[Expression], width: usize, height: usize) -> Video {
        cameras
            .par_iter()
            .zip(expressions.par_iter())
            .map(|(c, e)| self.gt_render(c, e, width, height))
            .collect()
    }

    pub fn generate(&self, request: &GuidedRequest, width: usize, height: usize) -> Result<Video> {
        Ok(self.generate_detailed(request, width, height)?.0)
    }

    /// Like [`OracleWorld::generate`], also returning what each frame used.
    pub fn generate_detailed(
        &self,
        request: &GuidedRequest,
        width: usize,
        height: usize,
    ) -> Result<(Video, Vec<FrameTrace>)> {
        validate_request(request, width, height)?;
        let c = &self.corruption;
        let lm_factor = if request.landmark_frames.is_some() {
            1.0 - c.gamma_lm
        } else {
            1.0
        };
        let frames: Vec<(Image, FrameTrace)> = (0..request.cameras.len())
            .into_par_iter()
            .map(|i| {
                let camera = request.cameras[i];
                let expr = request.expressions[i];
                let d = self.difficulty(&camera, &expr);
                let mut rng = seed::rng(seed::derive(self.seed, "oracle-sample", request.sample_seed), "oracle-frame", i as u64);
                let n_az: f64 = rng.sample(StandardNormal);
                let n_el: f64 = rng.sample(StandardNormal);
                let n_expr: [f64; NUM_BLENDSHAPES] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID * 3)
                    .map(|_| rng.sample(StandardNormal))
                    .collect();

                let gt = self.gt_render(&camera, &expr, width, height);
                let g = match &request.guidance_frames {
                    Some(guide) => {
                        let mse = guide[i].mse(&gt).expect("shapes checked");
                        (1.0 - mse / c.tau).clamp(0.0, 1.0)
                    }
                    None => 0.0,
                };
                let js = (1.0 - g) * lm_factor * d;
                let used_camera = CameraPose {
                    azimuth: camera.azimuth + js * c.sigma_pose * n_az,
                    elevation: camera.elevation + js * c.sigma_pose * n_el,
                    ..camera
                };
                let used_expr = Expression::new(
                    std::array::from_fn(|b| expr.coefficients[b] + js * c.sigma_expr * n_expr[b]),
                    expr.pose,
                );
                let mut out = if js == 0.0 {
                    gt
                } else {
                    self.gt_render(&used_camera, &used_expr, width, height)
                };
                let amp = (1.0 - g) * d * c.sigma_pixel;
                if amp > 0.0 {
                    add_smooth_noise(&mut out, &grid, amp);
                }
                let trace = FrameTrace {
                    camera: if js == 0.0 { camera } else { used_camera },
                    expression: if js == 0.0 { expr } else { used_expr },
                    guidance_quality: g,
                    difficulty: d,
                };
                (out, trace)
            })
            .collect();
        Ok(frames.into_iter().unzip())
    }
}

pub fn difficulty(c: &CorruptionConfig, camera: &CameraPose, expr: &Expression) -> f64 {
    c.w_view * (camera.azimuth - 90.0).abs() / 90.0 + c.w_expr * expr.intensity()
}

fn validate_request(request: &GuidedRequest, width: usize, height: usize) -> Result<()> {
    let n = request.cameras.len();
    if n == 0 || request.expressions.len() != n {
        return Err(Error::InvalidRequest(format!(
            "{} cameras and {} expressions",
            n,
            request.expressions.len()
        )));
    }
    if let Some(bad) = request.cameras.iter().position(|c| !c.is_valid()) {
        return Err(Error::InvalidRequest(format!("camera {bad} is invalid")));
    }
    for (name, video) in [
        ("guidance", &request.guidance_frames),
        ("landmark", &request.landmark_frames),
    ] {
        if let Some(v) = video {
            if v.len() != n {
                return Err(Error::InvalidRequest(format!("{} {name} frames for {n} cameras", v.len())));
            }
            if let Some(f) = v.iter().find(|f| f.width != width || f.height != height) {
                return Err(Error::InvalidRequest(format!(
                    "{name} frame is {}x{}, requested {width}x{height}",
                    f.width, f.height
                )));
            }
        }
    }
    Ok(())
}

/// Adds `amp` times a bilinearly upsampled normal grid, then clamps.
fn add_smooth_noise(img: &mut Image, grid: &[f64], amp: f64) {
    let (w, h) = (img.width, img.height);
    let n = NOISE_GRID;
    let at = |gx: usize, gy: usize, k: usize| grid[3 * (gy * n + gx) + k];
    for y in 0..h {
        let fy = (y as f64 + 0.5) / h as f64 * (n - 1) as f64;
        let y0 = (fy as usize).min(n - 2);
        let ty = fy - y0 as f64;
        for x in 0..w {
            let fx = (x as f64 + 0.5) / w as f64 * (n - 1) as f64;
            let x0 = (fx as usize).min(n - 2);
            let tx = fx - x0 as f64;
            for k in 0..3 {
                let v = at(x0, y0, k) * (1.0 - tx) * (1.0 - ty)
                    + at(x0 + 1, y0, k) * tx * (1.0 - ty)
                    + at(x0, y0 + 1, k) * (1.0 - tx) * ty
                    + at(x0 + 1, y0 + 1, k) * tx * ty;
                let p = 3 * (y * w + x) + k;
                img.rgb[p] = (img.rgb[p] + amp * v).clamp(0.0, 1.0);
            }
        }
    }
}

/// Root-mean-square pixel displacement of the landmarks the oracle actually
/// used, relative to where they belong.
pub fn landmark_deviation(
    head: &ParametricHead,
    traces: &[FrameTrace],
    cameras: &[CameraPose],
    expressions: &[Expression],
    width: usize,
    height: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((t, c), e) in traces.iter().zip(cameras).zip(expressions) {
        let used = landmark_pixels(head, &t.expression, &t.camera, width, height);
        let truth = landmark_pixels(head, e, c, width, height);
        for (a, b) in used.iter().zip(&truth) {
            if a.visible && b.visible {
                let (dx, dy) = (a.pixel[0] - b.pixel[0], a.pixel[1] - b.pixel[1]);
                sum += dx * dx + dy * dy;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64).sqrt()
    }
}

/// Mean squared difference between consecutive frames.
pub fn frame_difference_energy(video: &[Image]) -> f64 {
    if video.len() < 2 {
        return 0.0;
    }
    video
        .windows(2)
        .map(|w| w[1].mse(&w[0]).expect("frames share a shape"))
        .sum::<f64>()
        / (video.len() - 1) as f64
}
