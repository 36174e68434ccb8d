//! Gaussian splatting: projection, tiled alpha compositing and its analytic
//! derivative.

mod backward;
mod frame;
pub mod reference;

pub use backward::{image_backward, render_backward, RenderGrads};
pub use frame::{load_sequence, save_sequence, Image, Video};

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::avatar::{deform_gaussians, GaussianAvatar, WorldGaussians};
use crate::headmodel::{deform_mesh, CameraPose, Expression, ParametricHead, Pinhole, NEAR_PLANE};

pub const TILE: usize = 16;
/// Added to the diagonal of every projected covariance (pixels squared).
pub const COV2D_REGULARIZER: f64 = 0.3;
/// Splat support is cut at this Mahalanobis distance squared (3 sigma).
pub const MAX_MAHALANOBIS_SQ: f64 = 9.0;
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-6;
pub const DEFAULT_BACKGROUND: [f64; 3] = [0.5; 3];

/// A Gaussian projected to screen space.
#[derive(Clone, Copy, Debug)]
pub struct Splat {
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse 2D covariance as (a, b, c) of `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Inclusive pixel range `[x0, y0, x1, y1]` covering the 3-sigma ellipse.
    pub bbox: [usize; 4],
}

impl Splat {
    /// Alpha at pixel `(x, y)`, or `None` outside the splat's support.
    #[inline]
    pub fn alpha_at(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let dx = x as f64 + 0.5 - self.mean[0];
        let dy = y as f64 + 0.5 - self.mean[1];
        let [a, b, c] = self.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if !(q <= MAX_MAHALANOBIS_SQ) {
            return None;
        }
        let g = (-0.5 * q).exp();
        let alpha = self.opacity * g;
        (alpha >= MIN_ALPHA).then_some((alpha, g))
    }
}

/// Intermediate quantities of the projection, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Projected {
    pub cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov_cam: Matrix3<f64>,
    pub conic: [f64; 3],
    pub mean: [f64; 2],
}

pub(crate) fn project_gaussian(pin: &Pinhole, mean: &Vector3<f64>, cov: &Matrix3<f64>) -> Option<Projected> {
    let t = pin.to_camera(mean);
    if t.z < NEAR_PLANE {
        return None;
    }
    let f = pin.focal;
    let iz = 1.0 / t.z;
    let jacobian = Matrix2x3::new(
        f * iz,
        0.0,
        -f * t.x * iz * iz,
        0.0,
        -f * iz,
        f * t.y * iz * iz,
    );
    let w = &pin.world_to_cam;
    let cov_cam = w * cov * w.transpose();
    let cov2 = jacobian * cov_cam * jacobian.transpose();
    let a = cov2[(0, 0)] + COV2D_REGULARIZER;
    let b = 0.5 * (cov2[(0, 1)] + cov2[(1, 0)]);
    let c = cov2[(1, 1)] + COV2D_REGULARIZER;
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    Some(Projected {
        cam: t,
        jacobian,
        cov_cam,
        conic: [c / det, -b / det, a / det],
        mean: [pin.cx + f * t.x * iz, pin.cy - f * t.y * iz],
    })
}

/// Projects every visible Gaussian and returns the splats sorted front to
/// back (ties broken by index).
pub fn project_splats(world: &WorldGaussians, pin: &Pinhole) -> Vec<Splat> {
    let (w, h) = (pin.width as f64, pin.height as f64);
    let mut splats: Vec<Splat> = (0..world.len())
        .filter_map(|i| {
            let p = project_gaussian(pin, &world.means[i], &world.covariances[i])?;
            let [ca, cb, cc] = p.conic;
            // Covariance from the conic, then the bounding radius.
            let det = ca * cc - cb * cb;
            let (a, c) = (cc / det, ca / det);
            let b = -cb / det;
            let mid = 0.5 * (a + c);
            let lambda = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
            let r = MAX_MAHALANOBIS_SQ.sqrt() * lambda.sqrt();
            let [mx, my] = p.mean;
            let x0 = (mx - r - 0.5).floor() - 1.0;
            let x1 = (mx + r - 0.5).ceil() + 1.0;
            let y0 = (my - r - 0.5).floor() - 1.0;
            let y1 = (my + r - 0.5).ceil() + 1.0;
            if !(x1 >= 0.0 && y1 >= 0.0 && x0 < w && y0 < h) {
                return None;
            }
            Some(Splat {
                index: i,
                mean: p.mean,
                conic: p.conic,
                depth: p.cam.z,
                opacity: world.opacities[i],
                color: world.colors[i].into(),
                bbox: [
                    x0.max(0.0) as usize,
                    y0.max(0.0) as usize,
                    x1.min(w - 1.0) as usize,
                    y1.min(h - 1.0) as usize,
                ],
            })
        })
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

/// Per-tile lists of splat positions (into the sorted splat list), in depth
/// order.
pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub lists: Vec<Vec<u32>>,
}

impl TileGrid {
    pub fn build(splats: &[Splat], width: usize, height: usize) -> Self {
        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (k, s) in splats.iter().enumerate() {
            let [x0, y0, x1, y1] = s.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    lists[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
        TileGrid { tiles_x, lists }
    }

    pub fn pixels(&self, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let xs = tx * TILE..((tx + 1) * TILE).min(width);
        let ys = ty * TILE..((ty + 1) * TILE).min(height);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }
}

/// Composites splats (already in front-to-back order) at one pixel. Returns
/// rgb and the final transmittance.
#[inline]
fn composite<'a>(
    splats: impl Iterator<Item = &'a Splat>,
    x: usize,
    y: usize,
    background: [f64; 3],
) -> ([f64; 3], f64) {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    for s in splats {
        let Some((alpha, _)) = s.alpha_at(x, y) else {
            continue;
        };
        let w = alpha * t;
        for k in 0..3 {
            rgb[k] += w * s.color[k];
        }
        t *= 1.0 - alpha;
        if t < MIN_TRANSMITTANCE {
            break;
        }
    }
    for k in 0..3 {
        rgb[k] = (rgb[k] + t * background[k]).clamp(0.0, 1.0);
    }
    (rgb, t)
}

/// Renders world-space Gaussians.
pub fn render(world: &WorldGaussians, camera: &CameraPose, width: usize, height: usize, background: [f64; 3]) -> Image {
    render_pinhole(world, &camera.pinhole(width, height), background)
}

pub fn render_pinhole(world: &WorldGaussians, pin: &Pinhole, background: [f64; 3]) -> Image {
    let (width, height) = (pin.width, pin.height);
    let splats = project_splats(world, pin);
    let grid = TileGrid::build(&splats, width, height);
    let tiles: Vec<Vec<(usize, [f64; 3], f64)>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &grid.lists[tile];
            grid.pixels(tile, width, height)
                .map(|(x, y)| {
                    let (rgb, t) = composite(list.iter().map(|&k| &splats[k as usize]), x, y, background);
                    (y * width + x, rgb, t)
                })
                .collect()
        })
        .collect();
    let mut image = Image::filled(width, height, background, 0.0);
    for (p, rgb, t) in tiles.into_iter().flatten() {
        image.rgb[3 * p..3 * p + 3].copy_from_slice(&rgb);
        image.alpha[p] = (1.0 - t).clamp(0.0, 1.0);
    }
    image
}

/// Deforms the avatar for `expr` and renders it.
pub fn render_avatar(
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    expr: &Expression,
    camera: &CameraPose,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Image {
    let world = deform_gaussians(avatar, &deform_mesh(head, expr));
    render(&world, camera, width, height, background)
}

/// Renders one frame per (camera, expression) pair.
pub fn render_video(
    avatar: &GaussianAvatar,
    head: &ParametricHead,
    cameras: &[CameraPose],
    expressions: &[Expression],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Video {
    cameras
        .iter()
        .zip(expressions)
        .map(|(c, e)| render_avatar(avatar, head, e, c, width, height, background))
        .collect()
}
