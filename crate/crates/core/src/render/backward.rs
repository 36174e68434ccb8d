use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use super::{project_gaussian, project_splats, Splat, TileGrid, MIN_TRANSMITTANCE};
use crate::avatar::{deform_backward, AvatarGrads, GaussianAvatar, TriangleFrame, WorldGaussians, WorldGrads};
use crate::headmodel::Pinhole;
use crate::{Error, Result};

/// Loss gradient on the learnable avatar parameters.
pub type RenderGrads = AvatarGrads;

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    local: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
}

/// Accumulates screen-space gradients for every splat in one tile.
fn tile_backward(
    splats: &[Splat],
    list: &[u32],
    pixels: impl Iterator<Item = (usize, usize)>,
    width: usize,
    background: [f64; 3],
    image_grad: &[f64],
) -> Vec<ScreenGrad> {
    let mut acc = vec![ScreenGrad::default(); list.len()];
    let mut contrib: Vec<Contribution> = Vec::new();
    for (x, y) in pixels {
        let p = y * width + x;
        let dc = [image_grad[3 * p], image_grad[3 * p + 1], image_grad[3 * p + 2]];
        if dc == [0.0; 3] {
            continue;
        }
        contrib.clear();
        let mut t = 1.0;
        for (local, &k) in list.iter().enumerate() {
            let Some((alpha, gauss)) = splats[k as usize].alpha_at(x, y) else {
                continue;
            };
            contrib.push(Contribution {
                local,
                alpha,
                gauss,
                transmittance: t,
            });
            t *= 1.0 - alpha;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        // Walk back to front; `behind` is the color composited behind the
        // current splat.
        let mut behind = background;
        for c in contrib.iter().rev() {
            let s = &splats[list[c.local] as usize];
            let g = &mut acc[c.local];
            let mut d_alpha = 0.0;
            for k in 0..3 {
                d_alpha += dc[k] * c.transmittance * (s.color[k] - behind[k]);
                g.color[k] += dc[k] * c.alpha * c.transmittance;
                behind[k] = s.color[k] * c.alpha + (1.0 - c.alpha) * behind[k];
            }
            g.opacity += d_alpha * c.gauss;
            let dq = -0.5 * d_alpha * s.opacity * c.gauss;
            let dx = x as f64 + 0.5 - s.mean[0];
            let dy = y as f64 + 0.5 - s.mean[1];
            let [a, b, cc] = s.conic;
            g.mean[0] += -2.0 * dq * (a * dx + b * dy);
            g.mean[1] += -2.0 * dq * (b * dx + cc * dy);
            g.conic[0] += dq * dx * dx;
            g.conic[1] += dq * 2.0 * dx * dy;
            g.conic[2] += dq * dy * dy;
        }
    }
    acc
}

/// Gradient of a scalar loss with respect to world Gaussians, given its
/// gradient with respect to the rendered rgb (row-major, 3 per pixel).
pub fn image_backward(
    world: &WorldGaussians,
    pin: &Pinhole,
    background: [f64; 3],
    image_grad: &[f64],
) -> Result<WorldGrads> {
    let (width, height) = (pin.width, pin.height);
    if image_grad.len() != 3 * width * height {
        return Err(Error::ShapeMismatch(format!(
            "image gradient has {} values, expected {}",
            image_grad.len(),
            3 * width * height
        )));
    }
    let splats = project_splats(world, pin);
    let grid = TileGrid::build(&splats, width, height);
    let per_tile: Vec<Vec<ScreenGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            tile_backward(
                &splats,
                &grid.lists[tile],
                grid.pixels(tile, width, height),
                width,
                background,
                image_grad,
            )
        })
        .collect();
    // Serial reduction in tile order keeps the sums deterministic.
    let mut screen = vec![ScreenGrad::default(); splats.len()];
    for (tile, acc) in per_tile.iter().enumerate() {
        for (local, g) in acc.iter().enumerate() {
            screen[grid.lists[tile][local] as usize].add(g);
        }
    }

    let mut out = WorldGrads::zeros(world.len());
    let w = &pin.world_to_cam;
    let f = pin.focal;
    for (s, g) in splats.iter().zip(&screen) {
        let i = s.index;
        out.colors[i] = Vector3::from(g.color);
        out.opacities[i] = g.opacity;
        let p = project_gaussian(pin, &world.means[i], &world.covariances[i])
            .expect("splat was projected in the forward pass");
        let [a, b, c] = p.conic;
        let conic = Matrix2::new(a, b, b, c);
        let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let g_cov2 = -conic * g_conic * conic;
        let j = &p.jacobian;
        let g_cov_cam = j.transpose() * g_cov2 * j;
        let g_j = 2.0 * g_cov2 * j * p.cov_cam;
        out.covariances[i] = w.transpose() * g_cov_cam * w;

        let t = p.cam;
        let (iz, iz2, iz3) = (1.0 / t.z, 1.0 / (t.z * t.z), 1.0 / (t.z * t.z * t.z));
        let [dpx, dpy] = g.mean;
        let dt = Vector3::new(
            g_j[(0, 2)] * (-f * iz2) + dpx * f * iz,
            g_j[(1, 2)] * (f * iz2) - dpy * f * iz,
            g_j[(0, 0)] * (-f * iz2) + g_j[(0, 2)] * (2.0 * f * t.x * iz3) + g_j[(1, 1)] * (f * iz2)
                + g_j[(1, 2)] * (-2.0 * f * t.y * iz3)
                - dpx * f * t.x * iz2
                + dpy * f * t.y * iz2,
        );
        out.means[i] = w.transpose() * dt;
    }
    Ok(out)
}

/// Back-propagates an image gradient through rendering and the rig onto the
/// avatar's local parameters.
pub fn render_backward(
    avatar: &GaussianAvatar,
    frames: &[TriangleFrame],
    world: &WorldGaussians,
    pin: &Pinhole,
    background: [f64; 3],
    image_grad: &[f64],
) -> Result<RenderGrads> {
    let world_grads = image_backward(world, pin, background, image_grad)?;
    let grads = deform_backward(avatar, frames, world, &world_grads);
    if let Some((gaussian, group)) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { gaussian, group });
    }
    Ok(grads)
}
