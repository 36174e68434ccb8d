//! Brute-force compositor: every pixel walks the full depth-sorted splat list.
//! Slow, but free of tiling and bounding-box logic.

use super::{frame::Image, project_gaussian, Splat, MAX_MAHALANOBIS_SQ, MIN_ALPHA, MIN_TRANSMITTANCE};
use crate::avatar::WorldGaussians;
use crate::headmodel::CameraPose;

pub fn render_brute_force(
    world: &WorldGaussians,
    camera: &CameraPose,
    width: usize,
    height: usize,
    background: [f64; 3],
) -> Image {
    let pin = camera.pinhole(width, height);
    let mut splats: Vec<Splat> = (0..world.len())
        .filter_map(|i| {
            let p = project_gaussian(&pin, &world.means[i], &world.covariances[i])?;
            Some(Splat {
                index: i,
                mean: p.mean,
                conic: p.conic,
                depth: p.cam.z,
                opacity: world.opacities[i],
                color: world.colors[i].into(),
                bbox: [0, 0, width.saturating_sub(1), height.saturating_sub(1)],
            })
        })
        .collect();
    // Exact sort: depth, then index.
    splats.sort_by(|a, b| {
        a.depth
            .partial_cmp(&b.depth)
            .expect("finite depth")
            .then(a.index.cmp(&b.index))
    });

    let mut image = Image::filled(width, height, background, 0.0);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = [0.0; 3];
            let mut t = 1.0;
            for s in &splats {
                let (dx, dy) = (px - s.mean[0], py - s.mean[1]);
                let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                if q > MAX_MAHALANOBIS_SQ {
                    continue;
                }
                let alpha = s.opacity * (-0.5 * q).exp();
                if alpha < MIN_ALPHA {
                    continue;
                }
                for k in 0..3 {
                    rgb[k] += alpha * t * s.color[k];
                }
                t *= 1.0 - alpha;
                if t < MIN_TRANSMITTANCE {
                    break;
                }
            }
            let out = std::array::from_fn(|k| (rgb[k] + t * background[k]).clamp(0.0, 1.0));
            image.set_pixel(x, y, out);
            image.alpha[y * width + x] = (1.0 - t).clamp(0.0, 1.0);
        }
    }
    image
}
