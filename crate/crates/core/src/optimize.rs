//! Reconstruction loss and the Adam update.

use serde::{Deserialize, Serialize};

use crate::avatar::{AvatarGrads, GaussianAvatar};
use crate::render::Image;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_1: f64,
    pub lambda_lpips: f64,
    pub lambda_pos: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_1: 10.0,
            lambda_lpips: 10.0,
            lambda_pos: 0.1,
            lambda_s: 10.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.lambda_1, self.lambda_lpips, self.lambda_pos, self.lambda_s]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite())
    }
}

/// Hinge thresholds for the position and scale regularizers, in
/// triangle-local units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerConfig {
    pub eps_pos: f64,
    pub eps_s: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            eps_pos: 1.0,
            eps_s: 0.6,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub perceptual_proxy: f64,
    pub position: f64,
    pub scaling: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted(l1: f64, perceptual_proxy: f64, position: f64, scaling: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            l1,
            perceptual_proxy,
            position,
            scaling,
            total: w.lambda_1 * l1 + w.lambda_lpips * perceptual_proxy + w.lambda_pos * position + w.lambda_s * scaling,
        }
    }
}

/// Loss value with its gradients.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    /// d total / d rendered rgb, one row-major buffer per frame.
    pub pixel_grads: Vec<Vec<f64>>,
    /// d total / d avatar parameters through the regularizers only.
    pub regularizer_grads: AvatarGrads,
}

pub const PROXY_SCALES: usize = 3;

fn check_shapes(rendered: &[Image], target: &[Image]) -> Result<()> {
    if rendered.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rendered frames vs {} target frames",
            rendered.len(),
            target.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::ShapeMismatch("empty video".into()));
    }
    for (i, (r, t)) in rendered.iter().zip(target).enumerate() {
        if !r.same_shape(t) {
            return Err(Error::ShapeMismatch(format!(
                "frame {i}: {}x{} vs {}x{}",
                r.width, r.height, t.width, t.height
            )));
        }
    }
    Ok(())
}

#[derive(Clone)]
struct Plane {
    width: usize,
    height: usize,
    rgb: Vec<f64>,
}

impl Plane {
    fn pooled(&self) -> Plane {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut rgb = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..w {
                for k in 0..3 {
                    let at = |xx: usize, yy: usize| self.rgb[3 * (yy * self.width + xx) + k];
                    rgb[3 * (y * w + x) + k] =
                        0.25 * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
                }
            }
        }
        Plane { width: w, height: h, rgb }
    }

    /// Adjoint of [`Plane::pooled`]: spreads a gradient back to this plane.
    fn unpool(&self, grad: &[f64], out: &mut [f64]) {
        let w = self.width / 2;
        for y in 0..self.height / 2 {
            for x in 0..w {
                for k in 0..3 {
                    let g = 0.25 * grad[3 * (y * w + x) + k];
                    for (xx, yy) in [(2 * x, 2 * y), (2 * x + 1, 2 * y), (2 * x, 2 * y + 1), (2 * x + 1, 2 * y + 1)] {
                        out[3 * (yy * self.width + xx) + k] += g;
                    }
                }
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sum of |grad r − grad t| over horizontal and vertical neighbor pairs of one
/// plane; accumulates d(sum)/d r scaled by `scale` into `grad` when given.
fn edge_difference(r: &Plane, t: &Plane, mut grad: Option<(&mut [f64], f64)>) -> (f64, usize) {
    let (w, h) = (r.width, r.height);
    let mut sum = 0.0;
    let mut count = 0;
    let mut pair = |a: usize, b: usize, grad: &mut Option<(&mut [f64], f64)>| {
        for k in 0..3 {
            let d = (r.rgb[3 * b + k] - r.rgb[3 * a + k]) - (t.rgb[3 * b + k] - t.rgb[3 * a + k]);
            sum += d.abs();
            if let Some((g, s)) = grad.as_mut() {
                let v = *s * sign(d);
                g[3 * b + k] += v;
                g[3 * a + k] -= v;
            }
        }
        count += 3;
    };
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                pair(y * w + x, y * w + x + 1, &mut grad);
            }
            if y + 1 < h {
                pair(y * w + x, (y + 1) * w + x, &mut grad);
            }
        }
    }
    (sum, count)
}

/// Multi-scale edge-difference proxy and, optionally, its gradient with
/// respect to the rendered frames.
fn perceptual_proxy(rendered: &[Image], target: &[Image], with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut pyr_r: Vec<Vec<Plane>> = Vec::with_capacity(rendered.len());
    let mut pyr_t: Vec<Vec<Plane>> = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(target) {
        let mut pr = vec![Plane {
            width: r.width,
            height: r.height,
            rgb: r.rgb.clone(),
        }];
        let mut pt = vec![Plane {
            width: t.width,
            height: t.height,
            rgb: t.rgb.clone(),
        }];
        for s in 1..PROXY_SCALES {
            let next_r = pr[s - 1].pooled();
            let next_t = pt[s - 1].pooled();
            pr.push(next_r);
            pt.push(next_t);
        }
        pyr_r.push(pr);
        pyr_t.push(pt);
    }

    // Pair counts per scale are the same for every frame.
    let counts: Vec<usize> = (0..PROXY_SCALES)
        .map(|s| edge_difference(&pyr_r[0][s], &pyr_t[0][s], None).1 * rendered.len())
        .collect();
    let used = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;

    let mut value = 0.0;
    let mut grads = Vec::new();
    for (pr, pt) in pyr_r.iter().zip(&pyr_t) {
        let mut level_grads: Vec<Vec<f64>> = pr.iter().map(|p| vec![0.0; p.rgb.len()]).collect();
        for s in 0..PROXY_SCALES {
            if counts[s] == 0 {
                continue;
            }
            let scale = 1.0 / (counts[s] as f64 * used);
            let g = with_grad.then(|| (level_grads[s].as_mut_slice(), scale));
            let (sum, _) = edge_difference(&pr[s], &pt[s], g);
            value += sum * scale;
        }
        if with_grad {
            for s in (1..PROXY_SCALES).rev() {
                let (lower, upper) = level_grads.split_at_mut(s);
                pr[s - 1].unpool(&upper[0], &mut lower[s - 1]);
            }
            grads.push(level_grads.swap_remove(0));
        }
    }
    (value, grads)
}

/// Multi-scale edge-difference between two videos.
pub fn perceptual_proxy_value(rendered: &[Image], target: &[Image]) -> Result<f64> {
    check_shapes(rendered, target)?;
    Ok(perceptual_proxy(rendered, target, false).0)
}

/// Position and scale hinge penalties with gradients.
pub fn regularizers(avatar: &GaussianAvatar, reg: &RegularizerConfig) -> (f64, f64, AvatarGrads) {
    let n = avatar.len();
    let mut grads = AvatarGrads::zeros(n);
    if n == 0 {
        return (0.0, 0.0, grads);
    }
    let inv = 1.0 / n as f64;
    let mut position = 0.0;
    let mut scaling = 0.0;
    for i in 0..n {
        let mu = avatar.mu_local[i];
        let norm = (mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2]).sqrt();
        let excess = norm - reg.eps_pos;
        if excess > 0.0 {
            position += excess * excess;
            grads.mu_local[i] = mu.map(|m| 2.0 * excess * m / norm * inv);
        }
        for k in 0..3 {
            let s = avatar.log_scale[i][k].exp();
            let excess = s - reg.eps_s;
            if excess > 0.0 {
                scaling += excess * excess;
                grads.log_scale[i][k] = 2.0 * excess * s * inv;
            }
        }
    }
    (position * inv, scaling * inv, grads)
}

/// Weighted reconstruction loss with gradients for rendered pixels and the
/// regularized avatar parameters.
pub fn loss_total(
    rendered: &[Image],
    target: &[Image],
    avatar: &GaussianAvatar,
    weights: &LossWeights,
    reg: &RegularizerConfig,
) -> Result<LossOutput> {
    check_shapes(rendered, target)?;
    let n_values: usize = rendered.iter().map(|f| f.rgb.len()).sum();
    let inv = 1.0 / n_values as f64;
    let mut l1 = 0.0;
    let mut pixel_grads: Vec<Vec<f64>> = Vec::with_capacity(rendered.len());
    for (r, t) in rendered.iter().zip(target) {
        let mut g = Vec::with_capacity(r.rgb.len());
        for (a, b) in r.rgb.iter().zip(&t.rgb) {
            l1 += (a - b).abs();
            g.push(weights.lambda_1 * sign(a - b) * inv);
        }
        pixel_grads.push(g);
    }
    l1 *= inv;

    let (proxy, proxy_grads) = perceptual_proxy(rendered, target, true);
    for (g, pg) in pixel_grads.iter_mut().zip(&proxy_grads) {
        for (a, b) in g.iter_mut().zip(pg) {
            *a += weights.lambda_lpips * b;
        }
    }

    let (position, scaling, mut regularizer_grads) = regularizers(avatar, reg);
    for g in regularizer_grads.mu_local.iter_mut() {
        *g = g.map(|v| v * weights.lambda_pos);
    }
    for g in regularizer_grads.log_scale.iter_mut() {
        *g = g.map(|v| v * weights.lambda_s);
    }
    Ok(LossOutput {
        breakdown: LossBreakdown::weighted(l1, proxy, position, scaling, weights),
        pixel_grads,
        regularizer_grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub mu_local: f64,
    /// `mu_local` decays exponentially to `mu_local * mu_final_factor` over the run.
    pub mu_final_factor: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            mu_local: 1.6e-4,
            mu_final_factor: 0.01,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            color: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn mu_at(&self, iteration: u64, total: u64) -> f64 {
        let frac = if total == 0 {
            0.0
        } else {
            (iteration as f64 / total as f64).clamp(0.0, 1.0)
        };
        self.mu_local * self.mu_final_factor.powf(frac)
    }

    pub fn is_valid(&self) -> bool {
        [self.mu_local, self.rotation, self.log_scale, self.opacity, self.color]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
            && self.mu_final_factor > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Returns `false` (and leaves everything
    /// untouched) when the gradient has non-finite entries.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) -> bool {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        if grads.iter().any(|g| !g.is_finite()) {
            return false;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let step_size = lr / c1;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() / c2.sqrt() + cfg.eps);
        }
        true
    }
}

/// Optimizer state, one moment set per parameter group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub mu_local: AdamMoments,
    pub rotation: AdamMoments,
    pub log_scale: AdamMoments,
    pub opacity: AdamMoments,
    pub color: AdamMoments,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            config: AdamConfig::default(),
            mu_local: AdamMoments::new(3 * n),
            rotation: AdamMoments::new(4 * n),
            log_scale: AdamMoments::new(3 * n),
            opacity: AdamMoments::new(n),
            color: AdamMoments::new(3 * n),
        }
    }

    fn matches(&self, n: usize) -> bool {
        self.mu_local.m.len() == 3 * n
            && self.rotation.m.len() == 4 * n
            && self.log_scale.m.len() == 3 * n
            && self.opacity.m.len() == n
            && self.color.m.len() == 3 * n
    }
}

/// Applies one Adam step to every parameter group and restores the avatar
/// invariants. Returns the names of groups skipped for non-finite gradients.
pub fn adam_step(
    avatar: &mut GaussianAvatar,
    grads: &AvatarGrads,
    state: &mut AdamState,
    lr: &LearningRates,
    iteration: u64,
    total_iterations: u64,
) -> Result<Vec<&'static str>> {
    let n = avatar.len();
    if !state.matches(n) || grads.mu_local.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state or gradients do not match {n} gaussians"
        )));
    }
    let cfg = state.config;
    let mut skipped = Vec::new();
    let mut run = |name: &'static str, moments: &mut AdamMoments, p: &mut [f64], g: &[f64], rate: f64| {
        if !moments.update(p, g, rate, &cfg) {
            log::warn!("iteration {iteration}: non-finite gradient in {name}; step skipped");
            skipped.push(name);
        }
    };
    run(
        "mu_local",
        &mut state.mu_local,
        avatar.mu_local.as_flattened_mut(),
        grads.mu_local.as_flattened(),
        lr.mu_at(iteration, total_iterations),
    );
    run(
        "rotation",
        &mut state.rotation,
        avatar.rot_local.as_flattened_mut(),
        grads.rot_local.as_flattened(),
        lr.rotation,
    );
    run(
        "log_scale",
        &mut state.log_scale,
        avatar.log_scale.as_flattened_mut(),
        grads.log_scale.as_flattened(),
        lr.log_scale,
    );
    run(
        "opacity",
        &mut state.opacity,
        &mut avatar.opacity_logit,
        &grads.opacity_logit,
        lr.opacity,
    );
    run(
        "color",
        &mut state.color,
        avatar.color.as_flattened_mut(),
        grads.color.as_flattened(),
        lr.color,
    );
    avatar.project_to_valid();
    Ok(skipped)
}
