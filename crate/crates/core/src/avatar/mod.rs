//! Learnable Gaussians bound to head triangles.
//!
//! Every Gaussian lives in the local frame of one mesh triangle (centroid
//! origin, edge/normal axes, mean-edge-length scale), so it follows the mesh
//! as the expression and pose change.

pub mod ply;

pub use ply::{read_ply, write_ply, PlyGaussian};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::headmodel::{Mesh, ParametricHead};

pub const EYELID_OPACITY: f64 = 0.9;
pub const DEFAULT_OPACITY: f64 = 0.1;
pub const INITIAL_GRAY: f64 = 0.5;

/// Opacity logits are kept inside this range so sigmoid stays in `(0, 1)`.
pub const OPACITY_LOGIT_LIMIT: f64 = 20.0;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct GaussianAvatar {
    pub triangle_id: Vec<u32>,
    /// Offset from the triangle centroid in triangle-local units.
    pub mu_local: Vec<[f64; 3]>,
    /// Quaternion (w, x, y, z), renormalized after every optimizer step.
    pub rot_local: Vec<[f64; 4]>,
    /// Per-axis log-scales in triangle-local units.
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Local frame of a mesh triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub origin: Vector3<f64>,
    /// Columns are the local x (first edge), y, z (normal) axes.
    pub rotation: Matrix3<f64>,
    /// Mean edge length.
    pub scale: f64,
}

impl TriangleFrame {
    /// `None` when the triangle has (numerically) zero area.
    pub fn from_triangle(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Option<Self> {
        let e0 = b - a;
        let e1 = c - a;
        let scale = (e0.norm() + (c - b).norm() + e1.norm()) / 3.0;
        let n = e0.cross(&e1);
        if !(scale > 0.0) || n.norm() <= 1e-12 * scale * scale {
            return None;
        }
        let x = e0.normalize();
        let z = n.normalize();
        let y = z.cross(&x);
        Some(TriangleFrame {
            origin: (a + b + c) / 3.0,
            rotation: Matrix3::from_columns(&[x, y, z]),
            scale,
        })
    }

    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.origin + self.rotation * local * self.scale
    }

    pub fn to_local(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (world - self.origin) / self.scale
    }
}

/// Frames for every triangle of `mesh`. Degenerate triangles reuse the frame
/// from `previous` (or an identity frame at the centroid if none is given).
pub fn triangle_frames(mesh: &Mesh, previous: Option<&[TriangleFrame]>) -> Vec<TriangleFrame> {
    let mut degenerate = 0usize;
    let frames = (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            TriangleFrame::from_triangle(a, b, c).unwrap_or_else(|| {
                degenerate += 1;
                match previous {
                    Some(prev) => prev[t],
                    None => TriangleFrame {
                        origin: (a + b + c) / 3.0,
                        rotation: Matrix3::identity(),
                        scale: 1e-6,
                    },
                }
            })
        })
        .collect();
    if degenerate > 0 {
        log::warn!("{degenerate} degenerate triangles; reusing previous frames");
    }
    frames
}

/// Keeps the last valid frame for each triangle across deformations.
#[derive(Clone, Debug)]
pub struct Rig {
    frames: Vec<TriangleFrame>,
}

impl Rig {
    pub fn new(head: &ParametricHead) -> Self {
        Rig {
            frames: triangle_frames(&head.neutral_mesh(), None),
        }
    }

    pub fn frames(&mut self, mesh: &Mesh) -> Vec<TriangleFrame> {
        let frames = triangle_frames(mesh, Some(&self.frames));
        self.frames.clone_from(&frames);
        frames
    }
}

/// Gaussians resolved into world space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorldGaussians {
    pub means: Vec<Vector3<f64>>,
    pub rotations: Vec<Matrix3<f64>>,
    pub scales: Vec<Vector3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl WorldGaussians {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Builds world Gaussians directly from explicit parameters.
    pub fn from_parts(
        means: Vec<Vector3<f64>>,
        rotations: Vec<Matrix3<f64>>,
        scales: Vec<Vector3<f64>>,
        opacities: Vec<f64>,
        colors: Vec<Vector3<f64>>,
    ) -> Self {
        let covariances = rotations
            .iter()
            .zip(&scales)
            .map(|(r, s)| covariance(r, s))
            .collect();
        WorldGaussians {
            means,
            rotations,
            scales,
            covariances,
            opacities,
            colors,
        }
    }
}

pub fn covariance(rotation: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = rotation * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Rotation matrix of the normalized quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Back-propagates a gradient on `quat_to_matrix(q)` to the raw quaternion,
/// including the normalization.
pub fn quat_matrix_backward(q: &[f64; 4], grad: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|c| c / n);
    let g = |r: usize, c: usize| grad[(r, c)];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0)
            + y * g(2, 1));
    let dn = [dw, dx, dy, dz];
    let dot = w * dw + x * dx + y * dy + z * dz;
    let unit = [w, x, y, z];
    std::array::from_fn(|i| (dn[i] - unit[i] * dot) / n)
}

pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
    let Quaternion { coords } = *q.quaternion();
    // nalgebra stores (i, j, k, w).
    [coords[3], coords[0], coords[1], coords[2]]
}

/// Evenly spread barycentric coordinates inside a triangle: a stratified
/// sequence in `s` and a golden-ratio sequence in `t`, warped onto the
/// triangle with the square-root map.
pub fn triangle_pattern(n: usize) -> Vec<[f64; 3]> {
    const GOLDEN: f64 = 0.618_033_988_749_894_8;
    (0..n)
        .map(|i| {
            let s = (i as f64 + 0.5) / n as f64;
            let t = (0.5 + i as f64 * GOLDEN).fract();
            let r = s.sqrt();
            [1.0 - r, r * (1.0 - t), r * t]
        })
        .collect()
}

/// Initial in-plane log-scale for `per_triangle` Gaussians sharing a triangle.
pub fn initial_log_scale(per_triangle: usize) -> [f64; 3] {
    let planar = (0.35 / (per_triangle as f64).sqrt()).ln();
    [planar, planar, 0.05f64.ln()]
}

/// Places `per_triangle` Gaussians on every triangle of the neutral head.
pub fn init_avatar(head: &ParametricHead, per_triangle: usize) -> GaussianAvatar {
    let per_triangle = per_triangle.max(1);
    let mesh = head.neutral_mesh();
    let frames = triangle_frames(&mesh, None);
    let pattern = triangle_pattern(per_triangle);
    let n = head.triangles.len() * per_triangle;
    let mut avatar = GaussianAvatar {
        triangle_id: Vec::with_capacity(n),
        mu_local: Vec::with_capacity(n),
        rot_local: Vec::with_capacity(n),
        log_scale: Vec::with_capacity(n),
        opacity_logit: Vec::with_capacity(n),
        color: Vec::with_capacity(n),
    };
    let log_scale = initial_log_scale(per_triangle);
    for (t, frame) in frames.iter().enumerate() {
        let [a, b, c] = mesh.triangle(t);
        let opacity = if head.is_eyelid_triangle(t) {
            EYELID_OPACITY
        } else {
            DEFAULT_OPACITY
        };
        for bary in &pattern {
            let p = a * bary[0] + b * bary[1] + c * bary[2];
            avatar.triangle_id.push(t as u32);
            avatar.mu_local.push(frame.to_local(&p).into());
            avatar.rot_local.push([1.0, 0.0, 0.0, 0.0]);
            avatar.log_scale.push(log_scale);
            avatar.opacity_logit.push(logit(opacity));
            avatar.color.push([INITIAL_GRAY; 3]);
        }
    }
    avatar
}

impl GaussianAvatar {
    pub fn len(&self) -> usize {
        self.triangle_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangle_id.is_empty()
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logit[i])
    }

    /// Restores the representation invariants after a parameter update.
    pub fn project_to_valid(&mut self) {
        for q in &mut self.rot_local {
            let n = (q.iter().map(|c| c * c).sum::<f64>()).sqrt();
            if n > 0.0 && n.is_finite() {
                *q = q.map(|c| c / n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
        for l in &mut self.opacity_logit {
            *l = l.clamp(-OPACITY_LOGIT_LIMIT, OPACITY_LOGIT_LIMIT);
        }
        for c in &mut self.color {
            *c = c.map(|v| v.clamp(0.0, 1.0));
        }
    }

    pub fn is_valid(&self, num_triangles: usize) -> bool {
        let n = self.len();
        let lens_ok = [
            self.mu_local.len(),
            self.rot_local.len(),
            self.log_scale.len(),
            self.opacity_logit.len(),
            self.color.len(),
        ]
        .iter()
        .all(|&l| l == n);
        lens_ok
            && self.triangle_id.iter().all(|&t| (t as usize) < num_triangles)
            && self
                .rot_local
                .iter()
                .all(|q| (q.iter().map(|c| c * c).sum::<f64>().sqrt() - 1.0).abs() < 1e-9)
            && (0..n).all(|i| {
                let o = self.opacity(i);
                o > 0.0 && o < 1.0
            })
            && self.color.iter().flatten().all(|c| (0.0..=1.0).contains(c))
    }
}

/// Resolves the avatar into world space on precomputed triangle frames.
pub fn deform_with_frames(avatar: &GaussianAvatar, frames: &[TriangleFrame]) -> WorldGaussians {
    let n = avatar.len();
    let mut out = WorldGaussians {
        means: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        opacities: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
    };
    for i in 0..n {
        let f = &frames[avatar.triangle_id[i] as usize];
        let rot = f.rotation * quat_to_matrix(&avatar.rot_local[i]);
        let scale = Vector3::from(avatar.log_scale[i].map(f64::exp)) * f.scale;
        out.means.push(f.to_world(&Vector3::from(avatar.mu_local[i])));
        out.covariances.push(covariance(&rot, &scale));
        out.rotations.push(rot);
        out.scales.push(scale);
        out.opacities.push(avatar.opacity(i));
        out.colors.push(Vector3::from(avatar.color[i]));
    }
    out
}

/// `mean = origin + scale * R * mu_local`, `rotation = R * rot_local`,
/// `scales = scale * exp(log_scale)`, `cov = R S S R^T`.
pub fn deform_gaussians(avatar: &GaussianAvatar, mesh: &Mesh) -> WorldGaussians {
    deform_with_frames(avatar, &triangle_frames(mesh, None))
}

/// Gradient of a scalar with respect to world-space Gaussian quantities.
#[derive(Clone, Debug, Default)]
pub struct WorldGrads {
    pub means: Vec<Vector3<f64>>,
    /// Symmetric gradient with respect to the covariance matrix.
    pub covariances: Vec<Matrix3<f64>>,
    pub opacities: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl WorldGrads {
    pub fn zeros(n: usize) -> Self {
        WorldGrads {
            means: vec![Vector3::zeros(); n],
            covariances: vec![Matrix3::zeros(); n],
            opacities: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
        }
    }
}

/// Gradient with respect to the learnable avatar parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AvatarGrads {
    pub mu_local: Vec<[f64; 3]>,
    pub rot_local: Vec<[f64; 4]>,
    pub log_scale: Vec<[f64; 3]>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl AvatarGrads {
    pub fn zeros(n: usize) -> Self {
        AvatarGrads {
            mu_local: vec![[0.0; 3]; n],
            rot_local: vec![[0.0; 4]; n],
            log_scale: vec![[0.0; 3]; n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }

    pub fn add_assign(&mut self, other: &AvatarGrads) {
        fn add<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.mu_local, &other.mu_local);
        add(&mut self.rot_local, &other.rot_local);
        add(&mut self.log_scale, &other.log_scale);
        add(&mut self.color, &other.color);
        for (x, y) in self.opacity_logit.iter_mut().zip(&other.opacity_logit) {
            *x += y;
        }
    }

    /// Index of the first Gaussian with a non-finite partial, with its group.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let bad = |v: &[f64]| v.iter().any(|x| !x.is_finite());
        (0..self.mu_local.len()).find_map(|i| {
            if bad(&self.mu_local[i]) {
                Some((i, "mu_local"))
            } else if bad(&self.rot_local[i]) {
                Some((i, "rotation"))
            } else if bad(&self.log_scale[i]) {
                Some((i, "log_scale"))
            } else if !self.opacity_logit[i].is_finite() {
                Some((i, "opacity"))
            } else if bad(&self.color[i]) {
                Some((i, "color"))
            } else {
                None
            }
        })
    }
}

/// Chain rule through [`deform_with_frames`].
pub fn deform_backward(
    avatar: &GaussianAvatar,
    frames: &[TriangleFrame],
    world: &WorldGaussians,
    grads: &WorldGrads,
) -> AvatarGrads {
    let n = avatar.len();
    let mut out = AvatarGrads::zeros(n);
    for i in 0..n {
        let f = &frames[avatar.triangle_id[i] as usize];
        out.color[i] = grads.colors[i].into();
        let o = world.opacities[i];
        out.opacity_logit[i] = grads.opacities[i] * o * (1.0 - o);
        out.mu_local[i] = (f.rotation.transpose() * grads.means[i] * f.scale).into();

        // cov = M M^T with M = R diag(s).
        let g = &grads.covariances[i];
        let s = &world.scales[i];
        let r = &world.rotations[i];
        let m = r * Matrix3::from_diagonal(s);
        let dm = (g + g.transpose()) * m;
        let dr = dm * Matrix3::from_diagonal(s);
        let ds = Vector3::from_fn(|k, _| dm.column(k).dot(&r.column(k)));
        out.log_scale[i] = [ds[0] * s[0], ds[1] * s[1], ds[2] * s[2]];
        let dq_mat = f.rotation.transpose() * dr;
        out.rot_local[i] = quat_matrix_backward(&avatar.rot_local[i], &dq_mat);
    }
    out
}
