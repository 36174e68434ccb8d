//! Procedural parametric head: an anisotropically scaled icosphere with eight
//! linear blendshapes, a rigid head pose, a look-at pinhole camera and a
//! landmark-map rasterizer used as geometry conditioning.
//!
//! Model space is right-handed with `+y` up and the face looking down `+z`.
//! The subject's left side is `+x`.

use std::collections::HashMap;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::render::Image;

pub const NUM_BLENDSHAPES: usize = 8;
pub const NUM_LANDMARKS: usize = 16;

/// Facial action units, one per blendshape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionUnit {
    JawOpen,
    Smile,
    EyeCloseLeft,
    EyeCloseRight,
    BrowRaiseLeft,
    BrowRaiseRight,
    Pucker,
    CheekPuff,
}

impl ActionUnit {
    pub const ALL: [ActionUnit; NUM_BLENDSHAPES] = [
        ActionUnit::JawOpen,
        ActionUnit::Smile,
        ActionUnit::EyeCloseLeft,
        ActionUnit::EyeCloseRight,
        ActionUnit::BrowRaiseLeft,
        ActionUnit::BrowRaiseRight,
        ActionUnit::Pucker,
        ActionUnit::CheekPuff,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionUnit::JawOpen => "jaw_open",
            ActionUnit::Smile => "smile",
            ActionUnit::EyeCloseLeft => "eye_close_left",
            ActionUnit::EyeCloseRight => "eye_close_right",
            ActionUnit::BrowRaiseLeft => "brow_raise_left",
            ActionUnit::BrowRaiseRight => "brow_raise_right",
            ActionUnit::Pucker => "pucker",
            ActionUnit::CheekPuff => "cheek_puff",
        }
    }
}

/// Landmark slots: 4 eye, 8 mouth, 1 nose, 3 jaw.
pub mod landmark {
    pub const EYE_LEFT_OUTER: usize = 0;
    pub const EYE_LEFT_INNER: usize = 1;
    pub const EYE_RIGHT_INNER: usize = 2;
    pub const EYE_RIGHT_OUTER: usize = 3;
    pub const MOUTH: std::ops::Range<usize> = 4..12;
    pub const NOSE: usize = 12;
    pub const JAW_LEFT: usize = 13;
    pub const CHIN: usize = 14;
    pub const JAW_RIGHT: usize = 15;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub subdivisions: u32,
    /// Axis scale factors (x, y, z) applied to the unit icosphere.
    pub proportions: [f64; 3],
    /// Overall size in model units.
    pub radius: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            subdivisions: 3,
            proportions: [1.0, 1.3, 1.1],
            radius: 2.0,
        }
    }
}

/// Triangle mesh with deformed vertex positions.
#[derive(Clone, Debug)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn triangle(&self, t: usize) -> [Vector3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ParametricHead {
    pub base_vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[u32; 3]>,
    /// `blendshapes[b][v]` is the displacement of vertex `v` at unit weight.
    pub blendshapes: Vec<Vec<Vector3<f64>>>,
    pub landmark_indices: [u32; NUM_LANDMARKS],
    pub eyelid_vertex_mask: Vec<bool>,
    /// Unit-sphere direction of each vertex before scaling; used for
    /// procedural texturing.
    pub sphere_dirs: Vec<Vector3<f64>>,
}

/// Blendshape and landmark anchors, as (x, y) on the front of the unit sphere.
const EYE_CENTER: (f64, f64) = (0.31, 0.24);

fn front_point(x: f64, y: f64) -> Vector3<f64> {
    Vector3::new(x, y, (1.0 - x * x - y * y).max(0.0).sqrt())
}

fn cosine_falloff(dist: f64, radius: f64) -> f64 {
    if dist >= radius {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * dist / radius).cos())
    }
}

fn icosphere(subdivisions: u32) -> (Vec<Vector3<f64>>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut tris: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                let m = (verts[a as usize] + verts[b as usize]).normalize();
                verts.push(m);
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(tris.len() * 4);
        for &[a, b, c] in &tris {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        tris = next;
    }
    // Outward winding.
    for t in &mut tris {
        let [a, b, c] = t.map(|i| verts[i as usize]);
        if (b - a).cross(&(c - a)).dot(&(a + b + c)) < 0.0 {
            t.swap(1, 2);
        }
    }
    (verts, tris)
}

impl ParametricHead {
    pub fn new(config: &HeadConfig) -> Self {
        let (dirs, triangles) = icosphere(config.subdivisions);
        let scale = Vector3::from(config.proportions) * config.radius;
        let base_vertices: Vec<_> = dirs.iter().map(|d| d.component_mul(&scale)).collect();
        let r = config.radius;

        let mut blendshapes = vec![vec![Vector3::zeros(); dirs.len()]; NUM_BLENDSHAPES];
        for (v, u) in dirs.iter().enumerate() {
            let at = |x: f64, y: f64, radius: f64| cosine_falloff((u - front_point(x, y)).norm(), radius);
            let front = if u.z > -0.2 { 1.0 } else { 0.0 };

            let w = at(0.0, -0.75, 0.55) * front;
            blendshapes[ActionUnit::JawOpen.index()][v] = Vector3::new(0.0, -0.32, -0.04) * (r * w);

            let w = at(0.0, -0.45, 0.42) * front;
            blendshapes[ActionUnit::Smile.index()][v] =
                Vector3::new(0.30 * u.x, 0.35 * u.x.abs(), 0.0) * (r * w);

            let w = at(EYE_CENTER.0, EYE_CENTER.1, 0.2);
            blendshapes[ActionUnit::EyeCloseLeft.index()][v] = Vector3::new(0.0, -0.09, 0.02) * (r * w);
            let w = at(-EYE_CENTER.0, EYE_CENTER.1, 0.2);
            blendshapes[ActionUnit::EyeCloseRight.index()][v] = Vector3::new(0.0, -0.09, 0.02) * (r * w);

            let w = at(0.30, 0.50, 0.26);
            blendshapes[ActionUnit::BrowRaiseLeft.index()][v] = Vector3::new(0.0, 0.10, 0.0) * (r * w);
            let w = at(-0.30, 0.50, 0.26);
            blendshapes[ActionUnit::BrowRaiseRight.index()][v] = Vector3::new(0.0, 0.10, 0.0) * (r * w);

            let w = at(0.0, -0.45, 0.32) * front;
            blendshapes[ActionUnit::Pucker.index()][v] = Vector3::new(-0.4 * u.x, 0.0, 0.15) * (r * w);

            let w = at(0.0, -0.30, 0.60) * front;
            blendshapes[ActionUnit::CheekPuff.index()][v] =
                u.component_mul(&Vector3::from(config.proportions)) * (0.12 * r * w);
        }

        let eyelid_vertex_mask = (0..dirs.len())
            .map(|v| {
                blendshapes[ActionUnit::EyeCloseLeft.index()][v].norm() > 0.0
                    || blendshapes[ActionUnit::EyeCloseRight.index()][v].norm() > 0.0
            })
            .collect();

        let landmark_indices = select_landmarks(&dirs);

        ParametricHead {
            base_vertices,
            triangles,
            blendshapes,
            landmark_indices,
            eyelid_vertex_mask,
            sphere_dirs: dirs,
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.base_vertices.len()
    }

    pub fn neutral_mesh(&self) -> Mesh {
        Mesh {
            vertices: self.base_vertices.clone(),
            triangles: self.triangles.clone(),
        }
    }

    /// True if any vertex of the triangle moves under an eye-close blendshape.
    pub fn is_eyelid_triangle(&self, t: usize) -> bool {
        self.triangles[t]
            .iter()
            .any(|&v| self.eyelid_vertex_mask[v as usize])
    }
}

/// Picks 16 distinct landmark vertices. Left/right pairs are exact mirror
/// images and midline landmarks sit on the `x = 0` plane.
fn select_landmarks(dirs: &[Vector3<f64>]) -> [u32; NUM_LANDMARKS] {
    let mut used = vec![false; dirs.len()];
    let nearest = |target: Vector3<f64>, midline: bool, used: &mut Vec<bool>| -> usize {
        let best = dirs
            .iter()
            .enumerate()
            .filter(|(i, d)| !used[*i] && (!midline || d.x.abs() < 1e-9))
            .min_by(|a, b| {
                (a.1 - target)
                    .norm_squared()
                    .total_cmp(&(b.1 - target).norm_squared())
            })
            .map(|(i, _)| i)
            .expect("icosphere has enough vertices");
        used[best] = true;
        best
    };
    let mirror_of = |i: usize| -> usize {
        let m = Vector3::new(-dirs[i].x, dirs[i].y, dirs[i].z);
        dirs.iter()
            .position(|d| (d - m).norm() < 1e-9)
            .expect("icosphere is mirror symmetric")
    };
    let pair = |x: f64, y: f64, used: &mut Vec<bool>| -> (usize, usize) {
        let l = nearest(front_point(x, y), false, used);
        let r = mirror_of(l);
        used[r] = true;
        (l, r)
    };

    let mut out = [0u32; NUM_LANDMARKS];
    let (lo, ro) = pair(0.46, 0.22, &mut used);
    let (li, ri) = pair(0.16, 0.22, &mut used);
    out[landmark::EYE_LEFT_OUTER] = lo as u32;
    out[landmark::EYE_LEFT_INNER] = li as u32;
    out[landmark::EYE_RIGHT_INNER] = ri as u32;
    out[landmark::EYE_RIGHT_OUTER] = ro as u32;

    // Mouth: corners, upper/lower sides, upper/lower centers.
    let (cl, cr) = pair(0.30, -0.45, &mut used);
    let (ul, ur) = pair(0.15, -0.37, &mut used);
    let (bl, br) = pair(0.15, -0.54, &mut used);
    let uc = nearest(front_point(0.0, -0.36), true, &mut used);
    let bc = nearest(front_point(0.0, -0.56), true, &mut used);
    let mouth = [cl, ul, uc, ur, cr, br, bc, bl];
    for (slot, v) in landmark::MOUTH.zip(mouth) {
        out[slot] = v as u32;
    }

    out[landmark::NOSE] = nearest(front_point(0.0, -0.05), true, &mut used) as u32;
    let (jl, jr) = pair(0.62, -0.62, &mut used);
    out[landmark::JAW_LEFT] = jl as u32;
    out[landmark::CHIN] = nearest(front_point(0.0, -0.86), true, &mut used) as u32;
    out[landmark::JAW_RIGHT] = jr as u32;
    out
}

/// Blendshape coefficients plus a rigid head rotation.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Expression {
    /// One weight per [`ActionUnit`], clamped to `[0, 1]`.
    pub coefficients: [f64; NUM_BLENDSHAPES],
    /// Rotation about x, y, z in degrees, applied in that order.
    pub pose: [f64; 3],
}

impl Expression {
    pub fn new(coefficients: [f64; NUM_BLENDSHAPES], pose: [f64; 3]) -> Self {
        Expression {
            coefficients: coefficients.map(|c| c.clamp(0.0, 1.0)),
            pose,
        }
    }

    pub fn neutral() -> Self {
        Self::default()
    }

    pub fn unit(unit: ActionUnit, amplitude: f64) -> Self {
        let mut c = [0.0; NUM_BLENDSHAPES];
        c[unit.index()] = amplitude;
        Self::new(c, [0.0; 3])
    }

    /// Largest blendshape weight.
    pub fn intensity(&self) -> f64 {
        self.coefficients.iter().copied().fold(0.0, f64::max)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        let [rx, ry, rz] = self.pose.map(f64::to_radians);
        Rotation3::from_euler_angles(rx, ry, rz)
    }
}

/// `R(pose) * (base + sum_b e_b * blendshape_b)`.
pub fn deform_mesh(head: &ParametricHead, expr: &Expression) -> Mesh {
    let rot = expr.rotation();
    let active: Vec<(usize, f64)> = expr
        .coefficients
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, e)| *e != 0.0)
        .collect();
    let vertices = head
        .base_vertices
        .iter()
        .enumerate()
        .map(|(v, base)| {
            let mut p = *base;
            for &(b, e) in &active {
                p += head.blendshapes[b][v] * e;
            }
            rot * p
        })
        .collect();
    Mesh {
        vertices,
        triangles: head.triangles.clone(),
    }
}

/// Spherical camera placement around the head center. Azimuth 90° is
/// directly frontal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub distance: f64,
    /// Vertical field of view in degrees.
    pub fovy: f64,
    pub elevation: f64,
    pub azimuth: f64,
}

impl CameraPose {
    pub fn new(distance: f64, fovy: f64, elevation: f64, azimuth: f64) -> Self {
        CameraPose {
            distance,
            fovy,
            elevation,
            azimuth,
        }
    }

    pub fn frontal(distance: f64, fovy: f64) -> Self {
        Self::new(distance, fovy, 0.0, 90.0)
    }

    pub fn is_valid(&self) -> bool {
        self.distance > 0.0 && self.fovy > 0.0 && self.fovy < 180.0
    }

    /// Unit direction from the head center toward the camera.
    pub fn direction(&self) -> Vector3<f64> {
        let (el, az) = (self.elevation.to_radians(), self.azimuth.to_radians());
        Vector3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin())
    }

    pub fn position(&self) -> Vector3<f64> {
        self.direction() * self.distance
    }

    /// Intrinsics and extrinsics for a given image size.
    pub fn pinhole(&self, width: usize, height: usize) -> Pinhole {
        let eye = self.position();
        let forward = -eye.normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let up = right.cross(&forward);
        let world_to_cam = Matrix3::from_rows(&[right.transpose(), up.transpose(), forward.transpose()]);
        let focal = 0.5 * height as f64 / (0.5 * self.fovy.to_radians()).tan();
        Pinhole {
            eye,
            world_to_cam,
            focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
        }
    }
}

/// Resolved camera: camera-space axes are (right, up, forward).
#[derive(Clone, Copy, Debug)]
pub struct Pinhole {
    pub eye: Vector3<f64>,
    pub world_to_cam: Matrix3<f64>,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Near plane in model units; points closer than this are not visible.
pub const NEAR_PLANE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Pixel coordinates, x to the right and y downward.
    pub pixel: [f64; 2],
    /// Distance along the viewing axis.
    pub depth: f64,
    pub visible: bool,
}

impl Pinhole {
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_cam * (p - self.eye)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Projection {
        let t = self.to_camera(p);
        if t.z < NEAR_PLANE {
            return Projection {
                pixel: [f64::NAN; 2],
                depth: t.z,
                visible: false,
            };
        }
        Projection {
            pixel: [
                self.cx + self.focal * t.x / t.z,
                self.cy - self.focal * t.y / t.z,
            ],
            depth: t.z,
            visible: true,
        }
    }
}

/// Projects a model-space point through the camera at the given resolution.
pub fn project(camera: &CameraPose, point: &Vector3<f64>, width: usize, height: usize) -> Projection {
    camera.pinhole(width, height).project(point)
}

/// World positions of the 16 landmark vertices under an expression.
pub fn landmark_positions(head: &ParametricHead, expr: &Expression) -> [Vector3<f64>; NUM_LANDMARKS] {
    let mesh = deform_mesh(head, expr);
    head.landmark_indices.map(|i| mesh.vertices[i as usize])
}

pub fn landmark_pixels(
    head: &ParametricHead,
    expr: &Expression,
    camera: &CameraPose,
    width: usize,
    height: usize,
) -> [Projection; NUM_LANDMARKS] {
    let pin = camera.pinhole(width, height);
    landmark_positions(head, expr).map(|p| pin.project(&p))
}

/// Fixed, pairwise distinct landmark colors.
pub const LANDMARK_COLORS: [[f64; 3]; NUM_LANDMARKS] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 1.0, 0.5],
    [1.0, 0.0, 0.5],
    [0.5, 1.0, 0.0],
    [0.0, 0.5, 1.0],
    [1.0, 1.0, 1.0],
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
];

/// Disc radius in pixels: 2 px at 512 rows, never below one pixel.
pub fn landmark_radius(width: usize, height: usize) -> f64 {
    (2.0 * width.min(height) as f64 / 512.0).max(1.0)
}

/// Black image with one colored disc per visible landmark, drawn in
/// landmark order.
pub fn landmark_map(
    head: &ParametricHead,
    expr: &Expression,
    camera: &CameraPose,
    width: usize,
    height: usize,
) -> Image {
    let mut img = Image::black(width, height);
    let radius = landmark_radius(width, height);
    for (id, proj) in landmark_pixels(head, expr, camera, width, height)
        .iter()
        .enumerate()
    {
        if !proj.visible {
            continue;
        }
        let [px, py] = proj.pixel;
        let x0 = (px - radius).floor().max(0.0) as usize;
        let y0 = (py - radius).floor().max(0.0) as usize;
        let x1 = ((px + radius).ceil().max(0.0) as usize).min(width);
        let y1 = ((py + radius).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - px;
                let dy = y as f64 + 0.5 - py;
                if dx * dx + dy * dy <= radius * radius {
                    img.set_pixel(x, y, LANDMARK_COLORS[id]);
                    img.alpha[y * width + x] = 1.0;
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> ParametricHead {
        ParametricHead::new(&HeadConfig::default())
    }

    #[test]
    fn icosphere_level3_is_watertight() {
        let h = head();
        assert_eq!(h.triangles.len(), 1280);
        assert_eq!(h.num_vertices(), 642);
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &h.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                assert!((a as usize) < h.num_vertices());
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
        // Euler characteristic of a sphere.
        assert_eq!(h.num_vertices() as i64 - edges.len() as i64 + h.triangles.len() as i64, 2);
    }

    #[test]
    fn neutral_mesh_is_bilaterally_symmetric() {
        let h = head();
        for v in &h.base_vertices {
            let m = Vector3::new(-v.x, v.y, v.z);
            let closest = h
                .base_vertices
                .iter()
                .map(|w| (w - m).norm())
                .fold(f64::INFINITY, f64::min);
            assert!(closest < 1e-6);
        }
    }

    #[test]
    fn landmarks_distinct_and_eyelids_masked() {
        let h = head();
        let mut ids = h.landmark_indices.to_vec();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), NUM_LANDMARKS);
        let n = h.eyelid_vertex_mask.iter().filter(|&&m| m).count();
        assert!(n >= 6, "eyelid support too small: {n}");
    }

    #[test]
    fn blendshape_fields_cover_every_vertex() {
        let h = head();
        assert_eq!(h.blendshapes.len(), NUM_BLENDSHAPES);
        for (b, field) in h.blendshapes.iter().enumerate() {
            assert_eq!(field.len(), h.num_vertices());
            assert!(field.iter().any(|d| d.norm() > 1e-3), "blendshape {b} is empty");
        }
    }

    #[test]
    fn zero_expression_returns_base_mesh() {
        let h = head();
        let m = deform_mesh(&h, &Expression::neutral());
        assert_eq!(m.vertices, h.base_vertices);
    }

    #[test]
    fn single_unit_adds_its_delta() {
        let h = head();
        let m = deform_mesh(&h, &Expression::unit(ActionUnit::JawOpen, 1.0));
        for v in 0..h.num_vertices() {
            let want = h.base_vertices[v] + h.blendshapes[0][v];
            assert!((m.vertices[v] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn expression_coefficients_are_clamped() {
        let e = Expression::new([1.5, -0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0; 3]);
        assert_eq!(e.coefficients[0], 1.0);
        assert_eq!(e.coefficients[1], 0.0);
        assert_eq!(e.coefficients[2], 0.3);
    }

    #[test]
    fn head_center_projects_to_image_center() {
        for cam in [
            CameraPose::new(9.0, 50.0, 0.0, 90.0),
            CameraPose::new(11.0, 40.0, -10.0, 20.0),
            CameraPose::new(8.0, 70.0, 7.0, 143.0),
        ] {
            let p = project(&cam, &Vector3::zeros(), 64, 48);
            assert!(p.visible);
            assert!((p.pixel[0] - 32.0).abs() < 1e-9 && (p.pixel[1] - 24.0).abs() < 1e-9);
            assert!((p.depth - cam.distance).abs() < 1e-9);
        }
    }

    #[test]
    fn offset_along_camera_right_moves_pixel_right_only() {
        let cam = CameraPose::new(9.0, 55.0, 5.0, 120.0);
        let pin = cam.pinhole(64, 64);
        let right = pin.world_to_cam.row(0).transpose();
        let p = pin.project(&(right * 0.7));
        assert!(p.pixel[0] > 32.0);
        assert!((p.pixel[1] - 32.0).abs() < 1e-9);
    }

    #[test]
    fn halving_fov_tangent_doubles_pixel_offset() {
        let point = Vector3::new(0.4, -0.3, 0.5);
        let fovy = 60.0f64;
        let half_tan = (0.5 * fovy.to_radians()).tan() / 2.0;
        let fovy_narrow = 2.0 * half_tan.atan().to_degrees();
        let wide = project(&CameraPose::frontal(9.0, fovy), &point, 128, 128);
        let narrow = project(&CameraPose::frontal(9.0, fovy_narrow), &point, 128, 128);
        for k in 0..2 {
            let ratio = (narrow.pixel[k] - 64.0) / (wide.pixel[k] - 64.0);
            assert!((ratio - 2.0).abs() < 1e-9, "ratio {ratio}");
        }
    }

    #[test]
    fn point_behind_camera_not_visible() {
        let cam = CameraPose::frontal(9.0, 50.0);
        assert!(!project(&cam, &Vector3::new(0.0, 0.0, 12.0), 32, 32).visible);
    }

    #[test]
    fn frontal_landmark_map_is_symmetric() {
        let h = head();
        let cam = CameraPose::frontal(9.5, 55.0);
        let img = landmark_map(&h, &Expression::neutral(), &cam, 64, 64);
        let lit = img.alpha.iter().filter(|&&a| a > 0.0).count();
        assert!(lit >= NUM_LANDMARKS);
        let centroid = |id: usize| {
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for y in 0..64 {
                for x in 0..64 {
                    if img.pixel(x, y) == LANDMARK_COLORS[id] {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                        n += 1.0;
                    }
                }
            }
            assert!(n > 0.0, "landmark {id} missing");
            (sx / n, sy / n)
        };
        for (l, r) in [
            (landmark::EYE_LEFT_OUTER, landmark::EYE_RIGHT_OUTER),
            (landmark::EYE_LEFT_INNER, landmark::EYE_RIGHT_INNER),
            (landmark::JAW_LEFT, landmark::JAW_RIGHT),
        ] {
            let (lx, ly) = centroid(l);
            let (rx, ry) = centroid(r);
            assert!((lx + rx - 64.0).abs() <= 1.0, "{l}/{r}: {lx} {rx}");
            assert!((ly - ry).abs() <= 1.0);
        }
        let (nx, _) = centroid(landmark::NOSE);
        assert!((nx - 32.0).abs() <= 1.0);
    }

    #[test]
    fn jaw_open_moves_chin_down_in_image() {
        let h = head();
        let cam = CameraPose::frontal(9.5, 55.0);
        let closed = landmark_pixels(&h, &Expression::neutral(), &cam, 64, 64);
        let open = landmark_pixels(&h, &Expression::unit(ActionUnit::JawOpen, 1.0), &cam, 64, 64);
        assert!(open[landmark::CHIN].pixel[1] > closed[landmark::CHIN].pixel[1] + 0.5);
    }

    #[test]
    fn landmark_map_is_deterministic_and_sparse() {
        let h = head();
        let cam = CameraPose::new(10.0, 45.0, 4.0, 70.0);
        let e = Expression::unit(ActionUnit::Smile, 0.7);
        let a = landmark_map(&h, &e, &cam, 64, 64);
        let b = landmark_map(&h, &e, &cam, 64, 64);
        assert_eq!(a, b);
        let radius = landmark_radius(64, 64);
        let centers = landmark_pixels(&h, &e, &cam, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                if a.pixel(x, y) != [0.0; 3] {
                    let inside = centers.iter().any(|c| {
                        let dx = x as f64 + 0.5 - c.pixel[0];
                        let dy = y as f64 + 0.5 - c.pixel[1];
                        c.visible && dx * dx + dy * dy <= radius * radius
                    });
                    assert!(inside);
                }
            }
        }
    }

    #[test]
    fn all_landmarks_behind_camera_gives_black_map() {
        let h = head();
        // Camera just in front of the head center looking back through it:
        // the face is behind the image plane.
        let cam = CameraPose::new(0.5, 50.0, 0.0, 90.0);
        let img = landmark_map(&h, &Expression::neutral(), &cam, 32, 32);
        assert!(img.rgb.iter().all(|&c| c == 0.0));
    }
}
