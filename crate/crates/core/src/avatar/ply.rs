//! Binary little-endian PLY in the attribute layout common splatting viewers
//! expect.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{matrix_to_quat, logit, quat_to_matrix, sigmoid, WorldGaussians};
use crate::{Error, Result};

/// Zeroth-order spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

const PROPERTIES: [&str; 17] = [
    "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

/// One world-space Gaussian exactly as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlyGaussian {
    pub position: [f32; 3],
    pub f_dc: [f32; 3],
    pub opacity_logit: f32,
    pub log_scale: [f32; 3],
    /// (w, x, y, z)
    pub rotation: [f32; 4],
}

impl PlyGaussian {
    fn to_values(self) -> [f32; 17] {
        let mut v = [0.0f32; 17];
        v[0..3].copy_from_slice(&self.position);
        v[6..9].copy_from_slice(&self.f_dc);
        v[9] = self.opacity_logit;
        v[10..13].copy_from_slice(&self.log_scale);
        v[13..17].copy_from_slice(&self.rotation);
        v
    }

    fn from_values(v: &[f32; 17]) -> Self {
        PlyGaussian {
            position: [v[0], v[1], v[2]],
            f_dc: [v[6], v[7], v[8]],
            opacity_logit: v[9],
            log_scale: [v[10], v[11], v[12]],
            rotation: [v[13], v[14], v[15], v[16]],
        }
    }

    pub fn color(&self) -> [f64; 3] {
        self.f_dc.map(|c| c as f64 * SH_C0 + 0.5)
    }
}

/// Converts world Gaussians to their on-disk records.
pub fn to_records(world: &WorldGaussians) -> Vec<PlyGaussian> {
    (0..world.len())
        .map(|i| {
            let c = world.colors[i];
            let o = world.opacities[i].clamp(1e-9, 1.0 - 1e-9);
            PlyGaussian {
                position: world.means[i].map(|v| v as f32).into(),
                f_dc: [0, 1, 2].map(|k| ((c[k] - 0.5) / SH_C0) as f32),
                opacity_logit: logit(o) as f32,
                log_scale: [0, 1, 2].map(|k| world.scales[i][k].ln() as f32),
                rotation: matrix_to_quat(&world.rotations[i]).map(|v| v as f32),
            }
        })
        .collect()
}

/// Rebuilds renderable world Gaussians from on-disk records.
pub fn from_records(records: &[PlyGaussian]) -> WorldGaussians {
    let rotations: Vec<Matrix3<f64>> = records
        .iter()
        .map(|r| quat_to_matrix(&r.rotation.map(|v| v as f64)))
        .collect();
    WorldGaussians::from_parts(
        records
            .iter()
            .map(|r| Vector3::from(r.position.map(|v| v as f64)))
            .collect(),
        rotations,
        records
            .iter()
            .map(|r| Vector3::from(r.log_scale.map(|v| (v as f64).exp())))
            .collect(),
        records.iter().map(|r| sigmoid(r.opacity_logit as f64)).collect(),
        records.iter().map(|r| Vector3::from(r.color())).collect(),
    )
}

pub fn encode(records: &[PlyGaussian]) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", records.len()));
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(records.len() * PROPERTIES.len() * 4);
    for r in records {
        for v in r.to_values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<PlyGaussian>, String> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or("missing end_header")?
        + END.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| "header is not UTF-8")?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err("missing magic".into());
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "binary_little_endian", "1.0"] => {}
            ["format", other, ..] => return Err(format!("unsupported format {other}")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|e| e.to_string())?),
            ["element", other, ..] => return Err(format!("unexpected element {other}")),
            ["property", "float", name] => props.push(*name),
            ["property", ty, ..] => return Err(format!("unsupported property type {ty}")),
            ["comment", ..] | ["end_header"] | [] => {}
            _ => return Err(format!("unexpected header line `{line}`")),
        }
    }
    let count = count.ok_or("missing vertex element")?;
    let index: Vec<usize> = PROPERTIES
        .iter()
        .map(|p| {
            props
                .iter()
                .position(|q| q == p)
                .ok_or_else(|| format!("missing property {p}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    let stride = props.len() * 4;
    let body = &bytes[end..];
    if body.len() != count * stride {
        return Err(format!("expected {} data bytes, found {}", count * stride, body.len()));
    }
    Ok(body
        .chunks_exact(stride)
        .map(|row| {
            let field = |k: usize| f32::from_le_bytes(row[4 * k..4 * k + 4].try_into().unwrap());
            PlyGaussian::from_values(&std::array::from_fn(|p| field(index[p])))
        })
        .collect())
}

pub fn write_ply(path: &Path, world: &WorldGaussians) -> Result<()> {
    std::fs::write(path, encode(&to_records(world))).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Vec<PlyGaussian>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|message| Error::Ply {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avatar::{deform_gaussians, init_avatar};
    use crate::headmodel::{HeadConfig, ParametricHead};

    fn world() -> WorldGaussians {
        let head = ParametricHead::new(&HeadConfig::default());
        let mut a = init_avatar(&head, 2);
        for (i, c) in a.color.iter_mut().enumerate() {
            *c = [(i % 7) as f64 / 7.0, 0.3, 1.0];
        }
        deform_gaussians(&a, &head.neutral_mesh())
    }

    #[test]
    fn roundtrip_is_exact_at_f32() {
        let records = to_records(&world());
        let back = decode(&encode(&records)).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn header_counts_gaussians() {
        let bytes = encode(&to_records(&world()));
        let end = bytes.windows(10).position(|w| w == b"end_header").unwrap();
        let text = String::from_utf8_lossy(&bytes[..end]);
        assert!(text.contains("element vertex 2560\n"));
        assert!(text.contains("property float f_dc_0\n"));
        assert!(text.contains("property float rot_3\n"));
    }

    #[test]
    fn empty_cloud_is_valid() {
        let bytes = encode(&[]);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn reimport_reproduces_world_gaussians() {
        let w = world();
        let back = from_records(&to_records(&w));
        for i in 0..w.len() {
            assert!((back.means[i] - w.means[i]).norm() < 1e-5);
            let err = (back.covariances[i] - w.covariances[i]).norm() / w.covariances[i].norm();
            assert!(err < 1e-5, "gaussian {i}: relative covariance error {err}");
            assert!((back.colors[i] - w.colors[i]).norm() < 1e-6);
            assert!((back.opacities[i] - w.opacities[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut bytes = encode(&to_records(&world()));
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).is_err());
    }
}
