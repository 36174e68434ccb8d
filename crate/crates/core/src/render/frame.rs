use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// RGB image with a coverage channel. Values live in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, three channels per pixel.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// An ordered sequence of frames.
pub type Video = Vec<Image>;

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3], alpha: f64) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            rgb: data,
            alpha: vec![alpha; width * height],
        }
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3], 0.0)
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean squared error over the RGB channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let n = self.rgb.len().max(1) as f64;
        Ok(self
            .rgb
            .iter()
            .zip(&other.rgb)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            image::Rgb(p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let rgb = img
            .pixels()
            .flat_map(|p| p.0.map(|c| c as f64 / 255.0))
            .collect();
        Image {
            width: w as usize,
            height: h as usize,
            rgb,
            alpha: vec![1.0; (w * h) as usize],
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }
}

/// Writes frames as `{prefix}_0000.png`, `{prefix}_0001.png`, ...
pub fn save_sequence(frames: &[Image], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("{prefix}_{i:04}.png"));
            f.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Loads every PNG in a directory, ordered by file name.
pub fn load_sequence(dir: &Path) -> Result<Video> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| Image::load_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_sequence_roundtrip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Image::filled(4, 3, [0.2, 0.4, 0.6], 1.0);
        a.set_pixel(1, 2, [1.0, 0.0, 0.5]);
        let frames = vec![a.clone(), Image::black(4, 3)];
        let paths = save_sequence(&frames, dir.path(), "frame").unwrap();
        assert!(paths[1].ends_with("frame_0001.png"));
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back[0].rgb.iter().zip(&a.rgb) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn mse_rejects_shape_mismatch() {
        let a = Image::black(4, 4);
        let b = Image::black(4, 5);
        assert!(a.mse(&b).is_err());
    }
}
