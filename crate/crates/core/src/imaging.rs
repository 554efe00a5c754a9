//! In-memory images and PNG input/output.

use std::path::Path;

use avatar_tensor::Mat;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Codec { path: String, source: ::image::ImageError },
    #[error("{path}: expected {expected}, found {found}")]
    Shape { path: String, expected: String, found: String },
}

/// RGB image with channel values in `[0, 1]`, stored as an `(H*W) x 3`
/// matrix with row index `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Mat,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: Mat::zeros(width * height, 3) }
    }

    pub fn from_mat(width: usize, height: usize, pixels: Mat) -> Self {
        assert_eq!(pixels.shape(), (width * height, 3), "pixel matrix shape");
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let r = self.pixels.row(y * self.width + x);
        [r[0], r[1], r[2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        self.pixels.row_mut(y * self.width + x).copy_from_slice(&rgb);
    }

    /// Rounds every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self { pixels: self.pixels.map(|v| to_u8(v) as f64 / 255.0), ..self.clone() }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        let buf: Vec<u8> = self.pixels.data().iter().map(|&v| to_u8(v)).collect();
        ::image::save_buffer(path, &buf, self.width as u32, self.height as u32, ::image::ExtendedColorType::Rgb8)
            .map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageIoError> {
        let img = ::image::open(path).map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Ok(Self { width: w, height: h, pixels: Mat::from_vec(w * h, 3, data) })
    }

    /// Side-by-side concatenation of equally tall images.
    pub fn hstack(images: &[&RgbImage]) -> Self {
        let h = images.first().map_or(0, |i| i.height);
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = RgbImage::new(w, h);
        let mut x0 = 0;
        for img in images {
            assert_eq!(img.height, h, "hstack needs equal heights");
            for y in 0..h {
                for x in 0..img.width {
                    out.set(x0 + x, y, img.get(x, y));
                }
            }
            x0 += img.width;
        }
        out
    }
}

/// Single-channel image in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageIoError> {
        let buf: Vec<u8> = self.values.iter().map(|&v| to_u8(v)).collect();
        ::image::save_buffer(path, &buf, self.width as u32, self.height as u32, ::image::ExtendedColorType::L8)
            .map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageIoError> {
        let img = ::image::open(path).map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self { width: w, height: h, values: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect() })
    }

    pub fn to_rgb(&self) -> RgbImage {
        let data = self.values.iter().flat_map(|&v| [v, v, v]).collect();
        RgbImage::from_mat(self.width, self.height, Mat::from_vec(self.width * self.height, 3, data))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RgbImage::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(x, y, [x as f64 / 4.0, y as f64 / 2.0, 0.3]);
            }
        }
        let img = img.quantized();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);

        let g = GrayImage { width: 2, height: 2, values: vec![0.0, 1.0, 1.0, 0.0] };
        let p = dir.path().join("g.png");
        g.save_png(&p).unwrap();
        assert_eq!(GrayImage::load_png(&p).unwrap(), g);
    }
}
