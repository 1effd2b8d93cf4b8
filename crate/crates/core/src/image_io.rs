//! Planar RGB images in `[0, 1]` and their file formats.

use std::path::Path;

use diffcore::Tensor;

use crate::error::{Error, Result};

/// Planar (channel-major) RGB image, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `3 × height × width`, channel-major.
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `[3, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone())
            .expect("image buffer matches its dimensions")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] => Ok(Self {
                height: *h,
                width: *w,
                data: t.data().to_vec(),
            }),
            s => Err(Error::Image(format!(
                "expected a [3, H, W] tensor, got {s:?}"
            ))),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px =
                    [0, 1, 2].map(|c| (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::filled(h, w, [0.0; 3]);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f64 / 255.0);
            }
        }
        out
    }

    /// Reads PNG or PPM (by content).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// False-colour rendering of a non-negative map (blue → red), optionally
/// blended over an image.
pub fn heatmap(map: &[f64], height: usize, width: usize, under: Option<&Image>) -> Image {
    let max = map.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut out = Image::filled(height, width, [0.0; 3]);
    for y in 0..height {
        for x in 0..width {
            let v = (map[y * width + x] / max).clamp(0.0, 1.0);
            // piecewise-linear jet
            let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
            let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
            let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
            for (c, col) in [r, g, b].into_iter().enumerate() {
                let blended = match under {
                    Some(img) => 0.55 * col + 0.45 * img.get(c, y, x),
                    None => col,
                };
                out.set(c, y, x, blended);
            }
        }
    }
    out
}
