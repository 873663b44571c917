//! HWC images with values in `[0, 1]`, PNG I/O and conversion to and from
//! the networks' NCHW `[-1, 1]` batches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageTensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        ImageTensor {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn ensure_rgb(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::Decode {
                path: Default::default(),
                reason: format!("expected 3 channels, image has {}", self.channels),
            });
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B`, row-major.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|p| {
                if p.len() >= 3 {
                    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
                } else {
                    p[0]
                }
            })
            .collect()
    }

    pub fn clamp01(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    /// Decodes an 8-bit PNG (or any format the `image` crate reads) as RGB.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let rgb = match img {
            image::DynamicImage::ImageRgb8(rgb) => rgb,
            image::DynamicImage::ImageRgba8(_) | image::DynamicImage::ImageRgb16(_) => img.to_rgb8(),
            other => {
                return Err(Error::Decode {
                    path: path.to_path_buf(),
                    reason: format!("not an RGB image ({:?})", other.color()),
                })
            }
        };
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        ImageTensor::new(h as usize, w as usize, 3, data)
    }

    /// Quantizes to 8 bits and writes a PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.ensure_rgb()?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e)))
    }

    /// Round-trips through 8-bit quantization, matching what a saved PNG
    /// decodes to.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect();
        ImageTensor { data, ..*self }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Stacks equally sized RGB images into an `N x 3 x H x W` batch in `[-1, 1]`.
pub fn to_network_batch(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Empty("image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        img.ensure_rgb()?;
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "batch mixes {}x{} and {}x{} images",
                h, w, img.height, img.width
            )));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(y, x, c) * 2.0 - 1.0);
                }
            }
        }
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

/// Inverse of [`to_network_batch`]: maps `[-1, 1]` back to `[0, 1]`.
pub fn from_network_batch(batch: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = batch.nchw()?;
    let plane = h * w;
    let d = batch.data();
    Ok((0..n)
        .map(|i| {
            let mut img = ImageTensor::filled(h, w, c, 0.0);
            for ch in 0..c {
                for p in 0..plane {
                    let v = (d[(i * c + ch) * plane + p] + 1.0) / 2.0;
                    img.data[p * c + ch] = v.clamp(0.0, 1.0);
                }
            }
            img
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_round_trip() {
        let img = ImageTensor::from_fn(4, 5, |y, x| [y as f64 / 4.0, x as f64 / 5.0, 0.5]);
        let batch = to_network_batch(&[img.clone(), img.clone()]).unwrap();
        assert_eq!(batch.shape(), &[2, 3, 4, 5]);
        let back = from_network_batch(&batch).unwrap();
        for (a, b) in back[1].data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(3, 7, |y, x| [0.1 * y as f64, 0.13 * x as f64, 0.77]);
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(ImageTensor::load(&p).unwrap(), img.quantized());
    }
}
