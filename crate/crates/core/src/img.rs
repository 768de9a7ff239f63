//! Images as `[0,1]` double-precision pixel tensors, plus 8-bit PNG I/O.
//!
//! Internally pixels live in planar `[3, H, W]` layout (the layout the
//! convolution kernels consume); PNG files are interleaved 8-bit RGB.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

/// An RGB image with pixel intensities in `[0, 1]`, stored planar `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    pub fn new(tensor: Tensor) -> Self {
        assert_eq!(tensor.shape().len(), 3, "image tensor must be [3, H, W]");
        assert_eq!(tensor.shape()[0], 3, "image tensor must have 3 channels");
        Image { tensor }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image { tensor: Tensor::zeros(vec![3, height, width]) }
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Image { tensor: Tensor::filled(vec![3, height, width], v) }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        debug_assert!(c < 3 && y < h && x < w);
        self.tensor.data()[(c * h + y) * w + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let (h, w) = (self.height(), self.width());
        debug_assert!(c < 3 && y < h && x < w);
        self.tensor.data_mut()[(c * h + y) * w + x] = v;
    }

    /// Quantize to the 8-bit grid in place: `v -> round(v * 255) / 255`.
    /// Exactly what a lossless PNG round trip does to the pixel values.
    pub fn quantize8(&mut self) {
        for v in self.tensor.data_mut() {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Interleaved 8-bit RGB bytes (the PNG wire layout).
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let plane = h * w;
        let mut out = Vec::with_capacity(plane * 3);
        for p in 0..plane {
            for c in 0..3 {
                out.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Self {
        let plane = height * width;
        assert_eq!(bytes.len(), plane * 3);
        let mut data = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = bytes[p * 3 + c] as f64 / 255.0;
            }
        }
        Image { tensor: Tensor::new(vec![3, height, width], data) }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.display().to_string(), source: e })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Image::from_rgb8(img.as_raw(), h, w))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.to_rgb8(),
        )
        .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.display().to_string(), source: e })
    }
}
