//! Image tensors and the preprocessing applied before the visual encoder.

use std::path::Path;

use image::{imageops, imageops::FilterType, RgbImage};
use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-first RGB image, shape `(3, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor<T> {
    data: Array3<T>,
}

impl<T: Scalar> ImageTensor<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape(format!(
                "image tensor needs 3 channels, got {}",
                data.dim().0
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[[ch, y as usize, x as usize]] = T::of(f64::from(px[ch]) / 255.0);
            }
        }
        Self { data }
    }

    /// Inverse of [`ImageTensor::from_rgb`]; values are clamped to `[0, 1]`.
    pub fn to_rgb(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[ch, y as usize, x as usize]].to_f64().unwrap_or(0.0);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            data: self.data.slice(s![.., .., ..;-1]).to_owned(),
        }
    }
}

pub fn open_rgb(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    /// Resize straight to the target square.
    Stretch,
    /// Resize the shorter side to the target, then crop the center square.
    ShorterSideCenterCrop,
}

/// Resize plus per-channel normalization, producing the encoder's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub size: usize,
    pub resize: ResizeMode,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocess {
    /// Published normalization constants of the CLIP image pipeline.
    pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
    pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

    pub fn pretrained(size: usize) -> Self {
        Self {
            size,
            resize: ResizeMode::ShorterSideCenterCrop,
            mean: Self::CLIP_MEAN,
            std: Self::CLIP_STD,
        }
    }

    /// Plain resize, no normalization.
    pub fn identity(size: usize) -> Self {
        Self {
            size,
            resize: ResizeMode::Stretch,
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn resize_rgb(&self, img: &RgbImage) -> RgbImage {
        let target = self.size as u32;
        let (w, h) = img.dimensions();
        if w == target && h == target {
            return img.clone();
        }
        match self.resize {
            ResizeMode::Stretch => imageops::resize(img, target, target, FilterType::Triangle),
            ResizeMode::ShorterSideCenterCrop => {
                let scale = f64::from(target) / f64::from(w.min(h));
                let nw = ((f64::from(w) * scale).round() as u32).max(target);
                let nh = ((f64::from(h) * scale).round() as u32).max(target);
                let resized = imageops::resize(img, nw, nh, FilterType::Triangle);
                let x = (nw - target) / 2;
                let y = (nh - target) / 2;
                imageops::crop_imm(&resized, x, y, target, target).to_image()
            }
        }
    }

    pub fn normalize<T: Scalar>(&self, img: &ImageTensor<T>) -> ImageTensor<T> {
        let mut data = img.data.clone();
        for (ch, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
            let (m, sd) = (T::of(self.mean[ch]), T::of(self.std[ch]));
            plane.mapv_inplace(|v| (v - m) / sd);
        }
        ImageTensor { data }
    }

    pub fn apply<T: Scalar>(&self, img: &RgbImage) -> ImageTensor<T> {
        self.normalize(&ImageTensor::from_rgb(&self.resize_rgb(img)))
    }

    /// Loads any supported image file and runs the full pipeline.
    pub fn load<T: Scalar>(&self, path: &Path) -> Result<ImageTensor<T>> {
        Ok(self.apply(&open_rgb(path)?))
    }
}
