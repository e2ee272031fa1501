//! Core value types: images, binary masks, and labeled records.
//!
//! Pixel intensities live in [0, 1] as f64 throughout; file I/O converts
//! 8-bit values by /255.

use crate::error::{BdfwError, Result};
use ndarray::{Array2, Array3};
use std::path::Path;

/// A C x H x W real-valued image. Intensities are expected in [0, 1] but
/// intermediate algebra (trigger patterns, subtraction residuals) may
/// temporarily leave that range; purification ops re-clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        ImageTensor { data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        ImageTensor {
            data: Array3::from_elem((channels, height, width), v),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.data.shape() == other.data.shape()
    }

    /// Max absolute elementwise difference.
    pub fn linf_dist(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance between the flattened tensors.
    pub fn l2_dist(&self, other: &ImageTensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Write as an 8-bit PNG (values clamped to [0,1] then scaled by 255).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (c, h, w) = self.shape();
        if c != 3 && c != 1 {
            return Err(BdfwError::InvalidParam(format!(
                "png export supports 1 or 3 channels, got {c}"
            )));
        }
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let src = if c == 3 { ch } else { 0 };
                    let v = self.data[[src, y, x]].clamp(0.0, 1.0);
                    buf.push((v * 255.0).round() as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized for dimensions");
        img.save(path)?;
        Ok(())
    }

    /// Load an 8-bit PNG into a 3 x H x W tensor scaled by /255.
    pub fn load_png(path: &Path) -> Result<ImageTensor> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
        Ok(ImageTensor { data })
    }
}

/// H x W mask. Hard masks contain only {0, 1}; soft masks (pre-threshold
/// locator output) live in [0, 1]. Convention here: 1 = clean pixel,
/// 0 = trigger pixel, matching the locator's output. Attack-side patch
/// masks use the opposite convention and are documented at their site.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub data: Array2<f64>,
}

impl BinaryMask {
    pub fn new(data: Array2<f64>) -> Self {
        BinaryMask { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            data: Array2::zeros((height, width)),
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            data: Array2::from_elem((height, width), 1.0),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_hard(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn sum(&self) -> f64 {
        self.data.sum()
    }

    /// 1 - m, elementwise.
    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|v| 1.0 - v),
        }
    }

    /// Threshold a soft mask at 0.5 into a hard {0,1} mask.
    pub fn binarize(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        }
    }

    /// Intersection-over-union of two hard masks (on the 1-valued support).
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0.0;
        let mut union = 0.0;
        for (&a, &b) in self.data.iter().zip(other.data.iter()) {
            if a == 1.0 && b == 1.0 {
                inter += 1.0;
            }
            if a == 1.0 || b == 1.0 {
                union += 1.0;
            }
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let gray = ImageTensor::new(
            self.data
                .clone()
                .insert_axis(ndarray::Axis(0))
                .into_dimensionality()
                .expect("2d -> 3d"),
        );
        gray.save_png(path)
    }
}

/// A classification record, with poisoning provenance.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
    pub is_poisoned: bool,
    /// Ground-truth class before any attack relabeling.
    pub original_label: usize,
}

impl LabeledImage {
    pub fn clean(image: ImageTensor, label: usize) -> Self {
        LabeledImage {
            image,
            label,
            is_poisoned: false,
            original_label: label,
        }
    }
}

/// Elementwise clamp into [0, 1]. Errors on non-finite input; idempotent.
pub fn clamp01(img: &ImageTensor) -> Result<ImageTensor> {
    if !img.is_finite() {
        return Err(BdfwError::NonFiniteTensor);
    }
    Ok(ImageTensor {
        data: img.data.mapv(|v| v.clamp(0.0, 1.0)),
    })
}
