//! Square-agnostic grayscale rasters, binary masks, resampling and PNG I/O.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CpcError::Shape(format!(
                "{} values cannot fill a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Copies the `height`x`width` rectangle whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> GrayImage {
        assert!(top + height <= self.height && left + width <= self.width);
        GrayImage::from_fn(height, width, |y, x| self.get(top + y, left + x))
    }

    pub fn flip_horizontal(&self) -> GrayImage {
        GrayImage::from_fn(self.height, self.width, |y, x| self.get(y, self.width - 1 - x))
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CpcError::Shape(format!(
                "{} values cannot fill a {height}x{width} mask",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(CpcError::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn flip_horizontal(&self) -> BinaryMask {
        let mut out = BinaryMask::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }
}

/// Interpolation used when resizing intensity images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Resizes with pixel-center alignment. Same-size resizes return an exact copy.
pub fn resize(img: &GrayImage, height: usize, width: usize, mode: Interpolation) -> GrayImage {
    if img.height == height && img.width == width {
        return img.clone();
    }
    match mode {
        Interpolation::Nearest => {
            let ys = nearest_index(img.height, height);
            let xs = nearest_index(img.width, width);
            GrayImage::from_fn(height, width, |y, x| img.get(ys[y], xs[x]))
        }
        Interpolation::Bilinear => {
            let ys = bilinear_taps(img.height, height);
            let xs = bilinear_taps(img.width, width);
            GrayImage::from_fn(height, width, |y, x| {
                let (y0, y1, fy) = ys[y];
                let (x0, x1, fx) = xs[x];
                let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
                let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
                top * (1.0 - fy) + bottom * fy
            })
        }
    }
}

/// Nearest-neighbour resize; the output stays binary.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if mask.height == height && mask.width == width {
        return mask.clone();
    }
    let ys = nearest_index(mask.height, height);
    let xs = nearest_index(mask.width, width);
    let mut out = BinaryMask::zeros(height, width);
    for (y, &sy) in ys.iter().enumerate() {
        for (x, &sx) in xs.iter().enumerate() {
            out.set(y, x, mask.get(sy, sx));
        }
    }
    out
}

fn nearest_index(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| (((i as f64 + 0.5) * scale).floor() as usize).min(src - 1))
        .collect()
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Luma weights used for RGB to grayscale conversion.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Decodes any PNG as grayscale in `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let decoded = image::open(path).map_err(|e| CpcError::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        image::DynamicImage::ImageLuma8(buf) => {
            buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        image::DynamicImage::ImageLuma16(buf) => {
            buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                (LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
                    .clamp(0.0, 1.0)
            })
            .collect(),
    };
    GrayImage::new(h, w, data)
}

/// Reads a ground-truth mask; any pixel brighter than half scale is positive.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let gray = read_gray(path)?;
    let data = gray.data().iter().map(|&v| (v > 0.5) as u8).collect();
    BinaryMask::new(gray.height(), gray.width(), data)
}

pub fn write_gray_png(img: &GrayImage, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(img.width as u32, img.height as u32, img.to_u8())
            .expect("buffer sized from image");
    save_png(buf, path)
}

pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let bytes = mask.data.iter().map(|&v| v * 255).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.width as u32, mask.height as u32, bytes)
            .expect("buffer sized from mask");
    save_png(buf, path)
}

pub(crate) fn save_png<P>(buf: ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CpcError::io(parent, e))?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => CpcError::io(path, io),
            other => CpcError::io(path, std::io::Error::other(other.to_string())),
        })
}
