//! Training-time augmentation: random square crop resized back, then an
//! optional horizontal flip.

use rand::Rng;

use crate::raster::{resize, GrayImage, Interpolation};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop side as a fraction of the image side.
    pub scale: f64,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        top: 0,
        left: 0,
        flip: false,
    };

    pub fn sample<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Self {
        let scale = rng.random_range(0.8..=1.0);
        let crop = crop_side(side, scale);
        Self {
            scale,
            top: rng.random_range(0..=side - crop),
            left: rng.random_range(0..=side - crop),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn apply(&self, img: &GrayImage) -> GrayImage {
        let side = img.height();
        let crop = crop_side(side, self.scale);
        let top = self.top.min(side - crop);
        let left = self.left.min(img.width() - crop);
        let mut out = img.crop(top, left, crop, crop);
        out = resize(&out, img.height(), img.width(), Interpolation::Bilinear);
        if self.flip {
            out = out.flip_horizontal();
        }
        out
    }
}

fn crop_side(side: usize, scale: f64) -> usize {
    ((side as f64 * scale).round() as usize).clamp(1, side)
}

pub fn augment_train<R: Rng + ?Sized>(img: &GrayImage, rng: &mut R) -> GrayImage {
    AugmentParams::sample(img.height().min(img.width()), rng).apply(img)
}
