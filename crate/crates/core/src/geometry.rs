//! Overlapping patch / sub-patch tiling of square images.
//!
//! An image is cut into patches at `patch_stride`, each patch into sub-patches
//! at `subpatch_stride`. Because `patch_stride` is a multiple of
//! `subpatch_stride`, every sub-patch lands on a single global lattice of
//! distinct positions spaced `subpatch_stride` apart; overlapping patches map
//! some of their sub-patches onto the same lattice point.

use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_side: usize,
    pub patch_side: usize,
    pub patch_stride: usize,
    pub subpatch_side: usize,
    pub subpatch_stride: usize,
}

impl GridSpec {
    pub const fn new(
        image_side: usize,
        patch_side: usize,
        patch_stride: usize,
        subpatch_side: usize,
        subpatch_stride: usize,
    ) -> Self {
        Self {
            image_side,
            patch_side,
            patch_stride,
            subpatch_side,
            subpatch_stride,
        }
    }

    /// 768px images, 256px patches and 64px sub-patches, both at 50% overlap.
    pub const fn full_scale() -> Self {
        Self::new(768, 256, 128, 64, 32)
    }

    pub fn validate(&self) -> Result<()> {
        let GridSpec {
            image_side,
            patch_side,
            patch_stride,
            subpatch_side,
            subpatch_stride,
        } = *self;
        if [image_side, patch_side, patch_stride, subpatch_side, subpatch_stride].contains(&0) {
            return Err(CpcError::Geometry(format!("all grid sizes must be positive: {self:?}")));
        }
        if patch_side > image_side {
            return Err(CpcError::Geometry(format!(
                "patch side {patch_side} exceeds image side {image_side}"
            )));
        }
        if subpatch_side > patch_side {
            return Err(CpcError::Geometry(format!(
                "sub-patch side {subpatch_side} exceeds patch side {patch_side}"
            )));
        }
        if (image_side - patch_side) % patch_stride != 0 {
            return Err(CpcError::Geometry(format!(
                "(image_side - patch_side) = {} is not divisible by patch_stride {patch_stride}",
                image_side - patch_side
            )));
        }
        if (patch_side - subpatch_side) % subpatch_stride != 0 {
            return Err(CpcError::Geometry(format!(
                "(patch_side - subpatch_side) = {} is not divisible by subpatch_stride {subpatch_stride}",
                patch_side - subpatch_side
            )));
        }
        if patch_stride % subpatch_stride != 0 {
            return Err(CpcError::Geometry(format!(
                "patch_stride {patch_stride} is not a multiple of subpatch_stride {subpatch_stride}"
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle, `(top, left)` inclusive, `height`x`width` in size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PixelRect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

/// Row/column pair on some grid.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridLayout {
    pub spec: GridSpec,
    pub patches_per_axis: usize,
    pub subpatches_per_patch_axis: usize,
    pub distinct_positions_per_axis: usize,
}

pub fn plan_grid(spec: GridSpec) -> Result<GridLayout> {
    spec.validate()?;
    Ok(GridLayout {
        spec,
        patches_per_axis: (spec.image_side - spec.patch_side) / spec.patch_stride + 1,
        subpatches_per_patch_axis: (spec.patch_side - spec.subpatch_side) / spec.subpatch_stride
            + 1,
        distinct_positions_per_axis: (spec.image_side - spec.subpatch_side) / spec.subpatch_stride
            + 1,
    })
}

impl GridLayout {
    /// Lattice steps between neighbouring patch origins.
    pub fn stride_ratio(&self) -> usize {
        self.spec.patch_stride / self.spec.subpatch_stride
    }

    pub fn patch_count(&self) -> usize {
        self.patches_per_axis * self.patches_per_axis
    }

    pub fn subpatches_per_patch(&self) -> usize {
        self.subpatches_per_patch_axis * self.subpatches_per_patch_axis
    }

    pub fn blocks_per_image(&self) -> usize {
        self.patch_count() * self.subpatches_per_patch()
    }

    pub fn lattice_len(&self) -> usize {
        self.distinct_positions_per_axis * self.distinct_positions_per_axis
    }

    /// Flat index of block `(patch, local)` in extraction order.
    pub fn block_index(&self, patch: Cell, local: Cell) -> usize {
        let p = patch.0 * self.patches_per_axis + patch.1;
        let l = local.0 * self.subpatches_per_patch_axis + local.1;
        p * self.subpatches_per_patch() + l
    }

    pub fn global_position(&self, patch: Cell, local: Cell) -> Result<Cell> {
        if patch.0 >= self.patches_per_axis || patch.1 >= self.patches_per_axis {
            return Err(CpcError::Geometry(format!(
                "patch {patch:?} outside {n}x{n} patch grid",
                n = self.patches_per_axis
            )));
        }
        if local.0 >= self.subpatches_per_patch_axis || local.1 >= self.subpatches_per_patch_axis {
            return Err(CpcError::Geometry(format!(
                "sub-patch {local:?} outside {n}x{n} sub-grid",
                n = self.subpatches_per_patch_axis
            )));
        }
        let r = self.stride_ratio();
        Ok((patch.0 * r + local.0, patch.1 * r + local.1))
    }

    pub fn pixel_footprint(&self, position: Cell) -> Result<PixelRect> {
        let n = self.distinct_positions_per_axis;
        if position.0 >= n || position.1 >= n {
            return Err(CpcError::Geometry(format!(
                "lattice position {position:?} outside {n}x{n} lattice"
            )));
        }
        Ok(PixelRect {
            top: position.0 * self.spec.subpatch_stride,
            left: position.1 * self.spec.subpatch_stride,
            height: self.spec.subpatch_side,
            width: self.spec.subpatch_side,
        })
    }

    /// Iterates `(patch, local)` pairs in extraction order.
    pub fn blocks(&self) -> impl Iterator<Item = (Cell, Cell)> + '_ {
        let p = self.patches_per_axis;
        let s = self.subpatches_per_patch_axis;
        (0..p * p).flat_map(move |pi| {
            (0..s * s).map(move |li| ((pi / p, pi % p), (li / s, li % s)))
        })
    }
}

pub fn global_position(layout: &GridLayout, patch: Cell, local: Cell) -> Result<Cell> {
    layout.global_position(patch, local)
}

pub fn pixel_footprint(layout: &GridLayout, position: Cell) -> Result<PixelRect> {
    layout.pixel_footprint(position)
}

/// Every sub-patch block of one image, laid out contiguously in
/// `(patch_row, patch_col, sub_row, sub_col)` order, `side*side` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct SubpatchBlocks {
    pub patches_per_axis: usize,
    pub subpatches_per_patch_axis: usize,
    pub side: usize,
    pub data: Vec<f32>,
}

impl SubpatchBlocks {
    pub fn len(&self) -> usize {
        self.patches_per_axis.pow(2) * self.subpatches_per_patch_axis.pow(2)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn block(&self, patch: Cell, local: Cell) -> &[f32] {
        let p = patch.0 * self.patches_per_axis + patch.1;
        let l = local.0 * self.subpatches_per_patch_axis + local.1;
        let idx = p * self.subpatches_per_patch_axis.pow(2) + l;
        let n = self.side * self.side;
        &self.data[idx * n..(idx + 1) * n]
    }
}

pub fn extract_subpatches(image: &GrayImage, layout: &GridLayout) -> Result<SubpatchBlocks> {
    let spec = layout.spec;
    if image.height() != spec.image_side || image.width() != spec.image_side {
        return Err(CpcError::Geometry(format!(
            "image is {}x{} but the grid expects {}x{}",
            image.height(),
            image.width(),
            spec.image_side,
            spec.image_side
        )));
    }
    let side = spec.subpatch_side;
    let mut data = Vec::with_capacity(layout.blocks_per_image() * side * side);
    let width = image.width();
    let pixels = image.data();
    for (patch, local) in layout.blocks() {
        let top = patch.0 * spec.patch_stride + local.0 * spec.subpatch_stride;
        let left = patch.1 * spec.patch_stride + local.1 * spec.subpatch_stride;
        for y in top..top + side {
            data.extend_from_slice(&pixels[y * width + left..y * width + left + side]);
        }
    }
    Ok(SubpatchBlocks {
        patches_per_axis: layout.patches_per_axis,
        subpatches_per_patch_axis: layout.subpatches_per_patch_axis,
        side,
        data,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn default_layout() -> GridLayout {
        plan_grid(GridSpec::full_scale()).unwrap()
    }

    #[test]
    fn full_scale_counts() {
        let l = default_layout();
        assert_eq!(l.patches_per_axis, 5);
        assert_eq!(l.subpatches_per_patch_axis, 7);
        assert_eq!(l.distinct_positions_per_axis, 23);
    }

    #[test]
    fn single_patch_grid() {
        let l = plan_grid(GridSpec::new(256, 256, 128, 64, 32)).unwrap();
        assert_eq!(l.patches_per_axis, 1);
        assert_eq!(l.subpatches_per_patch_axis, 7);
    }

    #[test]
    fn non_divisible_geometry_is_rejected() {
        let err = plan_grid(GridSpec::new(768, 256, 100, 64, 32)).unwrap_err();
        assert!(matches!(err, CpcError::Geometry(_)));
        assert!(plan_grid(GridSpec::new(128, 64, 32, 32, 12)).is_err());
        assert!(plan_grid(GridSpec::new(128, 256, 32, 32, 16)).is_err());
        assert!(plan_grid(GridSpec::new(128, 64, 0, 32, 16)).is_err());
    }

    #[test]
    fn constant_image_gives_constant_blocks() {
        let l = plan_grid(GridSpec::new(128, 64, 32, 32, 16)).unwrap();
        let img = GrayImage::filled(128, 128, 0.375);
        let blocks = extract_subpatches(&img, &l).unwrap();
        assert_eq!(blocks.len(), 81);
        assert!(blocks.data.iter().all(|&v| v == 0.375));
    }

    #[test]
    fn blocks_match_coordinate_formula() {
        let spec = GridSpec::new(96, 48, 24, 16, 8);
        let l = plan_grid(spec).unwrap();
        let w = spec.image_side;
        let img = GrayImage::from_fn(w, w, |y, x| (y * w + x) as f32);
        let blocks = extract_subpatches(&img, &l).unwrap();
        // Re-index every pixel of every block independently of the extractor.
        for pr in 0..l.patches_per_axis {
            for pc in 0..l.patches_per_axis {
                for sr in 0..l.subpatches_per_patch_axis {
                    for sc in 0..l.subpatches_per_patch_axis {
                        let b = blocks.block((pr, pc), (sr, sc));
                        let top = pr * spec.patch_stride + sr * spec.subpatch_stride;
                        let left = pc * spec.patch_stride + sc * spec.subpatch_stride;
                        for dy in 0..spec.subpatch_side {
                            for dx in 0..spec.subpatch_side {
                                let expected = ((top + dy) * w + left + dx) as f32;
                                assert_eq!(b[dy * spec.subpatch_side + dx], expected);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_patch_block_count() {
        let l = plan_grid(GridSpec::new(256, 256, 128, 64, 32)).unwrap();
        let img = GrayImage::filled(256, 256, 0.0);
        let b = extract_subpatches(&img, &l).unwrap();
        assert_eq!((b.patches_per_axis, b.subpatches_per_patch_axis), (1, 7));
        assert_eq!(b.len(), 49);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let l = default_layout();
        let img = GrayImage::filled(512, 512, 0.0);
        assert!(matches!(extract_subpatches(&img, &l), Err(CpcError::Geometry(_))));
    }

    #[test]
    fn global_position_examples() {
        let l = default_layout();
        assert_eq!(l.global_position((0, 0), (0, 0)).unwrap(), (0, 0));
        assert_eq!(l.global_position((1, 0), (2, 3)).unwrap(), (6, 3));
        assert!(l.global_position((5, 0), (0, 0)).is_err());
        assert!(l.global_position((0, 0), (0, 7)).is_err());
    }

    #[test]
    fn global_map_is_surjective() {
        let l = default_layout();
        let mut seen = HashSet::new();
        for (patch, local) in l.blocks() {
            seen.insert(l.global_position(patch, local).unwrap());
        }
        let n = l.distinct_positions_per_axis;
        let all: HashSet<_> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
        assert_eq!(seen, all);
    }

    #[test]
    fn footprint_examples() {
        let l = default_layout();
        let r = l.pixel_footprint((0, 0)).unwrap();
        assert_eq!((r.top, r.left, r.height, r.width), (0, 0, 64, 64));
        let r = l.pixel_footprint((22, 22)).unwrap();
        assert_eq!((r.top, r.left), (704, 704));
        assert_eq!((r.top + r.height - 1, r.left + r.width - 1), (767, 767));
        assert!(l.pixel_footprint((23, 0)).is_err());
    }

    #[test]
    fn footprints_cover_every_pixel() {
        let l = default_layout();
        let side = l.spec.image_side;
        let mut cover = vec![0u32; side * side];
        let n = l.distinct_positions_per_axis;
        for r in 0..n {
            for c in 0..n {
                let f = l.pixel_footprint((r, c)).unwrap();
                for y in f.top..f.top + f.height {
                    for x in f.left..f.left + f.width {
                        cover[y * side + x] += 1;
                    }
                }
            }
        }
        assert!(cover.iter().all(|&c| c >= 1));
        // Interior pixels are covered by (64/32)^2 lattice positions.
        for y in 64..side - 64 {
            for x in 64..side - 64 {
                assert_eq!(cover[y * side + x], 4);
            }
        }
    }
}
