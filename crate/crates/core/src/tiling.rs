//! Overlapping patch tiling and AND-merging of patch masks.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, RgbImage};

pub const DEFAULT_PATCH_SIZE: usize = 256;
pub const DEFAULT_OVERLAP: usize = 20;

/// Patch origins covering a `width`x`height` canvas with square patches.
///
/// Origins advance by `patch_size - overlap`; the last origin on each axis is
/// clamped to `dim - patch_size` so every patch lies inside the image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub patch_size: usize,
    pub overlap: usize,
    pub origins: Vec<(usize, usize)>,
    pub source_dims: (usize, usize),
}

fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut x = 0;
    loop {
        if x + patch >= dim {
            out.push(dim - patch);
            return out;
        }
        out.push(x);
        x += stride;
    }
}

pub fn plan_tiles(width: usize, height: usize, patch_size: usize, overlap: usize) -> Result<TileGrid> {
    if patch_size == 0 || overlap >= patch_size {
        return Err(Error::Config(format!("overlap {overlap} must be smaller than patch size {patch_size}")));
    }
    if patch_size > width.min(height) {
        return Err(Error::Config(format!("patch size {patch_size} exceeds image {width}x{height}")));
    }
    let stride = patch_size - overlap;
    let xs = axis_origins(width, patch_size, stride);
    let ys = axis_origins(height, patch_size, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TileGrid { patch_size, overlap, origins, source_dims: (width, height) })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Distinct x origins, ascending.
    pub fn x_origins(&self) -> Vec<usize> {
        let mut xs: Vec<usize> = self.origins.iter().map(|o| o.0).collect();
        xs.sort_unstable();
        xs.dedup();
        xs
    }

    pub fn y_origins(&self) -> Vec<usize> {
        let mut ys: Vec<usize> = self.origins.iter().map(|o| o.1).collect();
        ys.sort_unstable();
        ys.dedup();
        ys
    }

    fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        if dims != self.source_dims {
            return Err(Error::Dimensions(format!("grid planned for {:?}, got {:?}", self.source_dims, dims)));
        }
        Ok(())
    }
}

pub fn extract_patch(image: &RgbImage, grid: &TileGrid, index: usize) -> Result<RgbImage> {
    grid.check_dims(image.dims())?;
    let &(x, y) = grid.origins.get(index).ok_or(Error::IndexOutOfRange { index, len: grid.origins.len() })?;
    image.crop(x, y, grid.patch_size, grid.patch_size)
}

/// Mask crop at the same origin; used to pair image patches with labels.
pub fn extract_mask_patch(mask: &BinaryMask, grid: &TileGrid, index: usize) -> Result<BinaryMask> {
    grid.check_dims(mask.dims())?;
    let &(x, y) = grid.origins.get(index).ok_or(Error::IndexOutOfRange { index, len: grid.origins.len() })?;
    mask.crop(x, y, grid.patch_size, grid.patch_size)
}

/// Merge patch predictions back to full size; every pixel is the AND of all
/// patches covering it.
pub fn merge_tiles(patch_masks: &[BinaryMask], grid: &TileGrid) -> Result<BinaryMask> {
    if patch_masks.len() != grid.origins.len() {
        return Err(Error::Dimensions(format!("{} patch masks for {} tiles", patch_masks.len(), grid.origins.len())));
    }
    let p = grid.patch_size;
    if let Some((i, m)) = patch_masks.iter().enumerate().find(|(_, m)| m.dims() != (p, p)) {
        return Err(Error::Dimensions(format!("patch mask {i} is {:?}, expected {p}x{p}", m.dims())));
    }
    let (w, h) = grid.source_dims;
    let mut out = BinaryMask::ones(w, h);
    for (mask, &(x0, y0)) in patch_masks.iter().zip(&grid.origins) {
        for py in 0..p {
            for px in 0..p {
                if !mask.get(px, py) {
                    out.set(x0 + px, y0 + py, false);
                }
            }
        }
    }
    Ok(out)
}
