//! Shared raster aliases and small pixel helpers.
//!
//! Images are `(H, W, 3)` 8-bit arrays, label maps are `(H, W)` integer
//! arrays with 0 meaning background, binary masks are `(H, W)` bool arrays.

use ndarray::{Array2, Array3};

pub type RgbRaster = Array3<u8>;
pub type LabelMap = Array2<u32>;
pub type Mask = Array2<bool>;

/// Rec. 601 luma of an RGB triple, in `[0, 255]`.
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)
}

/// Bounding box `(r0, c0, r1, c1)` of the true pixels, end-exclusive.
/// Returns `None` for an empty mask.
pub fn mask_bbox(mask: &Mask) -> Option<(usize, usize, usize, usize)> {
    let (h, w) = mask.dim();
    let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0usize, 0usize);
    let mut any = false;
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            any = true;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r + 1);
            c1 = c1.max(c + 1);
        }
    }
    any.then_some((r0, c0, r1, c1))
}

/// Integer centroid (rounded mean of true-pixel coordinates).
pub fn mask_centroid(mask: &Mask) -> Option<(usize, usize)> {
    let mut n = 0usize;
    let (mut sr, mut sc) = (0usize, 0usize);
    for ((r, c), &v) in mask.indexed_iter() {
        if v {
            n += 1;
            sr += r;
            sc += c;
        }
    }
    if n == 0 {
        return None;
    }
    Some((
        (sr as f64 / n as f64).round() as usize,
        (sc as f64 / n as f64).round() as usize,
    ))
}

pub fn mask_area(mask: &Mask) -> usize {
    mask.iter().filter(|&&v| v).count()
}
