//! Fixed-size context patches.
//!
//! Patches are square windows cropped around a location of interest,
//! reflect-padded where the window leaves the image. The center of a
//! nucleus patch can be removed and re-filled with a classical smooth
//! (harmonic) inpainter so that texture features describe the
//! neighborhood rather than the nucleus itself. Contour layers are
//! one-dilation-thick rings around a binary mask.

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbRaster};
use ndarray::{Array2, Array3};

pub const DEFAULT_PATCH_SIZE: usize = 224;
pub const DEFAULT_CENTER_SIZE: usize = 112;

/// A square context window over a source image.
#[derive(Debug, Clone)]
pub struct Patch {
    /// `(size, size, 3)` pixels; padded entries mirror in-image pixels.
    pub pixels: RgbRaster,
    /// Top-left of the unclipped window in source-image coordinates.
    /// Negative when the window starts above/left of the image.
    pub origin: (i64, i64),
    /// Center location in patch coordinates.
    pub center: (usize, usize),
    /// True where the pixel value is observed; false where it awaits fill.
    pub known_mask: Mask,
}

impl Patch {
    pub fn size(&self) -> usize {
        self.pixels.dim().0
    }

    /// True for patch pixels that map to real image pixels (not padding).
    pub fn in_image_mask(&self, image_dims: (usize, usize)) -> Mask {
        let n = self.size();
        let (h, w) = image_dims;
        Array2::from_shape_fn((n, n), |(r, c)| {
            let ir = self.origin.0 + r as i64;
            let ic = self.origin.1 + c as i64;
            ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w
        })
    }
}

/// Reflect an index into `0..n` (mirror about the border pixel, border not
/// duplicated), valid for a single fold.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&j), "index {i} not reachable by one reflection (n={n})");
    j as usize
}

/// Crop a `size`x`size` window centered at `center`, reflect-padding where
/// the window leaves the image.
pub fn crop_patch(image: &RgbRaster, center: (usize, usize), size: usize) -> Result<Patch> {
    let (h, w, _) = image.dim();
    if center.0 >= h || center.1 >= w {
        return Err(Error::Geometry(format!(
            "center ({}, {}) outside {h}x{w} image",
            center.0, center.1
        )));
    }
    if size == 0 || size > 2 * h.min(w) {
        return Err(Error::Geometry(format!(
            "patch size {size} unsupported for {h}x{w} image (must be in 1..=2*min(H,W))"
        )));
    }
    let half = (size / 2) as i64;
    let origin = (center.0 as i64 - half, center.1 as i64 - half);
    let pixels = Array3::from_shape_fn((size, size, 3), |(r, c, ch)| {
        let ir = reflect(origin.0 + r as i64, h);
        let ic = reflect(origin.1 + c as i64, w);
        image[(ir, ic, ch)]
    });
    Ok(Patch {
        pixels,
        origin,
        center: (size / 2, size / 2),
        known_mask: Array2::from_elem((size, size), true),
    })
}

/// Write the patch back at its origin. Only in-image pixels are written;
/// padded regions are dropped.
pub fn write_patch(image: &mut RgbRaster, patch: &Patch) {
    let (h, w, _) = image.dim();
    let n = patch.size();
    for r in 0..n {
        let ir = patch.origin.0 + r as i64;
        if ir < 0 || ir as usize >= h {
            continue;
        }
        for c in 0..n {
            let ic = patch.origin.1 + c as i64;
            if ic < 0 || ic as usize >= w {
                continue;
            }
            for ch in 0..3 {
                image[(ir as usize, ic as usize, ch)] = patch.pixels[(r, c, ch)];
            }
        }
    }
}

/// Mark the central `size`x`size` square unknown and zero its pixels.
pub fn remove_center(p: &Patch, size: usize) -> Result<Patch> {
    let n = p.size();
    if size > n {
        return Err(Error::Geometry(format!(
            "removal size {size} exceeds patch size {n}"
        )));
    }
    let mut out = p.clone();
    let start = (n - size) / 2;
    for r in start..start + size {
        for c in start..start + size {
            out.known_mask[(r, c)] = false;
            for ch in 0..3 {
                out.pixels[(r, c, ch)] = 0;
            }
        }
    }
    Ok(out)
}

/// Fill every unknown pixel with the harmonic (Laplace) extension of the
/// known boundary, per channel. Known pixels are untouched bit-exact; the
/// fill obeys the discrete maximum principle, so it stays inside the
/// dynamic range of the surrounding known pixels.
pub fn classical_inpaint(p: &Patch) -> Result<Patch> {
    let n = p.size();
    let unknown: Vec<(usize, usize)> = p
        .known_mask
        .indexed_iter()
        .filter_map(|(idx, &k)| (!k).then_some(idx))
        .collect();
    if unknown.is_empty() {
        return Ok(p.clone());
    }
    if unknown.len() == n * n {
        return Err(Error::CannotInpaint(
            "patch has no known pixels to extend from".into(),
        ));
    }

    // Unknown-region bbox controls the over-relaxation factor.
    let (mut r0, mut c0, mut r1, mut c1) = (n, n, 0usize, 0usize);
    for &(r, c) in &unknown {
        r0 = r0.min(r);
        c0 = c0.min(c);
        r1 = r1.max(r);
        c1 = c1.max(c);
    }
    let span = (r1 - r0 + 1).max(c1 - c0 + 1);
    let omega = 2.0 / (1.0 + (std::f64::consts::PI / (span as f64 + 1.0)).sin());
    let max_sweeps = 60 * span + 500;

    let mut out = p.clone();
    let mut field = [
        Array2::<f64>::zeros((n, n)),
        Array2::<f64>::zeros((n, n)),
        Array2::<f64>::zeros((n, n)),
    ];

    // Per-channel range of known pixels bordering the unknown region.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut bsum = [0.0f64; 3];
    let mut bcnt = 0usize;
    for &(r, c) in &unknown {
        for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr as usize >= n || nc as usize >= n {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if p.known_mask[(nr, nc)] {
                bcnt += 1;
                for ch in 0..3 {
                    let v = f64::from(p.pixels[(nr, nc, ch)]);
                    bsum[ch] += v;
                    lo[ch] = lo[ch].min(v);
                    hi[ch] = hi[ch].max(v);
                }
            }
        }
    }
    if bcnt == 0 {
        return Err(Error::CannotInpaint(
            "unknown region has no known boundary pixel".into(),
        ));
    }

    for ch in 0..3 {
        let init = bsum[ch] / bcnt as f64;
        for ((r, c), &k) in p.known_mask.indexed_iter() {
            field[ch][(r, c)] = if k {
                f64::from(p.pixels[(r, c, ch)])
            } else {
                init
            };
        }
        // SOR sweeps over the unknown pixels only. Patch-border pixels use
        // the average of their in-bounds neighbors (Neumann condition).
        for _ in 0..max_sweeps {
            let mut max_delta = 0.0f64;
            for &(r, c) in &unknown {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                if r > 0 {
                    acc += field[ch][(r - 1, c)];
                    cnt += 1.0;
                }
                if r + 1 < n {
                    acc += field[ch][(r + 1, c)];
                    cnt += 1.0;
                }
                if c > 0 {
                    acc += field[ch][(r, c - 1)];
                    cnt += 1.0;
                }
                if c + 1 < n {
                    acc += field[ch][(r, c + 1)];
                    cnt += 1.0;
                }
                let old = field[ch][(r, c)];
                let new = old + omega * (acc / cnt - old);
                field[ch][(r, c)] = new;
                max_delta = max_delta.max((new - old).abs());
            }
            if max_delta < 1e-4 {
                break;
            }
        }
        for &(r, c) in &unknown {
            let v = field[ch][(r, c)].clamp(lo[ch], hi[ch]);
            out.pixels[(r, c, ch)] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    for &(r, c) in &unknown {
        out.known_mask[(r, c)] = true;
    }
    Ok(out)
}

/// One 3x3-box dilation (8-connected).
pub fn dilate(mask: &Mask) -> Mask {
    let (h, w) = mask.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((r, c), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
                    out[(nr as usize, nc as usize)] = true;
                }
            }
        }
    }
    out
}

/// Contour layers around a mask: `ring_k = dilate^k(mask) \ dilate^{k-1}(mask)`
/// with a 3x3 box structuring element. Rings are pairwise disjoint and
/// disjoint from the mask; rings clip at the raster border.
pub fn contour_layers(mask: &Mask, n_layers: usize) -> Vec<Mask> {
    let mut rings = Vec::with_capacity(n_layers);
    let mut prev = mask.clone();
    for _ in 0..n_layers {
        let next = dilate(&prev);
        let ring = Array2::from_shape_fn(mask.dim(), |idx| next[idx] && !prev[idx]);
        rings.push(ring);
        prev = next;
    }
    rings
}
