//! Procedural test data: small blob textures for training the diffusion
//! model and a toy instance-mask dataset for end-to-end runs.
//!
//! Everything here is seeded and deterministic, so fixtures can be
//! regenerated anywhere instead of being checked in.

use crate::dataset::Dataset;
use crate::diffusion::Tensor;
use crate::raster::{LabelMap, RgbRaster};
use crate::rng::child_rng;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;

/// Smooth random textures in [−1, 1]: a base tone plus a handful of soft
/// radial blobs, loosely mimicking tissue with scattered nuclei.
pub fn gen_textures(count: usize, side: usize, seed: u64) -> Vec<Tensor> {
    (0..count)
        .map(|i| {
            let mut rng = child_rng(seed, "texture", i as u64);
            let base: [f64; 3] = [
                rng.random_range(-0.2..0.6),
                rng.random_range(-0.3..0.5),
                rng.random_range(-0.2..0.6),
            ];
            let n_blobs = rng.random_range(2..=5);
            let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
                .map(|_| {
                    let r0 = rng.random_range(0.0..side as f64);
                    let c0 = rng.random_range(0.0..side as f64);
                    let sigma = rng.random_range(2.0..(side as f64 / 4.0));
                    let amp: [f64; 3] = [
                        rng.random_range(-0.8..0.2),
                        rng.random_range(-0.8..0.2),
                        rng.random_range(-0.8..0.2),
                    ];
                    (r0, c0, sigma, amp)
                })
                .collect();
            Array3::from_shape_fn((3, side, side), |(ch, r, c)| {
                let mut v = base[ch];
                for (r0, c0, sigma, amp) in &blobs {
                    let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                    v += amp[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                v.clamp(-1.0, 1.0)
            })
        })
        .collect()
}

/// Shape of the generated toy dataset.
#[derive(Debug, Clone)]
pub struct ToyDatasetSpec {
    pub n_images: usize,
    /// Square image side; must be a multiple of the internal 16-px grid.
    pub side: usize,
    /// Major instances per image, split between the two major classes.
    pub majors_per_image: usize,
    /// Rare instances per image.
    pub rares_per_image: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        // 10 × (20 + 1) ≈ 210 instances; the rare class sits just under a
        // 5% frequency share.
        ToyDatasetSpec {
            n_images: 10,
            side: 96,
            majors_per_image: 20,
            rares_per_image: 1,
        }
    }
}

/// Classes used by the generated dataset: two majors and one rare.
pub const TOY_MAJOR_CLASSES: [&str; 2] = ["alpha", "beta"];
pub const TOY_RARE_CLASS: &str = "gamma";

/// A deterministic toy dataset of elliptical nuclei on a pale textured
/// background. Instances sit on a jittered 16-px grid, so they never touch
/// each other and leave clear background for paste targets.
///
/// # Panics
///
/// If an image cannot hold the requested instances on its grid.
pub fn gen_toy_dataset(spec: &ToyDatasetSpec, seed: u64) -> Dataset {
    let grid = 16usize;
    let cells_per_side = spec.side / grid;
    let per_image = spec.majors_per_image + spec.rares_per_image;
    assert!(
        per_image <= cells_per_side * cells_per_side,
        "{per_image} instances do not fit a {0}x{0} grid",
        cells_per_side
    );

    let mut names = Vec::with_capacity(spec.n_images);
    let mut images = Vec::with_capacity(spec.n_images);
    let mut labelmaps = Vec::with_capacity(spec.n_images);
    let mut class_table = BTreeMap::new();

    for i in 0..spec.n_images {
        let name = format!("toy_{i:03}");
        let mut rng = child_rng(seed, "toy-image", i as u64);

        let mut img: RgbRaster = Array3::from_shape_fn((spec.side, spec.side, 3), |_| {
            230u8.saturating_add_signed(rng.random_range(-6..=6))
        });
        let mut labels: LabelMap = Array2::zeros((spec.side, spec.side));

        let mut cells: Vec<(usize, usize)> = (0..cells_per_side)
            .flat_map(|r| (0..cells_per_side).map(move |c| (r, c)))
            .collect();
        cells.shuffle(&mut rng);

        for (slot, &(cell_r, cell_c)) in cells.iter().take(per_image).enumerate() {
            let id = slot as u32 + 1;
            let class = if slot < spec.majors_per_image {
                TOY_MAJOR_CLASSES[slot % 2]
            } else {
                TOY_RARE_CLASS
            };
            let jitter_r: i64 = rng.random_range(-2..=2);
            let jitter_c: i64 = rng.random_range(-2..=2);
            let center = (
                ((cell_r * grid + grid / 2) as i64 + jitter_r) as usize,
                ((cell_c * grid + grid / 2) as i64 + jitter_c) as usize,
            );
            let (a, b) = (
                rng.random_range(2.0..4.0f64),
                rng.random_range(2.0..4.0f64),
            );
            let color: [u8; 3] = match class {
                "alpha" => [150, 110, 170],
                "beta" => [110, 150, 120],
                _ => [200, 80, 90],
            };
            stamp_ellipse(&mut img, &mut labels, center, (a, b), id, color, &mut rng);
            class_table.insert(format!("{name}/{id}"), class.to_string());
        }

        names.push(name);
        images.push(img);
        labelmaps.push(labels);
    }

    let mut class_names: Vec<String> = TOY_MAJOR_CLASSES
        .iter()
        .map(|c| c.to_string())
        .chain(std::iter::once(TOY_RARE_CLASS.to_string()))
        .collect();
    class_names.sort();
    let ds = Dataset {
        names,
        images,
        labelmaps,
        class_table,
        class_names,
    };
    ds.verify().expect("generated dataset is consistent");
    ds
}

fn stamp_ellipse(
    img: &mut RgbRaster,
    labels: &mut LabelMap,
    center: (usize, usize),
    radii: (f64, f64),
    id: u32,
    color: [u8; 3],
    rng: &mut impl Rng,
) {
    let (h, w, _) = img.dim();
    let reach = radii.0.max(radii.1).ceil() as i64;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let r = center.0 as i64 + dr;
            let c = center.1 as i64 + dc;
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                continue;
            }
            let norm = (dr as f64 / radii.0).powi(2) + (dc as f64 / radii.1).powi(2);
            if norm <= 1.0 {
                labels[(r as usize, c as usize)] = id;
                for ch in 0..3 {
                    let jitter: i16 = rng.random_range(-8..=8);
                    let v = color[ch] as i16 + jitter;
                    img[(r as usize, c as usize, ch)] = v.clamp(0, 255) as u8;
                }
            }
        }
    }
}
