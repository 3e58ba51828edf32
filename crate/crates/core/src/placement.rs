//! Copy-and-Replace / Copy-and-Paste geometry.
//!
//! A placement plan recenters a rare nucleus on a target location, carries
//! its one-layer contour along verbatim, marks contour layers 2–3 as a
//! transition zone to be regenerated by inpainting, and — for replace ops —
//! records the mask of the major nucleus being erased. Applying a plan only
//! stages pixels and known/unknown state; the actual hole filling is the
//! blending stage's job.

use crate::dataset::{NucleusInstance, OpKind};
use crate::error::{Error, Result};
use crate::patch::{contour_layers, Patch};
use crate::raster::{LabelMap, Mask, RgbRaster};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Maximum number of existing-instance pixels a new nucleus and its rings
/// may cover before the placement is rejected.
pub const DEFAULT_OVERLAP_TOL: usize = 0;

/// What sits at a candidate target location.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// A major nucleus to be replaced.
    Major { instance_id: u32 },
    /// An instance-free location to paste onto.
    Background,
}

/// A candidate insertion site with its neighborhood feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationRecord {
    /// Global key (`"<image name>/<id>"` for majors,
    /// `"<image name>/bg/<row>/<col>"` for background locations).
    pub key: String,
    pub image_index: usize,
    /// (row, col) in image coordinates: the instance centroid for majors,
    /// the sampled pixel for background locations.
    pub center: (usize, usize),
    pub kind: TargetKind,
    /// Reduced feature vector of the location's neighborhood.
    pub features: Vec<f64>,
}

/// Per-class placement rules.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRules {
    /// Classes that may only be pasted onto background, never replace a
    /// major nucleus.
    pub paste_only: BTreeSet<String>,
}

impl ClassRules {
    pub fn is_paste_only(&self, class: &str) -> bool {
        self.paste_only.contains(class)
    }
}

/// Everything needed to stage one insertion into a target patch.
#[derive(Debug, Clone)]
pub struct PlacementPlan {
    pub op_kind: OpKind,
    /// Pixels of the patch cropped around the rare nucleus in its source
    /// image; nucleus and preserved-ring pixels are copied from here.
    pub rare_pixels: RgbRaster,
    /// Global key of the copied rare instance.
    pub rare_id: String,
    pub rare_class: String,
    pub target: LocationRecord,
    /// Rare nucleus mask recentered on the target, in patch coordinates.
    pub nucleus_mask: Mask,
    /// Ring 1: the one-layer contour copied verbatim with the nucleus.
    pub preserved_ring: Mask,
    /// Rings 2–3: regenerated by inpainting.
    pub transition_zone: Mask,
    /// Mask of the major nucleus a replace op erases; all-false for paste.
    pub erase_mask: Mask,
}

impl PlacementPlan {
    /// Check the mask invariants: nucleus, ring and zone pairwise disjoint,
    /// and the erase mask empty exactly for paste ops.
    pub fn verify(&self) -> Result<()> {
        for ((r, c), &n) in self.nucleus_mask.indexed_iter() {
            let ring = self.preserved_ring[(r, c)];
            let zone = self.transition_zone[(r, c)];
            if (n && ring) || (n && zone) || (ring && zone) {
                return Err(Error::Geometry(format!(
                    "nucleus/ring/zone masks overlap at ({r}, {c})"
                )));
            }
        }
        let erase_empty = !self.erase_mask.iter().any(|&b| b);
        if erase_empty != (self.op_kind == OpKind::Paste) {
            return Err(Error::Geometry(
                "erase mask must be empty exactly for paste ops".into(),
            ));
        }
        Ok(())
    }
}

/// Plan an insertion of `rare` at `target`.
///
/// The nucleus mask is recentered by patch coordinates: the source and
/// target patches share the same window geometry, so a pixel's offset from
/// the patch center is preserved exactly (no resampling). The nucleus must
/// land fully inside both the patch window and the image; rings are clipped
/// to the image instead. `labelmap` must be the target image's *current*
/// labelmap so the overlap check sees earlier insertions.
///
/// # Errors
///
/// - [`Error::RuleViolation`] — paste-only class given a major target;
/// - [`Error::Geometry`] — nucleus does not fit the window or the image, or
///   a replace target's instance is missing/extends beyond the window;
/// - [`Error::PlacementRejected`] — nucleus ∪ rings covers more than
///   `overlap_tol` pixels of other instances.
pub fn plan_placement(
    rare: &NucleusInstance,
    rare_id: &str,
    rare_patch: &Patch,
    target: &LocationRecord,
    labelmap: &LabelMap,
    class_rules: &ClassRules,
    overlap_tol: usize,
) -> Result<PlacementPlan> {
    let (op_kind, erased_id) = match target.kind {
        TargetKind::Major { instance_id } => (OpKind::Replace, Some(instance_id)),
        TargetKind::Background => (OpKind::Paste, None),
    };
    if op_kind == OpKind::Replace && class_rules.is_paste_only(&rare.class_label) {
        return Err(Error::RuleViolation(format!(
            "class {} is paste-only but the target is a major nucleus",
            rare.class_label
        )));
    }

    let size = rare_patch.size();
    let half = (size / 2) as i64;
    let target_origin = (
        target.center.0 as i64 - half,
        target.center.1 as i64 - half,
    );
    let (ih, iw) = labelmap.dim();
    let in_image = |pr: usize, pc: usize| {
        let r = target_origin.0 + pr as i64;
        let c = target_origin.1 + pc as i64;
        r >= 0 && c >= 0 && (r as usize) < ih && (c as usize) < iw
    };

    // Recenter the nucleus: the source patch is cropped at the rare
    // centroid, so patch coordinates transfer unchanged to the target.
    let mut nucleus_mask = Array2::from_elem((size, size), false);
    let (r0, c0, _, _) = rare.bbox;
    for ((mr, mc), &on) in rare.mask.indexed_iter() {
        if !on {
            continue;
        }
        let pr = (r0 + mr) as i64 - rare_patch.origin.0;
        let pc = (c0 + mc) as i64 - rare_patch.origin.1;
        if pr < 0 || pc < 0 || pr as usize >= size || pc as usize >= size {
            return Err(Error::Geometry(format!(
                "rare nucleus {rare_id} does not fit the {size}x{size} window"
            )));
        }
        let (pr, pc) = (pr as usize, pc as usize);
        if !in_image(pr, pc) {
            return Err(Error::Geometry(format!(
                "nucleus recentered at ({}, {}) leaves the {ih}x{iw} image",
                target.center.0, target.center.1
            )));
        }
        nucleus_mask[(pr, pc)] = true;
    }

    let rings = contour_layers(&nucleus_mask, 3);
    let clip = |mask: &Mask| {
        Array2::from_shape_fn((size, size), |(r, c)| mask[(r, c)] && in_image(r, c))
    };
    let preserved_ring = clip(&rings[0]);
    let mut transition_zone = clip(&rings[1]);
    for ((r, c), &on) in rings[2].indexed_iter() {
        if on && in_image(r, c) {
            transition_zone[(r, c)] = true;
        }
    }

    // Replace erases exactly one existing instance; it must lie fully
    // inside the working window so its pixels can be regenerated.
    let mut erase_mask = Array2::from_elem((size, size), false);
    if let Some(id) = erased_id {
        let mut found = 0usize;
        for ((r, c), &v) in labelmap.indexed_iter() {
            if v != id {
                continue;
            }
            found += 1;
            let pr = r as i64 - target_origin.0;
            let pc = c as i64 - target_origin.1;
            if pr < 0 || pc < 0 || pr as usize >= size || pc as usize >= size {
                return Err(Error::Geometry(format!(
                    "instance {id} extends beyond the {size}x{size} window"
                )));
            }
            erase_mask[(pr as usize, pc as usize)] = true;
        }
        if found == 0 {
            return Err(Error::Geometry(format!(
                "replace target instance {id} not found in the labelmap"
            )));
        }
    }

    // Strict overlap policy: the new nucleus and all its rings may not
    // cover pixels of any instance other than the one being erased.
    let mut overlap = 0usize;
    for ((r, c), &n) in nucleus_mask.indexed_iter() {
        if !(n || preserved_ring[(r, c)] || transition_zone[(r, c)]) || !in_image(r, c) {
            continue;
        }
        let ir = (target_origin.0 + r as i64) as usize;
        let ic = (target_origin.1 + c as i64) as usize;
        let id = labelmap[(ir, ic)];
        if id != 0 && Some(id) != erased_id {
            overlap += 1;
        }
    }
    if overlap > overlap_tol {
        return Err(Error::PlacementRejected(format!(
            "nucleus and rings cover {overlap} pixels of other instances (tolerance {overlap_tol})"
        )));
    }

    let plan = PlacementPlan {
        op_kind,
        rare_pixels: rare_patch.pixels.clone(),
        rare_id: rare_id.to_owned(),
        rare_class: rare.class_label.clone(),
        target: target.clone(),
        nucleus_mask,
        preserved_ring,
        transition_zone,
        erase_mask,
    };
    plan.verify()?;
    Ok(plan)
}

/// Stage a plan onto a patch: copy nucleus and preserved-ring pixels from
/// the rare source, mark the transition zone (and optionally the erase
/// region) unknown, and leave everything else untouched. Copied pixels win
/// over the erase region where they overlap.
pub(crate) fn stage_patch(patch: &Patch, plan: &PlacementPlan, include_erase: bool) -> Patch {
    let mut out = patch.clone();
    let size = out.size();
    for r in 0..size {
        for c in 0..size {
            let copied = plan.nucleus_mask[(r, c)] || plan.preserved_ring[(r, c)];
            if copied {
                for ch in 0..3 {
                    out.pixels[(r, c, ch)] = plan.rare_pixels[(r, c, ch)];
                }
                out.known_mask[(r, c)] = true;
            } else if plan.transition_zone[(r, c)]
                || (include_erase && plan.erase_mask[(r, c)])
            {
                for ch in 0..3 {
                    out.pixels[(r, c, ch)] = 0;
                }
                out.known_mask[(r, c)] = false;
            }
        }
    }
    out
}

/// Stage the full plan in one shot: nucleus and ring copied, transition
/// zone and (for replace) erase region marked unknown, ready for hole
/// filling. Returns the staged patch and the new instance mask in patch
/// coordinates.
pub fn apply_placement(target_patch: &Patch, plan: &PlacementPlan) -> (Patch, Mask) {
    (
        stage_patch(target_patch, plan, true),
        plan.nucleus_mask.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::crop_patch;
    use crate::raster::mask_area;
    use ndarray::Array3;

    const SIZE: usize = 16;

    /// A 64x64 image of constant 50 with a distinctive rare nucleus: a
    /// 3x3 plus-shape of value 250 centered at (20, 20), id 1, plus a major
    /// nucleus blob at (44, 44), id 2.
    fn toy_scene() -> (RgbRaster, LabelMap, NucleusInstance) {
        let mut img = Array3::from_elem((64, 64, 3), 50u8);
        let mut labels = Array2::zeros((64, 64));
        let mut mask = Array2::from_elem((3, 3), false);
        for (dr, dc) in [(0, 1), (1, 0), (1, 1), (1, 2), (2, 1)] {
            mask[(dr, dc)] = true;
            labels[(19 + dr, 19 + dc)] = 1;
            for ch in 0..3 {
                img[(19 + dr, 19 + dc, ch)] = 250;
            }
        }
        for r in 43..=45 {
            for c in 43..=45 {
                labels[(r, c)] = 2;
                for ch in 0..3 {
                    img[(r, c, ch)] = 120;
                }
            }
        }
        let rare = NucleusInstance {
            image_index: 0,
            instance_id: 1,
            class_label: "rare".into(),
            centroid: (20, 20),
            mask,
            bbox: (19, 19, 22, 22),
        };
        (img, labels, rare)
    }

    fn background_target(center: (usize, usize)) -> LocationRecord {
        LocationRecord {
            key: format!("img/bg/{}/{}", center.0, center.1),
            image_index: 0,
            center,
            kind: TargetKind::Background,
            features: vec![0.0],
        }
    }

    fn major_target(center: (usize, usize), id: u32) -> LocationRecord {
        LocationRecord {
            key: format!("img/{id}"),
            image_index: 0,
            center,
            kind: TargetKind::Major { instance_id: id },
            features: vec![0.0],
        }
    }

    fn plan_for(target: &LocationRecord, rules: &ClassRules) -> Result<PlacementPlan> {
        let (img, labels, rare) = toy_scene();
        let rare_patch = crop_patch(&img, rare.centroid, SIZE).unwrap();
        plan_placement(&rare, "img/1", &rare_patch, target, &labels, rules, 0)
    }

    #[test]
    fn paste_only_class_rejects_major_targets() {
        let rules = ClassRules {
            paste_only: [String::from("rare")].into(),
        };
        let err = plan_for(&major_target((44, 44), 2), &rules).unwrap_err();
        assert!(matches!(err, Error::RuleViolation(_)));
        // Background target stays fine under the same rules.
        plan_for(&background_target((32, 10)), &rules).unwrap();
    }

    #[test]
    fn paste_plan_has_empty_erase_mask() {
        let plan = plan_for(&background_target((32, 10)), &ClassRules::default()).unwrap();
        assert_eq!(plan.op_kind, OpKind::Paste);
        assert_eq!(mask_area(&plan.erase_mask), 0);
        plan.verify().unwrap();
    }

    #[test]
    fn replace_plan_captures_the_old_instance() {
        let plan = plan_for(&major_target((44, 44), 2), &ClassRules::default()).unwrap();
        assert_eq!(plan.op_kind, OpKind::Replace);
        assert_eq!(mask_area(&plan.erase_mask), 9);
        plan.verify().unwrap();
    }

    #[test]
    fn single_pixel_nucleus_ring_counts() {
        let mut img = Array3::from_elem((64, 64, 3), 50u8);
        img[(20, 20, 0)] = 255;
        let mut labels = Array2::zeros((64, 64));
        labels[(20, 20)] = 1;
        let mut mask = Array2::from_elem((1, 1), false);
        mask[(0, 0)] = true;
        let rare = NucleusInstance {
            image_index: 0,
            instance_id: 1,
            class_label: "rare".into(),
            centroid: (20, 20),
            mask,
            bbox: (20, 20, 21, 21),
        };
        let rare_patch = crop_patch(&img, (20, 20), SIZE).unwrap();
        let target = background_target((32, 32));
        let plan = plan_placement(
            &rare,
            "img/1",
            &rare_patch,
            &target,
            &labels,
            &ClassRules::default(),
            0,
        )
        .unwrap();
        assert_eq!(mask_area(&plan.nucleus_mask), 1);
        assert_eq!(mask_area(&plan.preserved_ring), 8);
        assert_eq!(mask_area(&plan.transition_zone), 16 + 24);
    }

    #[test]
    fn masks_are_pairwise_disjoint() {
        let plan = plan_for(&background_target((32, 10)), &ClassRules::default()).unwrap();
        for ((r, c), &n) in plan.nucleus_mask.indexed_iter() {
            let ring = plan.preserved_ring[(r, c)];
            let zone = plan.transition_zone[(r, c)];
            assert!(!(n && ring) && !(n && zone) && !(ring && zone));
        }
    }

    #[test]
    fn staged_nucleus_pixels_match_the_rare_source_bit_exact() {
        let (img, _, _) = toy_scene();
        let plan = plan_for(&background_target((40, 12)), &ClassRules::default()).unwrap();
        let target_patch = crop_patch(&img, (40, 12), SIZE).unwrap();
        let (staged, new_mask) = apply_placement(&target_patch, &plan);
        assert_eq!(mask_area(&new_mask), 5);
        for ((r, c), &on) in new_mask.indexed_iter() {
            if on {
                for ch in 0..3 {
                    assert_eq!(staged.pixels[(r, c, ch)], plan.rare_pixels[(r, c, ch)]);
                    assert_eq!(staged.pixels[(r, c, ch)], 250);
                }
                assert!(staged.known_mask[(r, c)]);
            }
        }
    }

    #[test]
    fn transition_zone_is_unknown_after_staging() {
        let (img, _, _) = toy_scene();
        let plan = plan_for(&background_target((40, 12)), &ClassRules::default()).unwrap();
        let target_patch = crop_patch(&img, (40, 12), SIZE).unwrap();
        let (staged, _) = apply_placement(&target_patch, &plan);
        for ((r, c), &z) in plan.transition_zone.indexed_iter() {
            if z {
                assert!(!staged.known_mask[(r, c)]);
            }
        }
    }

    #[test]
    fn pixels_outside_the_plan_regions_are_untouched() {
        let (img, _, _) = toy_scene();
        let plan = plan_for(&background_target((40, 12)), &ClassRules::default()).unwrap();
        let target_patch = crop_patch(&img, (40, 12), SIZE).unwrap();
        let (staged, _) = apply_placement(&target_patch, &plan);
        for r in 0..SIZE {
            for c in 0..SIZE {
                let inside = plan.nucleus_mask[(r, c)]
                    || plan.preserved_ring[(r, c)]
                    || plan.transition_zone[(r, c)]
                    || plan.erase_mask[(r, c)];
                if !inside {
                    for ch in 0..3 {
                        assert_eq!(staged.pixels[(r, c, ch)], target_patch.pixels[(r, c, ch)]);
                    }
                    assert!(staged.known_mask[(r, c)]);
                }
            }
        }
    }

    #[test]
    fn replace_staging_erases_the_old_nucleus_region() {
        let (img, _, _) = toy_scene();
        let plan = plan_for(&major_target((44, 44), 2), &ClassRules::default()).unwrap();
        let target_patch = crop_patch(&img, (44, 44), SIZE).unwrap();
        let (staged, _) = apply_placement(&target_patch, &plan);
        for ((r, c), &e) in plan.erase_mask.indexed_iter() {
            let copied = plan.nucleus_mask[(r, c)] || plan.preserved_ring[(r, c)];
            if e && !copied {
                assert!(!staged.known_mask[(r, c)]);
            }
        }
    }

    #[test]
    fn nucleus_leaving_the_image_is_a_geometry_failure() {
        let err = plan_for(&background_target((0, 32)), &ClassRules::default()).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn overlap_with_existing_instance_is_rejected() {
        // Target so close to instance 2 that the rings cover it.
        let err = plan_for(&background_target((44, 40)), &ClassRules::default()).unwrap_err();
        assert!(matches!(err, Error::PlacementRejected(_)));
        // The same target passes with a generous tolerance.
        let (img, labels, rare) = toy_scene();
        let rare_patch = crop_patch(&img, rare.centroid, SIZE).unwrap();
        let plan = plan_placement(
            &rare,
            "img/1",
            &rare_patch,
            &background_target((44, 40)),
            &labels,
            &ClassRules::default(),
            64,
        )
        .unwrap();
        plan.verify().unwrap();
    }

    #[test]
    fn replace_ignores_overlap_with_the_erased_instance_itself() {
        // Replacing instance 2 at its own centroid: the new nucleus covers
        // the old one's pixels, which must not count as overlap.
        let plan = plan_for(&major_target((44, 44), 2), &ClassRules::default()).unwrap();
        assert_eq!(plan.op_kind, OpKind::Replace);
    }

    #[test]
    fn missing_replace_instance_is_a_geometry_failure() {
        let err = plan_for(&major_target((44, 44), 99), &ClassRules::default()).unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn oversized_nucleus_does_not_fit_a_tiny_window() {
        let (img, labels, _) = toy_scene();
        // A 1x12 bar nucleus is wider than a 8-px window.
        let mut mask = Array2::from_elem((1, 12), false);
        mask.fill(true);
        let mut labels = labels.clone();
        for c in 14..26 {
            labels[(30, c)] = 5;
        }
        let rare = NucleusInstance {
            image_index: 0,
            instance_id: 5,
            class_label: "rare".into(),
            centroid: (30, 20),
            mask,
            bbox: (30, 14, 31, 26),
        };
        let rare_patch = crop_patch(&img, (30, 20), 8).unwrap();
        let err = plan_placement(
            &rare,
            "img/5",
            &rare_patch,
            &background_target((32, 32)),
            &labels,
            &ClassRules::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Geometry(_)));
    }

    #[test]
    fn rings_clip_at_image_borders_when_the_nucleus_fits() {
        let (img, labels, rare) = toy_scene();
        let rare_patch = crop_patch(&img, rare.centroid, SIZE).unwrap();
        // Nucleus is 3x3 around the center; at (1, 32) it occupies rows
        // 0..=2, touching the top edge, so ring pixels above row 0 clip.
        let plan = plan_placement(
            &rare,
            "img/1",
            &rare_patch,
            &background_target((1, 32)),
            &labels,
            &ClassRules::default(),
            0,
        )
        .unwrap();
        let full = plan_for(&background_target((32, 32)), &ClassRules::default()).unwrap();
        assert!(mask_area(&plan.preserved_ring) < mask_area(&full.preserved_ring));
        assert!(mask_area(&plan.transition_zone) < mask_area(&full.transition_zone));
        plan.verify().unwrap();
    }
}
