//! Two-stage progressive blending.
//!
//! Stage 1 (replace ops only) erases the major nucleus being removed and
//! fills the hole so the neighborhood looks instance-free. Stage 2 copies
//! the rare nucleus and its preserved one-pixel contour onto the cleaned
//! patch and inpaints the two-layer transition zone around it, conditioning
//! on everything already in place. Both stages go through the [`Inpainter`]
//! abstraction so the classical harmonic filler and the guided diffusion
//! sampler are interchangeable.
//!
//! Pixels a stage does not own are carried over by construction — the stage
//! output is assembled from the input patch plus the filled region — so
//! outside-region immutability holds bit-exactly for any backend.

use crate::dataset::{AppliedPatch, OpKind, OpOutcome, OpRecord, TargetPool};
use crate::diffusion::{
    guided_inpaint, load_checkpoint, raster_to_tensor, tensor_to_raster, DiffusionSchedule,
    Measurement, SmallUnet,
};
use crate::error::{Error, Result};
use crate::patch::{classical_inpaint, crop_patch, Patch};
use crate::placement::{stage_patch, PlacementPlan, TargetKind};
use crate::raster::{Mask, RgbRaster};
use crate::rng::child_rng;
use sha2::{Digest, Sha256};
use std::path::Path;

/// Fills the unknown pixels of a patch. Implementations must return known
/// pixels unchanged and may assume unknown pixel values carry no
/// information (callers zero them).
pub trait Inpainter: Send + Sync {
    fn fill(&self, patch: &Patch) -> Result<Patch>;
    fn name(&self) -> &'static str;
}

/// Harmonic hole filling — fast, deterministic, no model required.
pub struct ClassicalInpainter;

impl Inpainter for ClassicalInpainter {
    fn fill(&self, patch: &Patch) -> Result<Patch> {
        classical_inpaint(patch)
    }

    fn name(&self) -> &'static str {
        "classical"
    }
}

/// Guided diffusion sampling over the patch, conditioned on the known
/// pixels. Each fill derives its noise seed from the master seed and a
/// digest of the patch content, so results are reproducible and independent
/// of call order.
pub struct DiffusionInpainter {
    model: SmallUnet,
    schedule: DiffusionSchedule,
    ddim_steps: usize,
    guidance_scale: f64,
    hard_consistency: bool,
    master_seed: u64,
}

impl DiffusionInpainter {
    /// # Errors
    ///
    /// [`Error::Config`] when `ddim_steps` is outside `1..=schedule.steps`.
    pub fn new(
        model: SmallUnet,
        schedule: DiffusionSchedule,
        ddim_steps: usize,
        guidance_scale: f64,
        hard_consistency: bool,
        master_seed: u64,
    ) -> Result<Self> {
        if ddim_steps < 1 || ddim_steps > schedule.steps {
            return Err(Error::Config(format!(
                "ddim step count {ddim_steps} outside 1..={}",
                schedule.steps
            )));
        }
        Ok(DiffusionInpainter {
            model,
            schedule,
            ddim_steps,
            guidance_scale,
            hard_consistency,
            master_seed,
        })
    }

    /// Load the model and schedule from a checkpoint file.
    pub fn from_checkpoint(
        path: &Path,
        ddim_steps: usize,
        guidance_scale: f64,
        master_seed: u64,
    ) -> Result<Self> {
        let (model, schedule) = load_checkpoint(path)?;
        DiffusionInpainter::new(
            model,
            schedule,
            ddim_steps,
            guidance_scale,
            true,
            master_seed,
        )
    }
}

impl Inpainter for DiffusionInpainter {
    fn fill(&self, patch: &Patch) -> Result<Patch> {
        if patch.known_mask.iter().all(|&k| k) {
            let mut out = patch.clone();
            out.known_mask.fill(true);
            return Ok(out);
        }
        let meas = Measurement {
            y: raster_to_tensor(&patch.pixels),
            mask: patch.known_mask.clone(),
        };
        let mut rng = child_rng(self.master_seed, "inpaint-fill", content_seed(patch));
        let tensor = guided_inpaint(
            &self.schedule,
            &self.model,
            &meas,
            self.ddim_steps,
            self.guidance_scale,
            self.hard_consistency,
            &mut rng,
        )?;
        let sampled = tensor_to_raster(&tensor);
        // Copy only the unknown pixels out of the sample; known pixels never
        // pass through the float pipeline, keeping them bit-exact.
        let mut out = patch.clone();
        for ((r, c), &known) in patch.known_mask.indexed_iter() {
            if !known {
                for ch in 0..3 {
                    out.pixels[(r, c, ch)] = sampled[(r, c, ch)];
                }
            }
        }
        out.known_mask.fill(true);
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "diffusion"
    }
}

/// Hex SHA-256 of a pixel raster, for the op-record audit trail.
pub fn pixel_digest(pixels: &RgbRaster) -> String {
    let mut hasher = Sha256::new();
    hasher.update(pixels.as_slice().expect("contiguous raster"));
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Stable per-fill noise index derived from patch content.
fn content_seed(patch: &Patch) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(patch.pixels.as_slice().expect("contiguous raster"));
    for &k in &patch.known_mask {
        hasher.update([k as u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[0..8].try_into().expect("digest is 32 bytes"))
}

/// Stage 1: erase the masked region and fill it, leaving every other pixel
/// bit-identical. An empty erase mask is the identity.
///
/// # Errors
///
/// Inpainter failures, wrapped in a `"stage-1"` tag.
pub fn stage1_clean(patch: &Patch, erase_mask: &Mask, inpainter: &dyn Inpainter) -> Result<Patch> {
    if !erase_mask.iter().any(|&e| e) {
        return Ok(patch.clone());
    }
    let mut staged = patch.clone();
    for ((r, c), &erase) in erase_mask.indexed_iter() {
        if erase {
            staged.known_mask[(r, c)] = false;
            for ch in 0..3 {
                staged.pixels[(r, c, ch)] = 0;
            }
        }
    }
    let filled = inpainter
        .fill(&staged)
        .map_err(|e| e.with_stage("stage-1"))?;
    let mut out = patch.clone();
    for ((r, c), &erase) in erase_mask.indexed_iter() {
        if erase {
            for ch in 0..3 {
                out.pixels[(r, c, ch)] = filled.pixels[(r, c, ch)];
            }
        }
    }
    out.known_mask.fill(true);
    Ok(out)
}

/// Stage 2: copy the nucleus and preserved ring from the rare source, then
/// fill the transition zone conditioned on everything else. A zero-area
/// zone degenerates to the pure copy with no inpainter call.
///
/// # Errors
///
/// [`Error::CannotInpaint`] when the input patch still has unknown pixels;
/// inpainter failures wrapped in a `"stage-2"` tag.
pub fn stage2_blend(patch: &Patch, plan: &PlacementPlan, inpainter: &dyn Inpainter) -> Result<Patch> {
    if !patch.known_mask.iter().all(|&k| k) {
        return Err(
            Error::CannotInpaint("blending needs a fully known input patch".into())
                .with_stage("stage-2"),
        );
    }
    let staged = stage_patch(patch, plan, false);
    if staged.known_mask.iter().all(|&k| k) {
        return Ok(staged);
    }
    let filled = inpainter
        .fill(&staged)
        .map_err(|e| e.with_stage("stage-2"))?;
    let mut out = staged;
    for ((r, c), &known) in out.known_mask.clone().indexed_iter() {
        if !known {
            for ch in 0..3 {
                out.pixels[(r, c, ch)] = filled.pixels[(r, c, ch)];
            }
        }
    }
    out.known_mask.fill(true);
    Ok(out)
}

/// A fully blended insertion, ready to apply to the dataset, plus its audit
/// record.
#[derive(Debug, Clone)]
pub struct AugmentedOp {
    pub applied: AppliedPatch,
    pub record: OpRecord,
}

/// Run both blending stages for one placement plan against `image` and
/// package the result. Nothing is mutated: the caller applies the returned
/// patch, so a failure at any stage leaves the dataset untouched.
///
/// The record carries a digest audit: for replace ops the stage-1 output
/// digest must equal the stage-2 conditioning digest, proving stage 2 saw
/// the cleaned patch.
///
/// # Errors
///
/// Stage-tagged inpainter errors and patch-geometry errors.
pub fn augment_one(
    image: &RgbRaster,
    image_name: &str,
    plan: &PlacementPlan,
    inpainter: &dyn Inpainter,
    new_instance_id: u32,
) -> Result<AugmentedOp> {
    plan.verify()?;
    let size = plan.nucleus_mask.dim().0;
    let patch = crop_patch(image, plan.target.center, size)?;

    let (cleaned, stage1_output_hash) = match plan.op_kind {
        OpKind::Replace => {
            let cleaned = stage1_clean(&patch, &plan.erase_mask, inpainter)?;
            let digest = pixel_digest(&cleaned.pixels);
            (cleaned, Some(digest))
        }
        OpKind::Paste => (patch, None),
    };
    let stage2_conditioning_hash = Some(pixel_digest(&cleaned.pixels));
    let blended = stage2_blend(&cleaned, plan, inpainter)?;

    let erased_instance_id = match plan.target.kind {
        TargetKind::Major { instance_id } => Some(instance_id),
        TargetKind::Background => None,
    };
    let record = OpRecord {
        op_kind: plan.op_kind,
        rare_id: plan.rare_id.clone(),
        rare_class: plan.rare_class.clone(),
        target_key: plan.target.key.clone(),
        target_pool: match plan.target.kind {
            TargetKind::Major { .. } => TargetPool::Major,
            TargetKind::Background => TargetPool::Background,
        },
        image: image_name.to_string(),
        center: plan.target.center,
        outcome: OpOutcome::Success { new_instance_id },
        stage1_output_hash,
        stage2_conditioning_hash,
    };
    Ok(AugmentedOp {
        applied: AppliedPatch {
            image_index: plan.target.image_index,
            patch: blended,
            new_instance_id,
            new_class: plan.rare_class.clone(),
            nucleus_mask: plan.nucleus_mask.clone(),
            erased_instance_id,
        },
        record,
    })
}
