//! Rebalancing augmentation for instance-mask datasets.
//!
//! The library copies instances of under-represented classes into
//! context-similar target locations and blends them in with a two-stage
//! progressive inpainting procedure. The main pieces:
//!
//! - [`dataset`]: dataset loading, rarity partitioning, report emission.
//! - [`patch`]: fixed-size context patches, classical hole filling,
//!   morphological contour layers.
//! - [`features`]: patch embeddings, GLCM texture statistics, PCA.
//! - [`context`]: the rare-neighborhood Gaussian and the two sampling
//!   distributions (target locations, source instances).
//! - [`placement`]: copy-and-replace / copy-and-paste geometry.
//! - [`diffusion`]: a minimal denoising diffusion core with guided
//!   inpainting (DDIM, Tweedie estimate, measurement guidance,
//!   hard data consistency).
//! - [`inpaint`]: the two-stage progressive blending orchestrator.
//! - [`pipeline`]: the end-to-end augmentation driver.

pub mod context;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod inpaint;
pub mod patch;
pub mod pipeline;
pub mod placement;
pub mod raster;
pub mod rng;
pub mod synthetic;

pub use context::{RareContextModel, SelectionState};
pub use dataset::{
    AppliedPatch, AugmentationReport, Dataset, NucleusInstance, OpKind, OpOutcome, OpRecord,
    RarityPartition, TargetPool,
};
pub use diffusion::{DiffusionSchedule, NoisePredictor, SmallUnet, Tensor};
pub use error::{Error, Result};
pub use inpaint::{ClassicalInpainter, DiffusionInpainter, Inpainter};
pub use patch::Patch;
pub use pipeline::{InpainterChoice, PipelineConfig};
pub use placement::{ClassRules, LocationRecord, PlacementPlan, TargetKind};
pub use raster::{LabelMap, Mask, RgbRaster};

