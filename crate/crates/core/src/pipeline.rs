//! End-to-end rebalancing driver.
//!
//! [`run`] wires the whole chain together: load a dataset, split classes
//! into rare and major, score candidate insertion sites with the rare
//! context model, and for each sampled target copy one rare nucleus in via
//! two-stage blending. The augmented dataset is written in the input layout
//! next to an auditable [`AugmentationReport`].
//!
//! Every random decision is drawn from a stream derived from the single
//! run seed and a stage label, so two runs with the same configuration
//! produce byte-identical outputs.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::{fit_rare_gaussian, sample_targets, select_rare_nucleus, SelectionState};
use crate::dataset::{
    classify_rarity, emit_augmented, load_dataset, sample_background_locations, write_report,
    AppliedPatch, AugmentationReport, Dataset, NucleusInstance, OpKind, OpOutcome, OpRecord,
    TargetPool, DEFAULT_BACKGROUND_RATE, DEFAULT_CLEARANCE_RADIUS, DEFAULT_RARE_THRESHOLD,
};
use crate::diffusion::{DEFAULT_DDIM_STEPS, DEFAULT_GUIDANCE_SCALE};
use crate::error::{Error, Result};
use crate::features::{
    fit_pca, project, raw_features, PooledProjectionEmbedding, Standardizer, DEFAULT_PCA_DIM,
    RAW_FEATURE_DIM,
};
use crate::inpaint::{augment_one, ClassicalInpainter, DiffusionInpainter, Inpainter};
use crate::patch::{
    classical_inpaint, crop_patch, remove_center, Patch, DEFAULT_CENTER_SIZE, DEFAULT_PATCH_SIZE,
};
use crate::placement::{
    plan_placement, ClassRules, LocationRecord, TargetKind, DEFAULT_OVERLAP_TOL,
};
use crate::rng::{child_rng, child_seed};

/// Which blending backend fills erased regions and transition zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InpainterChoice {
    /// Harmonic interpolation; fast, deterministic, no model file needed.
    Classical,
    /// Guided denoising with a trained model from a checkpoint file.
    Diffusion,
}

impl FromStr for InpainterChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(InpainterChoice::Classical),
            "diffusion" => Ok(InpainterChoice::Diffusion),
            other => Err(Error::Config(format!(
                "unknown inpainter {other:?}; expected \"classical\" or \"diffusion\""
            ))),
        }
    }
}

impl fmt::Display for InpainterChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InpainterChoice::Classical => "classical",
            InpainterChoice::Diffusion => "diffusion",
        })
    }
}

/// Full configuration of one augmentation run. Deserializes from a config
/// file where every field is optional (missing fields take the defaults
/// below) and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Input dataset root (`images/`, `labels/`, `classes.json`).
    pub data_dir: PathBuf,
    /// Output root; written in the input layout plus `report.json`.
    pub out_dir: PathBuf,
    /// Number of insertion operations to attempt.
    pub k: usize,
    /// Classes forced rare regardless of frequency. When non-empty the
    /// frequency threshold is ignored: the list *is* the rare set.
    pub rare_classes: Vec<String>,
    /// Frequency threshold below which a class counts as rare.
    pub rare_threshold: f64,
    /// Classes that may only be pasted onto background, never replace a
    /// major nucleus.
    pub paste_only: Vec<String>,
    pub inpainter: InpainterChoice,
    /// Trained-model file; required for the diffusion inpainter.
    pub checkpoint: Option<PathBuf>,
    /// Denoising steps per fill (diffusion only).
    pub ddim_steps: usize,
    /// Strength of the observation-matching gradient (diffusion only).
    pub guidance_scale: f64,
    pub seed: u64,
    /// Extra copy of the report outside the output dataset.
    pub report: Option<PathBuf>,
    /// Working-window side length in pixels.
    pub patch_size: usize,
    /// Side length of the square removed from context patches before
    /// feature extraction.
    pub center_size: usize,
    /// Reduced feature dimension.
    pub pca_dim: usize,
    /// Fraction of image pixels drawn as background-location candidates.
    pub background_rate: f64,
    /// Radius that must be instance-free around a background location.
    pub clearance_radius: usize,
    /// Foreign-instance pixels an insertion footprint may cover.
    pub overlap_tol: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data_dir: PathBuf::new(),
            out_dir: PathBuf::new(),
            k: 600,
            rare_classes: Vec::new(),
            rare_threshold: DEFAULT_RARE_THRESHOLD,
            paste_only: Vec::new(),
            inpainter: InpainterChoice::Classical,
            checkpoint: None,
            ddim_steps: DEFAULT_DDIM_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            seed: 0,
            report: None,
            patch_size: DEFAULT_PATCH_SIZE,
            center_size: DEFAULT_CENTER_SIZE,
            pca_dim: DEFAULT_PCA_DIM,
            background_rate: DEFAULT_BACKGROUND_RATE,
            clearance_radius: DEFAULT_CLEARANCE_RADIUS,
            overlap_tol: DEFAULT_OVERLAP_TOL,
        }
    }
}

/// Check every field of `config` and list all violations at once.
///
/// # Errors
///
/// [`Error::ConfigList`] with one message per violated constraint.
pub fn validate_config(config: &PipelineConfig) -> Result<()> {
    let mut problems = Vec::new();
    if config.data_dir.as_os_str().is_empty() {
        problems.push("data_dir must be set".to_owned());
    }
    if config.out_dir.as_os_str().is_empty() {
        problems.push("out_dir must be set".to_owned());
    }
    if config.patch_size == 0 {
        problems.push("patch_size must be positive".to_owned());
    }
    if config.center_size == 0 || config.center_size >= config.patch_size {
        problems.push(format!(
            "center_size must be in 1..patch_size, got {} with patch_size {}",
            config.center_size, config.patch_size
        ));
    }
    if config.pca_dim == 0 || config.pca_dim > RAW_FEATURE_DIM {
        problems.push(format!(
            "pca_dim must be in 1..={RAW_FEATURE_DIM}, got {}",
            config.pca_dim
        ));
    }
    if !(0.0..=1.0).contains(&config.rare_threshold) {
        problems.push(format!(
            "rare_threshold must be within [0, 1], got {}",
            config.rare_threshold
        ));
    }
    if !(0.0..=1.0).contains(&config.background_rate) {
        problems.push(format!(
            "background_rate must be within [0, 1], got {}",
            config.background_rate
        ));
    }
    if config.ddim_steps == 0 {
        problems.push("ddim_steps must be positive".to_owned());
    }
    if !config.guidance_scale.is_finite() || config.guidance_scale < 0.0 {
        problems.push(format!(
            "guidance_scale must be finite and non-negative, got {}",
            config.guidance_scale
        ));
    }
    if config.inpainter == InpainterChoice::Diffusion && config.checkpoint.is_none() {
        problems.push("the diffusion inpainter requires a checkpoint file".to_owned());
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigList(problems))
    }
}

/// One rare nucleus prepared for copying: its instance, its raw source
/// patch (nucleus pixels intact), and its reduced context features.
struct RareSource {
    instance: NucleusInstance,
    key: String,
    patch: Patch,
    features: Vec<f64>,
}

/// Context features of an instance location: crop around the centroid,
/// erase the center square so the nucleus itself cannot leak into its own
/// context, harmonically fill the hole, then embed.
fn context_features(
    ds: &Dataset,
    inst: &NucleusInstance,
    key: &str,
    config: &PipelineConfig,
    embedding: &PooledProjectionEmbedding,
) -> Result<Vec<f64>> {
    let patch = crop_patch(&ds.images[inst.image_index], inst.centroid, config.patch_size)?;
    let cut = remove_center(&patch, config.center_size)?;
    let filled = classical_inpaint(&cut)?;
    raw_features(&filled, key, embedding)
}

fn pool_of(kind: &TargetKind) -> TargetPool {
    match kind {
        TargetKind::Major { .. } => TargetPool::Major,
        TargetKind::Background => TargetPool::Background,
    }
}

fn failed_record(
    op_kind: OpKind,
    rare: Option<&RareSource>,
    target: &LocationRecord,
    image: &str,
    reason: String,
) -> OpRecord {
    OpRecord {
        op_kind,
        rare_id: rare.map(|r| r.key.clone()).unwrap_or_default(),
        rare_class: rare.map(|r| r.instance.class_label.clone()).unwrap_or_default(),
        target_key: target.key.clone(),
        target_pool: pool_of(&target.kind),
        image: image.to_owned(),
        center: target.center,
        outcome: OpOutcome::Failed { reason },
        stage1_output_hash: None,
        stage2_conditioning_hash: None,
    }
}

/// Run one full augmentation pass and write the output dataset.
///
/// Stages, in order: load and partition the dataset, sample background
/// candidates, extract and reduce context features, fit the rare context
/// model, draw `k` targets without replacement, then attempt one insertion
/// per target against the *working* dataset so later placements see earlier
/// ones. A failed insertion consumes its target and is recorded with its
/// reason; it never mutates the dataset.
///
/// # Errors
///
/// Configuration and input problems abort before any operation runs:
/// [`Error::ConfigList`] from [`validate_config`], I/O and schema errors
/// from loading, [`Error::PoolExhausted`] when fewer than `k` targets
/// exist, and feature/model errors when the pools are too small. Per-op
/// failures do not abort the run.
pub fn run(config: &PipelineConfig) -> Result<AugmentationReport> {
    validate_config(config)?;
    let ds = load_dataset(&config.data_dir)?;
    log::info!(
        "loaded {} images, {} classes from {}",
        ds.names.len(),
        ds.class_names.len(),
        config.data_dir.display()
    );

    let misc: BTreeSet<String> = config.rare_classes.iter().cloned().collect();
    let threshold = if misc.is_empty() { config.rare_threshold } else { 0.0 };
    let partition = classify_rarity(&ds, threshold, &misc)?;
    let rare_class_list: Vec<String> = partition.rare_classes.iter().cloned().collect();
    log::info!(
        "{} rare nuclei ({:?}), {} major nuclei",
        partition.rare.len(),
        rare_class_list,
        partition.major.len()
    );
    if config.k > 0 && partition.rare.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no rare nuclei to insert: no class falls below the rarity threshold \
             ({}) and no rare classes were named explicitly",
            threshold
        )));
    }

    let class_counts_before = ds.class_counts()?;
    if config.k == 0 {
        let report = AugmentationReport {
            class_counts_before: class_counts_before.clone(),
            class_counts_after: class_counts_before,
            rare_classes: rare_class_list,
            ..AugmentationReport::default()
        };
        report.verify()?;
        emit_augmented(&ds, &[], &report, &config.out_dir)?;
        if let Some(path) = &config.report {
            write_report(&report, path)?;
        }
        return Ok(report);
    }

    // Candidate background locations, drawn per image from that image's
    // own seed stream so the set does not depend on image order.
    let mut backgrounds: Vec<(usize, (usize, usize))> = Vec::new();
    for (idx, labelmap) in ds.labelmaps.iter().enumerate() {
        let mut rng = child_rng(config.seed, "background", idx as u64);
        for loc in sample_background_locations(
            labelmap,
            config.background_rate,
            config.clearance_radius,
            &mut rng,
        ) {
            backgrounds.push((idx, loc));
        }
    }
    log::info!("{} background candidates", backgrounds.len());

    // Raw context features for all three pools. The standardizer is fit on
    // the rare pool alone; the reducer on the standardized union, so rare
    // and target neighborhoods share one feature space.
    let embedding = PooledProjectionEmbedding::new(child_seed(config.seed, "embedding", 0));
    let mut rare_raw = Vec::with_capacity(partition.rare.len());
    for inst in &partition.rare {
        let key = ds.instance_key(inst.image_index, inst.instance_id);
        rare_raw.push(context_features(&ds, inst, &key, config, &embedding)?);
    }
    let mut major_raw = Vec::with_capacity(partition.major.len());
    for inst in &partition.major {
        let key = ds.instance_key(inst.image_index, inst.instance_id);
        major_raw.push(context_features(&ds, inst, &key, config, &embedding)?);
    }
    let mut background_raw = Vec::with_capacity(backgrounds.len());
    for &(idx, center) in &backgrounds {
        let key = format!("{}/bg/{}/{}", ds.names[idx], center.0, center.1);
        let patch = crop_patch(&ds.images[idx], center, config.patch_size)?;
        background_raw.push(raw_features(&patch, &key, &embedding)?);
    }

    let standardizer = Standardizer::fit(&rare_raw)?;
    let union: Vec<Vec<f64>> = rare_raw
        .iter()
        .chain(&major_raw)
        .chain(&background_raw)
        .map(|v| standardizer.apply(v))
        .collect();
    let reducer = fit_pca(&union, config.pca_dim)?;
    let reduce = |raw: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        raw.iter()
            .map(|v| project(&reducer, &standardizer.apply(v)))
            .collect()
    };
    let rare_features = reduce(&rare_raw)?;
    let major_features = reduce(&major_raw)?;
    let background_features = reduce(&background_raw)?;
    let model = fit_rare_gaussian(&rare_features, None)?;
    log::info!("context model fit on {} rare neighborhoods", rare_features.len());

    // Target candidate records, keyed globally across all images.
    let rules = ClassRules {
        paste_only: config.paste_only.iter().cloned().collect(),
    };
    let all_rare_paste_only = !rare_class_list.is_empty()
        && rare_class_list.iter().all(|c| rules.is_paste_only(c));
    let mut major_records = Vec::new();
    let mut major_kv = Vec::new();
    if !all_rare_paste_only {
        for (inst, features) in partition.major.iter().zip(&major_features) {
            let key = ds.instance_key(inst.image_index, inst.instance_id);
            major_records.push(LocationRecord {
                key: key.clone(),
                image_index: inst.image_index,
                center: inst.centroid,
                kind: TargetKind::Major {
                    instance_id: inst.instance_id,
                },
                features: features.clone(),
            });
            major_kv.push((key, features.clone()));
        }
    }
    let mut background_records = Vec::new();
    let mut background_kv = Vec::new();
    for (&(idx, center), features) in backgrounds.iter().zip(&background_features) {
        let key = format!("{}/bg/{}/{}", ds.names[idx], center.0, center.1);
        background_records.push(LocationRecord {
            key: key.clone(),
            image_index: idx,
            center,
            kind: TargetKind::Background,
            features: features.clone(),
        });
        background_kv.push((key, features.clone()));
    }

    let mut state = SelectionState::new();
    let mut target_rng = child_rng(config.seed, "targets", 0);
    let targets = sample_targets(
        &model,
        &major_kv,
        &background_kv,
        config.k,
        &mut state,
        &mut target_rng,
    )?;
    log::info!(
        "sampled {} targets from {} majors + {} backgrounds",
        targets.len(),
        major_kv.len(),
        background_kv.len()
    );

    let inpainter: Box<dyn Inpainter> = match config.inpainter {
        InpainterChoice::Classical => Box::new(ClassicalInpainter),
        InpainterChoice::Diffusion => {
            let path = config.checkpoint.as_ref().expect("checkpoint presence validated");
            Box::new(DiffusionInpainter::from_checkpoint(
                path,
                config.ddim_steps,
                config.guidance_scale,
                child_seed(config.seed, "inpaint", 0),
            )?)
        }
    };

    let mut rare_sources = Vec::with_capacity(partition.rare.len());
    for (inst, features) in partition.rare.iter().zip(&rare_features) {
        let key = ds.instance_key(inst.image_index, inst.instance_id);
        let patch = crop_patch(&ds.images[inst.image_index], inst.centroid, config.patch_size)?;
        rare_sources.push(RareSource {
            instance: inst.clone(),
            key,
            patch,
            features: features.clone(),
        });
    }

    // The op loop mutates a working copy so each plan is checked against
    // the labelmap that includes every earlier insertion.
    let mut working = ds.clone();
    let mut applied_list: Vec<AppliedPatch> = Vec::new();
    let mut records: Vec<OpRecord> = Vec::new();
    for (j, sampled) in targets.iter().enumerate() {
        let target = if sampled.from_background {
            &background_records[sampled.index]
        } else {
            &major_records[sampled.index]
        };
        let image_name = &ds.names[target.image_index];
        let op_kind = match target.kind {
            TargetKind::Major { .. } => OpKind::Replace,
            TargetKind::Background => OpKind::Paste,
        };

        // Rare nuclei of paste-only classes cannot serve a replace target.
        let eligible: Vec<usize> = (0..rare_sources.len())
            .filter(|&i| {
                op_kind == OpKind::Paste
                    || !rules.is_paste_only(&rare_sources[i].instance.class_label)
            })
            .collect();
        if eligible.is_empty() {
            records.push(failed_record(
                op_kind,
                None,
                target,
                image_name,
                "no rare nucleus is allowed to replace a major target".to_owned(),
            ));
            continue;
        }
        let pool: Vec<(String, Vec<f64>)> = eligible
            .iter()
            .map(|&i| (rare_sources[i].key.clone(), rare_sources[i].features.clone()))
            .collect();
        let mut select_rng = child_rng(config.seed, "select", j as u64);
        let picked = select_rare_nucleus(&target.features, &pool, &mut state, &mut select_rng)?;
        let source = &rare_sources[eligible[picked]];

        let attempt = plan_placement(
            &source.instance,
            &source.key,
            &source.patch,
            target,
            &working.labelmaps[target.image_index],
            &rules,
            config.overlap_tol,
        )
        .and_then(|plan| {
            let new_id = working.next_free_id(target.image_index);
            augment_one(
                &working.images[target.image_index],
                image_name,
                &plan,
                inpainter.as_ref(),
                new_id,
            )
        });
        match attempt {
            Ok(op) => {
                working.apply_patch(&op.applied)?;
                log::debug!("op {j}: {} -> {} applied", source.key, target.key);
                applied_list.push(op.applied);
                records.push(op.record);
            }
            Err(e) => {
                log::debug!("op {j}: {} -> {} failed: {e}", source.key, target.key);
                records.push(failed_record(
                    op_kind,
                    Some(source),
                    target,
                    image_name,
                    e.to_string(),
                ));
            }
        }
    }

    let successes = |kind: OpKind| {
        records
            .iter()
            .filter(|r| r.op_kind == kind && matches!(r.outcome, OpOutcome::Success { .. }))
            .count()
    };
    let replace_count = successes(OpKind::Replace);
    let paste_count = successes(OpKind::Paste);
    let report = AugmentationReport {
        class_counts_before,
        class_counts_after: working.class_counts()?,
        rare_classes: rare_class_list,
        ops_attempted: config.k,
        ops_succeeded: replace_count + paste_count,
        ops_failed: config.k - replace_count - paste_count,
        replace_count,
        paste_count,
        ops: records,
    };
    report.verify()?;
    log::info!(
        "{} of {} ops succeeded ({} replace, {} paste)",
        report.ops_succeeded,
        report.ops_attempted,
        report.replace_count,
        report.paste_count
    );

    emit_augmented(&ds, &applied_list, &report, &config.out_dir)?;
    if let Some(path) = &config.report {
        write_report(&report, path)?;
    }
    Ok(report)
}
