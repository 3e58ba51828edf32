//! Dataset loading, rarity partition, and augmentation bookkeeping.
//!
//! On disk a dataset is `images/<name>.png` (8-bit RGB), `labels/<name>.png`
//! (16-bit single-channel instance ids, 0 = background) and a `classes.json`
//! sidecar mapping `"<name>/<id>"` to a class-label string. In memory the
//! label rasters widen to `u32`; instance ids are unique within one image
//! but not across images, so the `<name>/<id>` key is the global handle.

use crate::error::{Error, Result};
use crate::patch::{write_patch, Patch};
use crate::raster::{LabelMap, Mask, RgbRaster};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

pub const DEFAULT_RARE_THRESHOLD: f64 = 0.05;
pub const DEFAULT_BACKGROUND_RATE: f64 = 5e-4;
pub const DEFAULT_CLEARANCE_RADIUS: usize = 16;

/// An instance-segmentation dataset held fully in memory.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    /// Image stem names, sorted; index here is the image index everywhere.
    pub names: Vec<String>,
    pub images: Vec<RgbRaster>,
    pub labelmaps: Vec<LabelMap>,
    /// `"<name>/<id>"` → class label.
    pub class_table: BTreeMap<String, String>,
    /// Sorted unique class labels present in `class_table`.
    pub class_names: Vec<String>,
}

/// One labeled nucleus: its id, class, rounded centroid, and the binary
/// mask cropped to the (end-exclusive) bounding box.
#[derive(Debug, Clone)]
pub struct NucleusInstance {
    pub image_index: usize,
    pub instance_id: u32,
    pub class_label: String,
    /// (row, col) rounded mean of mask pixels, in image coordinates.
    pub centroid: (usize, usize),
    /// Mask cropped to `bbox`; indexed relative to `(bbox.0, bbox.1)`.
    pub mask: Mask,
    /// (r0, c0, r1, c1), end-exclusive, in image coordinates.
    pub bbox: (usize, usize, usize, usize),
}

impl NucleusInstance {
    /// Number of pixels in the instance mask.
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// Rare/major instance split plus sampled background locations.
#[derive(Debug, Clone, Default)]
pub struct RarityPartition {
    pub rare: Vec<NucleusInstance>,
    pub major: Vec<NucleusInstance>,
    /// (image index, (row, col)) of instance-free locations.
    pub background: Vec<(usize, (usize, usize))>,
    pub rare_classes: BTreeSet<String>,
}

/// Which pool a target location was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetPool {
    Major,
    Background,
}

/// The two insertion operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Replace,
    Paste,
}

/// Terminal state of one attempted insertion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum OpOutcome {
    Success { new_instance_id: u32 },
    Failed { reason: String },
}

/// One attempted insertion, successful or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_kind: OpKind,
    /// Global key of the copied rare nucleus.
    pub rare_id: String,
    pub rare_class: String,
    /// Global key of the consumed target location.
    pub target_key: String,
    pub target_pool: TargetPool,
    pub image: String,
    pub center: (usize, usize),
    pub outcome: OpOutcome,
    /// Hex digest of the stage-1 output pixels (replace ops only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1_output_hash: Option<String>,
    /// Hex digest of the pixels stage 2 conditioned on; equals
    /// `stage1_output_hash` on replace ops by the staging contract.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2_conditioning_hash: Option<String>,
}

/// Bookkeeping for a whole augmentation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationReport {
    pub class_counts_before: BTreeMap<String, usize>,
    pub class_counts_after: BTreeMap<String, usize>,
    pub rare_classes: Vec<String>,
    pub ops_attempted: usize,
    pub ops_succeeded: usize,
    pub ops_failed: usize,
    pub replace_count: usize,
    pub paste_count: usize,
    pub ops: Vec<OpRecord>,
}

impl AugmentationReport {
    /// Per-class instance-count delta (after − before).
    pub fn delta(&self, class: &str) -> i64 {
        let before = *self.class_counts_before.get(class).unwrap_or(&0) as i64;
        let after = *self.class_counts_after.get(class).unwrap_or(&0) as i64;
        after - before
    }

    /// Check the arithmetic the report promises: op counts add up, the op
    /// table matches the tallies, rare classes gained exactly
    /// `ops_succeeded` instances, and major classes lost exactly
    /// `replace_count`.
    ///
    /// # Errors
    ///
    /// [`Error::ReportMismatch`] naming the first violated identity.
    pub fn verify(&self) -> Result<()> {
        if self.ops_succeeded + self.ops_failed != self.ops_attempted {
            return Err(Error::ReportMismatch(format!(
                "succeeded {} + failed {} != attempted {}",
                self.ops_succeeded, self.ops_failed, self.ops_attempted
            )));
        }
        if self.replace_count + self.paste_count != self.ops_succeeded {
            return Err(Error::ReportMismatch(format!(
                "replace {} + paste {} != succeeded {}",
                self.replace_count, self.paste_count, self.ops_succeeded
            )));
        }
        let successes = |kind: OpKind| {
            self.ops
                .iter()
                .filter(|op| {
                    op.op_kind == kind && matches!(op.outcome, OpOutcome::Success { .. })
                })
                .count()
        };
        if !self.ops.is_empty() {
            if successes(OpKind::Replace) != self.replace_count
                || successes(OpKind::Paste) != self.paste_count
            {
                return Err(Error::ReportMismatch(
                    "op table tallies disagree with replace/paste counts".into(),
                ));
            }
            if self.ops.len() != self.ops_attempted {
                return Err(Error::ReportMismatch(format!(
                    "op table has {} rows but {} ops were attempted",
                    self.ops.len(),
                    self.ops_attempted
                )));
            }
        }
        if !self.rare_classes.is_empty() {
            let rare: BTreeSet<&str> = self.rare_classes.iter().map(String::as_str).collect();
            let rare_gain: i64 = rare.iter().map(|c| self.delta(c)).sum();
            if rare_gain != self.ops_succeeded as i64 {
                return Err(Error::ReportMismatch(format!(
                    "rare classes gained {rare_gain} but {} ops succeeded",
                    self.ops_succeeded
                )));
            }
            let major_loss: i64 = self
                .class_counts_before
                .keys()
                .filter(|c| !rare.contains(c.as_str()))
                .map(|c| -self.delta(c))
                .sum();
            if major_loss != self.replace_count as i64 {
                return Err(Error::ReportMismatch(format!(
                    "major classes lost {major_loss} but {} replace ops succeeded",
                    self.replace_count
                )));
            }
        }
        Ok(())
    }
}

/// One finished insertion, ready to be burned into a dataset: the blended
/// patch plus the labelmap delta it implies.
#[derive(Debug, Clone)]
pub struct AppliedPatch {
    pub image_index: usize,
    /// Final blended patch; written back at its origin (in-image part only).
    pub patch: Patch,
    pub new_instance_id: u32,
    pub new_class: String,
    /// New nucleus mask in patch coordinates.
    pub nucleus_mask: Mask,
    /// Major instance erased by a replace op.
    pub erased_instance_id: Option<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Global key of an instance: `"<image name>/<id>"`.
    pub fn instance_key(&self, image_index: usize, id: u32) -> String {
        format!("{}/{}", self.names[image_index], id)
    }

    /// Class label of an instance, if the table knows it.
    pub fn class_of(&self, image_index: usize, id: u32) -> Option<&str> {
        self.class_table
            .get(&self.instance_key(image_index, id))
            .map(String::as_str)
    }

    /// Enumerate the instances of one image, ordered by id. Pixels sharing
    /// an id form one instance regardless of connectivity.
    ///
    /// # Errors
    ///
    /// [`Error::Schema`] when a labelmap id has no class entry.
    pub fn instances(&self, image_index: usize) -> Result<Vec<NucleusInstance>> {
        let labels = &self.labelmaps[image_index];
        let mut pixels: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
        for ((r, c), &id) in labels.indexed_iter() {
            if id != 0 {
                pixels.entry(id).or_default().push((r, c));
            }
        }
        let mut out = Vec::with_capacity(pixels.len());
        for (id, px) in pixels {
            let class_label = self
                .class_of(image_index, id)
                .ok_or_else(|| {
                    Error::schema(
                        "classes.json",
                        format!(
                            "instance {} has no class entry",
                            self.instance_key(image_index, id)
                        ),
                    )
                })?
                .to_owned();
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            let (mut sr, mut sc) = (0usize, 0usize);
            for &(r, c) in &px {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r + 1);
                c1 = c1.max(c + 1);
                sr += r;
                sc += c;
            }
            let n = px.len();
            let centroid = (
                (sr as f64 / n as f64).round() as usize,
                (sc as f64 / n as f64).round() as usize,
            );
            let mut mask = Array2::from_elem((r1 - r0, c1 - c0), false);
            for &(r, c) in &px {
                mask[(r - r0, c - c0)] = true;
            }
            out.push(NucleusInstance {
                image_index,
                instance_id: id,
                class_label,
                centroid,
                mask,
                bbox: (r0, c0, r1, c1),
            });
        }
        Ok(out)
    }

    /// All instances of all images, in (image, id) order.
    pub fn all_instances(&self) -> Result<Vec<NucleusInstance>> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            out.extend(self.instances(i)?);
        }
        Ok(out)
    }

    /// Instance count per class over the whole dataset — the recount oracle
    /// behind every conservation check.
    pub fn class_counts(&self) -> Result<BTreeMap<String, usize>> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for class in &self.class_names {
            counts.insert(class.clone(), 0);
        }
        for inst in self.all_instances()? {
            *counts.entry(inst.class_label).or_insert(0) += 1;
        }
        Ok(counts)
    }

    /// Smallest id not used by any instance of the image (for fresh ids).
    pub fn next_free_id(&self, image_index: usize) -> u32 {
        self.labelmaps[image_index]
            .iter()
            .copied()
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Burn one finished insertion into the dataset: write the blended
    /// patch back, drop the erased instance (pixels and class entry), and
    /// register the new instance in the labelmap and class table.
    ///
    /// # Errors
    ///
    /// [`Error::Config`] when the new id already exists in the image.
    pub fn apply_patch(&mut self, ap: &AppliedPatch) -> Result<()> {
        let idx = ap.image_index;
        let key = self.instance_key(idx, ap.new_instance_id);
        if self.labelmaps[idx].iter().any(|&id| id == ap.new_instance_id) {
            return Err(Error::Config(format!("instance id {key} already in use")));
        }
        write_patch(&mut self.images[idx], &ap.patch);
        if let Some(old) = ap.erased_instance_id {
            let old_key = self.instance_key(idx, old);
            self.labelmaps[idx].mapv_inplace(|id| if id == old { 0 } else { id });
            self.class_table.remove(&old_key);
        }
        let (h, w) = self.labelmaps[idx].dim();
        for ((r, c), &on) in ap.nucleus_mask.indexed_iter() {
            if !on {
                continue;
            }
            let ir = ap.patch.origin.0 + r as i64;
            let ic = ap.patch.origin.1 + c as i64;
            if ir >= 0 && ic >= 0 && (ir as usize) < h && (ic as usize) < w {
                self.labelmaps[idx][(ir as usize, ic as usize)] = ap.new_instance_id;
            }
        }
        self.class_table.insert(key, ap.new_class.clone());
        Ok(())
    }

    /// Check the structural invariants: paired dimensions and a class entry
    /// for every labelmap id.
    pub fn verify(&self) -> Result<()> {
        if self.images.len() != self.labelmaps.len() || self.images.len() != self.names.len() {
            return Err(Error::schema(".", "images, labels and names disagree in count"));
        }
        for (i, (img, labels)) in self.images.iter().zip(&self.labelmaps).enumerate() {
            let (h, w, _) = img.dim();
            if labels.dim() != (h, w) {
                return Err(Error::schema(
                    format!("labels/{}.png", self.names[i]),
                    format!("labelmap {:?} does not match image {h}x{w}", labels.dim()),
                ));
            }
            let ids: BTreeSet<u32> = labels.iter().copied().filter(|&id| id != 0).collect();
            for id in ids {
                if self.class_of(i, id).is_none() {
                    return Err(Error::schema(
                        "classes.json",
                        format!("instance {} has no class entry", self.instance_key(i, id)),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Decode an 8-bit RGB image into an `(H, W, 3)` raster.
pub fn load_rgb(path: &Path) -> Result<RgbRaster> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Array3::from_shape_vec((h as usize, w as usize, 3), raw)
        .map_err(|_| Error::schema(path, "RGB buffer does not match its dimensions"))
}

/// Decode a single-channel label image (8- or 16-bit gray) into ids.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    let (raw, w, h): (Vec<u32>, u32, u32) = match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            (buf.into_raw().into_iter().map(u32::from).collect(), w, h)
        }
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            (buf.into_raw().into_iter().map(u32::from).collect(), w, h)
        }
        other => {
            return Err(Error::schema(
                path,
                format!(
                    "labelmap must be single-channel gray, got {:?}",
                    other.color()
                ),
            ))
        }
    };
    Array2::from_shape_vec((h as usize, w as usize), raw)
        .map_err(|_| Error::schema(path, "label buffer does not match its dimensions"))
}

/// Encode an `(H, W, 3)` raster as an 8-bit RGB PNG.
pub fn save_rgb(path: &Path, raster: &RgbRaster) -> Result<()> {
    let (h, w, _) = raster.dim();
    let raw: Vec<u8> = raster.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("raster dimensions are self-consistent");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })
}

/// Encode a labelmap as a 16-bit gray PNG.
///
/// # Errors
///
/// [`Error::Schema`] when an id exceeds the 16-bit range of the format.
pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dim();
    let mut raw = Vec::with_capacity(h * w);
    for &id in labels.iter() {
        if id > u32::from(u16::MAX) {
            return Err(Error::schema(
                path,
                format!("instance id {id} exceeds the 16-bit label format"),
            ));
        }
        raw.push(id as u16);
    }
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("raster dimensions are self-consistent");
    image::DynamicImage::ImageLuma16(buf)
        .save(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })
}

/// Load a dataset directory: `images/*.png`, `labels/*.png`, `classes.json`.
/// Missing subdirectories read as empty; every image must pair with a
/// labelmap and vice versa.
///
/// # Errors
///
/// [`Error::MissingPair`] for unpaired files, [`Error::Schema`] for
/// dimension or class-table violations, [`Error::Io`]/[`Error::Image`] for
/// filesystem and decode failures.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let stems = |dir: &Path| -> Result<BTreeSet<String>> {
        let mut out = BTreeSet::new();
        if !dir.is_dir() {
            return Ok(out);
        }
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().is_some_and(|e| e == "png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_owned());
                }
            }
        }
        Ok(out)
    };

    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    let image_stems = stems(&images_dir)?;
    let label_stems = stems(&labels_dir)?;
    if let Some(only) = image_stems.difference(&label_stems).next() {
        return Err(Error::MissingPair {
            path: images_dir.join(format!("{only}.png")),
            what: "no matching labelmap".into(),
        });
    }
    if let Some(only) = label_stems.difference(&image_stems).next() {
        return Err(Error::MissingPair {
            path: labels_dir.join(format!("{only}.png")),
            what: "no matching image".into(),
        });
    }

    let class_path = root.join("classes.json");
    let class_table: BTreeMap<String, String> = if class_path.is_file() {
        let text =
            std::fs::read_to_string(&class_path).map_err(|e| Error::io(&class_path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::schema(&class_path, format!("invalid class table: {e}")))?
    } else {
        BTreeMap::new()
    };
    let class_names: Vec<String> = class_table
        .values()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    let names: Vec<String> = image_stems.into_iter().collect();
    let mut images = Vec::with_capacity(names.len());
    let mut labelmaps = Vec::with_capacity(names.len());
    for name in &names {
        images.push(load_rgb(&images_dir.join(format!("{name}.png")))?);
        labelmaps.push(load_labels(&labels_dir.join(format!("{name}.png")))?);
    }

    let ds = Dataset {
        names,
        images,
        labelmaps,
        class_table,
        class_names,
    };
    ds.verify()?;
    Ok(ds)
}

/// Split instances into rare and major classes: a class is rare when its
/// share of all instances falls below `freq_threshold` or its label is in
/// `misc_labels`. Background locations are left for
/// [`sample_background_locations`].
///
/// # Errors
///
/// [`Error::Config`] when every class comes out rare (no replacement pool).
pub fn classify_rarity(
    ds: &Dataset,
    freq_threshold: f64,
    misc_labels: &BTreeSet<String>,
) -> Result<RarityPartition> {
    let instances = ds.all_instances()?;
    let total = instances.len();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for inst in &instances {
        *counts.entry(inst.class_label.as_str()).or_insert(0) += 1;
    }
    let rare_classes: BTreeSet<String> = counts
        .iter()
        .filter(|(class, &count)| {
            misc_labels.contains(**class) || (count as f64) < freq_threshold * total as f64
        })
        .map(|(class, _)| (*class).to_owned())
        .collect();
    if !counts.is_empty() && rare_classes.len() == counts.len() {
        return Err(Error::Config(
            "every class is rare; nothing is left to replace".into(),
        ));
    }
    if rare_classes.is_empty() {
        log::warn!("no class qualifies as rare; augmentation would be a no-op");
    }
    let mut partition = RarityPartition {
        rare_classes,
        ..RarityPartition::default()
    };
    for inst in instances {
        if partition.rare_classes.contains(&inst.class_label) {
            partition.rare.push(inst);
        } else {
            partition.major.push(inst);
        }
    }
    Ok(partition)
}

/// Draw `⌊rate·H·W⌋` uniform pixel locations and keep those whose
/// `clearance_radius` disk contains no instance pixel. Duplicate draws
/// collapse to one location; order follows the draw sequence.
pub fn sample_background_locations(
    labelmap: &LabelMap,
    rate: f64,
    clearance_radius: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let (h, w) = labelmap.dim();
    if h == 0 || w == 0 || rate <= 0.0 {
        return Vec::new();
    }
    let draws = (rate * (h * w) as f64).floor() as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for _ in 0..draws {
        let r = rng.random_range(0..h);
        let c = rng.random_range(0..w);
        if seen.insert((r, c)) && disk_is_clear(labelmap, (r, c), clearance_radius) {
            out.push((r, c));
        }
    }
    out
}

/// True when no pixel of the Euclidean disk around `center` carries an
/// instance id. Out-of-image parts of the disk count as clear.
pub fn disk_is_clear(labelmap: &LabelMap, center: (usize, usize), radius: usize) -> bool {
    let (h, w) = labelmap.dim();
    let rr = radius as i64;
    for dr in -rr..=rr {
        for dc in -rr..=rr {
            if dr * dr + dc * dc > rr * rr {
                continue;
            }
            let r = center.0 as i64 + dr;
            let c = center.1 as i64 + dc;
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                continue;
            }
            if labelmap[(r as usize, c as usize)] != 0 {
                return false;
            }
        }
    }
    true
}

/// Write a dataset to `root` in the input layout: `images/`, `labels/`,
/// `classes.json`.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    for (i, name) in ds.names.iter().enumerate() {
        save_rgb(&images_dir.join(format!("{name}.png")), &ds.images[i])?;
        save_labels(&labels_dir.join(format!("{name}.png")), &ds.labelmaps[i])?;
    }
    let class_path = root.join("classes.json");
    let text = serde_json::to_string_pretty(&ds.class_table)
        .expect("a string map always serializes");
    std::fs::write(&class_path, text + "\n").map_err(|e| Error::io(&class_path, e))
}

/// Replay `applied` onto a copy of `ds`, then write the augmented dataset
/// in the input format plus `report.json` under `out_path`.
pub fn emit_augmented(
    ds: &Dataset,
    applied: &[AppliedPatch],
    report: &AugmentationReport,
    out_path: &Path,
) -> Result<()> {
    let mut out = ds.clone();
    for ap in applied {
        out.apply_patch(ap)?;
    }
    save_dataset(&out, out_path)?;
    write_report(report, &out_path.join("report.json"))
}

/// Serialize a report as pretty JSON with a trailing newline.
pub fn write_report(report: &AugmentationReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report always serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Recount both datasets and report the per-class deltas. Op fields stay
/// zero: this is the independent oracle a pipeline report is audited
/// against, not a record of what the pipeline claims it did.
///
/// # Errors
///
/// [`Error::ReportMismatch`] when the class-name lists differ.
pub fn distribution_report(before: &Dataset, after: &Dataset) -> Result<AugmentationReport> {
    if before.class_names != after.class_names {
        return Err(Error::ReportMismatch(format!(
            "class names differ: {:?} vs {:?}",
            before.class_names, after.class_names
        )));
    }
    Ok(AugmentationReport {
        class_counts_before: before.class_counts()?,
        class_counts_after: after.class_counts()?,
        ..AugmentationReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::crop_patch;
    use crate::rng::child_rng;
    use tempfile::TempDir;

    /// A dataset with one `side`x`side` image whose instances are single
    /// pixels laid out row-major, `counts[i]` of class `classes[i]`.
    /// Instances sit on every other pixel when the image has room.
    fn single_pixel_dataset(side: usize, classes: &[&str], counts: &[usize]) -> Dataset {
        let total: usize = counts.iter().sum();
        assert!(total <= side * side);
        let stride = if 2 * total <= side * side { 2 } else { 1 };
        let mut labels = Array2::zeros((side, side));
        let mut class_table = BTreeMap::new();
        let mut id = 0u32;
        for (class, &count) in classes.iter().zip(counts) {
            for _ in 0..count {
                id += 1;
                let pixel = (id as usize - 1) * stride;
                labels[(pixel / side, pixel % side)] = id;
                class_table.insert(format!("img/{id}"), (*class).to_owned());
            }
        }
        let class_names = classes.iter().map(|c| (*c).to_owned()).collect();
        Dataset {
            names: vec!["img".into()],
            images: vec![Array3::zeros((side, side, 3))],
            labelmaps: vec![labels],
            class_table,
            class_names,
        }
    }

    fn write_toy_dir(root: &Path) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("labels")).unwrap();
        for (name, ids) in [("a", [1u32, 2, 3, 4, 5]), ("b", [1, 2, 3, 4, 5])] {
            let mut img = Array3::zeros((16, 16, 3));
            img[(0, 0, 0)] = 200;
            let mut labels = Array2::zeros((16, 16));
            for (i, &id) in ids.iter().enumerate() {
                labels[(3 * i, 3 * i)] = id;
                labels[(3 * i, 3 * i + 1)] = id;
            }
            save_rgb(&root.join(format!("images/{name}.png")), &img).unwrap();
            save_labels(&root.join(format!("labels/{name}.png")), &labels).unwrap();
        }
        let mut table = BTreeMap::new();
        for name in ["a", "b"] {
            for id in 1..=5 {
                let class = if id == 1 { "rare" } else { "common" };
                table.insert(format!("{name}/{id}"), class.to_owned());
            }
        }
        std::fs::write(
            root.join("classes.json"),
            serde_json::to_string_pretty(&table).unwrap(),
        )
        .unwrap();
    }

    #[test]
    fn loads_two_pairs_with_ten_instances() {
        let dir = TempDir::new().unwrap();
        write_toy_dir(dir.path());
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.names, ["a", "b"]);
        assert_eq!(ds.class_table.len(), 10);
        assert_eq!(ds.class_names, ["common", "rare"]);
        let instances = ds.all_instances().unwrap();
        assert_eq!(instances.len(), 10);
        let first = &instances[0];
        assert_eq!(first.instance_id, 1);
        assert_eq!(first.area(), 2);
        assert_eq!(first.bbox, (0, 0, 1, 2));
        assert_eq!(first.centroid, (0, 1)); // mean col 0.5 rounds up
    }

    #[test]
    fn unknown_labelmap_id_is_a_schema_error() {
        let dir = TempDir::new().unwrap();
        write_toy_dir(dir.path());
        // Introduce id 7 without a class entry.
        let mut labels = load_labels(&dir.path().join("labels/a.png")).unwrap();
        labels[(15, 15)] = 7;
        save_labels(&dir.path().join("labels/a.png"), &labels).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn empty_directory_is_a_valid_empty_dataset() {
        let dir = TempDir::new().unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert!(ds.is_empty());
        assert!(ds.class_table.is_empty());
    }

    #[test]
    fn unpaired_files_are_rejected_both_ways() {
        let dir = TempDir::new().unwrap();
        write_toy_dir(dir.path());
        std::fs::remove_file(dir.path().join("labels/b.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::MissingPair { .. })
        ));
        let dir = TempDir::new().unwrap();
        write_toy_dir(dir.path());
        std::fs::remove_file(dir.path().join("images/a.png")).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::MissingPair { .. })
        ));
    }

    #[test]
    fn mismatched_dimensions_are_a_schema_error() {
        let dir = TempDir::new().unwrap();
        write_toy_dir(dir.path());
        save_labels(&dir.path().join("labels/a.png"), &Array2::zeros((8, 8))).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn four_class_partition_matches_hand_counts() {
        // Four-class corpus, 15555 instances, miscellaneous forced rare:
        // 371/15555 ≈ 2.4% is also below the 5% threshold on its own.
        let ds = single_pixel_dataset(
            200,
            &["miscellaneous", "inflammatory", "epithelial", "spindle"],
            &[371, 3941, 5537, 5706],
        );
        let misc: BTreeSet<String> = [String::from("miscellaneous")].into();
        let part = classify_rarity(&ds, DEFAULT_RARE_THRESHOLD, &misc).unwrap();
        assert_eq!(
            part.rare_classes.iter().collect::<Vec<_>>(),
            ["miscellaneous"]
        );
        assert_eq!(part.rare.len(), 371);
        assert_eq!(part.major.len(), 15184);
    }

    #[test]
    fn two_small_classes_fall_below_the_frequency_threshold() {
        let ds = single_pixel_dataset(
            250,
            &["epithelial", "lymphocyte", "macrophages", "neutrophils"],
            &[12121, 12524, 422, 541],
        );
        let part = classify_rarity(&ds, DEFAULT_RARE_THRESHOLD, &BTreeSet::new()).unwrap();
        let rare: Vec<&String> = part.rare_classes.iter().collect();
        assert_eq!(rare, ["macrophages", "neutrophils"]);
        assert_eq!(part.rare.len(), 963);
        assert_eq!(part.major.len(), 24645);
    }

    #[test]
    fn single_class_dataset_has_no_rare_pool() {
        let ds = single_pixel_dataset(20, &["only"], &[30]);
        let part = classify_rarity(&ds, DEFAULT_RARE_THRESHOLD, &BTreeSet::new()).unwrap();
        assert!(part.rare_classes.is_empty());
        assert!(part.rare.is_empty());
        assert_eq!(part.major.len(), 30);
    }

    #[test]
    fn all_classes_rare_is_a_configuration_error() {
        let ds = single_pixel_dataset(20, &["only"], &[30]);
        let misc: BTreeSet<String> = [String::from("only")].into();
        assert!(matches!(
            classify_rarity(&ds, DEFAULT_RARE_THRESHOLD, &misc),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn background_sampling_draws_the_configured_count() {
        let labels = Array2::zeros((1000, 1000));
        let mut rng = child_rng(41, "bg", 0);
        let kept =
            sample_background_locations(&labels, DEFAULT_BACKGROUND_RATE, 4, &mut rng);
        // Empty labelmap: every unique draw survives; this seed has no
        // duplicate among its 500 draws.
        assert_eq!(kept.len(), 500);
        let mut rng = child_rng(41, "bg", 1);
        assert!(sample_background_locations(&labels, 0.0, 4, &mut rng).is_empty());
    }

    #[test]
    fn fully_labeled_raster_rejects_every_draw() {
        let labels = Array2::from_elem((16, 16), 3u32);
        let mut rng = child_rng(42, "bg-full", 0);
        // Rate 1.0: every pixel drawn in expectation; all rejected.
        assert!(sample_background_locations(&labels, 1.0, 2, &mut rng).is_empty());
    }

    #[test]
    fn kept_locations_respect_the_clearance_disk() {
        let mut labels = Array2::zeros((120, 120));
        labels[(60, 60)] = 9;
        let mut rng = child_rng(43, "bg-clear", 0);
        let kept = sample_background_locations(&labels, 0.05, 16, &mut rng);
        assert!(!kept.is_empty());
        for &(r, c) in &kept {
            assert!(disk_is_clear(&labels, (r, c), 16));
            let dr = r as i64 - 60;
            let dc = c as i64 - 60;
            assert!(dr * dr + dc * dc > 16 * 16);
        }
    }

    #[test]
    fn background_sampling_is_deterministic() {
        let labels = Array2::zeros((300, 300));
        let run = |seed| {
            let mut rng = child_rng(44, "bg-det", seed);
            sample_background_locations(&labels, 1e-3, 8, &mut rng)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    fn paste_target_dataset() -> Dataset {
        let dir_free = Array3::from_elem((64, 64, 3), 80u8);
        let mut labels = Array2::zeros((64, 64));
        labels[(8, 8)] = 1;
        labels[(8, 9)] = 1;
        labels[(40, 40)] = 2;
        let mut class_table = BTreeMap::new();
        class_table.insert("img/1".into(), "rare".into());
        class_table.insert("img/2".into(), "common".into());
        Dataset {
            names: vec!["img".into()],
            images: vec![dir_free],
            labelmaps: vec![labels],
            class_table,
            class_names: vec!["common".into(), "rare".into()],
        }
    }

    fn applied_patch(ds: &Dataset, erase: Option<u32>) -> AppliedPatch {
        let mut patch = crop_patch(&ds.images[0], (32, 32), 16).unwrap();
        patch.pixels.fill(190);
        let mut nucleus = Array2::from_elem((16, 16), false);
        for r in 7..10 {
            for c in 7..10 {
                nucleus[(r, c)] = true;
            }
        }
        AppliedPatch {
            image_index: 0,
            patch,
            new_instance_id: ds.next_free_id(0),
            new_class: "rare".into(),
            nucleus_mask: nucleus,
            erased_instance_id: erase,
        }
    }

    #[test]
    fn replace_swaps_the_old_id_for_one_new_id() {
        let mut ds = paste_target_dataset();
        let ap = applied_patch(&ds, Some(2));
        ds.apply_patch(&ap).unwrap();
        assert!(!ds.labelmaps[0].iter().any(|&id| id == 2));
        assert!(!ds.class_table.contains_key("img/2"));
        let new_count = ds.labelmaps[0].iter().filter(|&&id| id == 3).count();
        assert_eq!(new_count, 9);
        assert_eq!(ds.class_of(0, 3), Some("rare"));
        // Patch pixels landed in the image.
        assert_eq!(ds.images[0][(32, 32, 0)], 190);
        assert_eq!(ds.images[0][(10, 10, 0)], 80);
    }

    #[test]
    fn paste_adds_without_erasing() {
        let mut ds = paste_target_dataset();
        let before = ds.class_counts().unwrap();
        let ap = applied_patch(&ds, None);
        ds.apply_patch(&ap).unwrap();
        let after = ds.class_counts().unwrap();
        assert_eq!(after["rare"], before["rare"] + 1);
        assert_eq!(after["common"], before["common"]);
    }

    #[test]
    fn duplicate_new_id_is_rejected() {
        let mut ds = paste_target_dataset();
        let mut ap = applied_patch(&ds, None);
        ap.new_instance_id = 1;
        assert!(matches!(ds.apply_patch(&ap), Err(Error::Config(_))));
    }

    #[test]
    fn emit_roundtrips_and_no_ops_preserve_labels() {
        let dir = TempDir::new().unwrap();
        let ds = paste_target_dataset();
        let report = AugmentationReport::default();
        emit_augmented(&ds, &[], &report, dir.path()).unwrap();
        let reloaded = load_dataset(dir.path()).unwrap();
        assert_eq!(reloaded.labelmaps[0], ds.labelmaps[0]);
        assert_eq!(reloaded.images[0], ds.images[0]);
        assert_eq!(reloaded.class_table, ds.class_table);
        assert!(dir.path().join("report.json").is_file());
    }

    #[test]
    fn emit_is_byte_deterministic() {
        let ds = paste_target_dataset();
        let ap = applied_patch(&ds, Some(2));
        let report = AugmentationReport::default();
        let read_all = |root: &Path| {
            let mut blobs = Vec::new();
            for rel in ["images/img.png", "labels/img.png", "classes.json", "report.json"] {
                blobs.push(std::fs::read(root.join(rel)).unwrap());
            }
            blobs
        };
        let dir1 = TempDir::new().unwrap();
        let dir2 = TempDir::new().unwrap();
        emit_augmented(&ds, std::slice::from_ref(&ap), &report, dir1.path()).unwrap();
        emit_augmented(&ds, std::slice::from_ref(&ap), &report, dir2.path()).unwrap();
        assert_eq!(read_all(dir1.path()), read_all(dir2.path()));
    }

    #[test]
    fn recount_deltas_match_hand_built_mutation() {
        // 12 common + 4 rare instances; erase 10 commons, add 15 rares.
        let ds = single_pixel_dataset(40, &["common", "rare"], &[12, 4]);
        let mut after = ds.clone();
        for id in 1..=10u32 {
            after.labelmaps[0].mapv_inplace(|v| if v == id { 0 } else { v });
        }
        let base = after.next_free_id(0);
        for (i, id) in (base..base + 15).enumerate() {
            after.labelmaps[0][(39, i)] = id;
            after.class_table.insert(format!("img/{id}"), "rare".into());
        }
        let report = distribution_report(&ds, &after).unwrap();
        assert_eq!(report.delta("rare"), 15);
        assert_eq!(report.delta("common"), -10);
        let identical = distribution_report(&ds, &ds).unwrap();
        assert_eq!(identical.delta("rare"), 0);
        assert_eq!(identical.delta("common"), 0);
    }

    #[test]
    fn report_verify_accepts_consistent_and_rejects_tampered() {
        let mut report = AugmentationReport {
            class_counts_before: [("common".into(), 10), ("rare".into(), 2)].into(),
            class_counts_after: [("common".into(), 7), ("rare".into(), 7)].into(),
            rare_classes: vec!["rare".into()],
            ops_attempted: 6,
            ops_succeeded: 5,
            ops_failed: 1,
            replace_count: 3,
            paste_count: 2,
            ops: Vec::new(),
        };
        report.verify().unwrap();
        report.paste_count = 3;
        assert!(matches!(
            report.verify(),
            Err(Error::ReportMismatch(_))
        ));
        report.paste_count = 2;
        report.class_counts_after.insert("rare".into(), 8);
        assert!(matches!(report.verify(), Err(Error::ReportMismatch(_))));
    }

    #[test]
    fn class_name_mismatch_fails_comparison() {
        let a = single_pixel_dataset(20, &["x"], &[3]);
        let b = single_pixel_dataset(20, &["y"], &[3]);
        assert!(matches!(
            distribution_report(&a, &b),
            Err(Error::ReportMismatch(_))
        ));
    }
}
