//! Patch feature vectors.
//!
//! Each patch turns into a 772-dimensional vector: a 768-d embedding from a
//! pluggable extractor plus 4 GLCM texture statistics. The 772-d vectors
//! are standardized and reduced with PCA before any context modeling.

use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::raster::luma;
use crate::rng::child_rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

pub const EMBEDDING_DIM: usize = 768;
pub const GLCM_DIM: usize = 4;
pub const RAW_FEATURE_DIM: usize = EMBEDDING_DIM + GLCM_DIM;
pub const DEFAULT_PCA_DIM: usize = 16;

const GLCM_LEVELS: usize = 16;

/// Four co-occurrence statistics of the patch at offset (0, 1):
/// (contrast, homogeneity, energy, correlation). Gray levels are the
/// Rec. 601 luma quantized to 16 bins; the matrix is symmetrized and
/// normalized. Correlation of a zero-variance patch is 1 by convention.
pub fn glcm_features(p: &Patch) -> [f64; 4] {
    let (h, w, _) = p.pixels.dim();
    let mut levels = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            let y = luma(p.pixels[(r, c, 0)], p.pixels[(r, c, 1)], p.pixels[(r, c, 2)]);
            levels[r * w + c] = (y.round() as usize / 16).min(GLCM_LEVELS - 1);
        }
    }
    let mut m = [[0.0f64; GLCM_LEVELS]; GLCM_LEVELS];
    let mut total = 0.0f64;
    for r in 0..h {
        for c in 0..w - 1 {
            let (a, b) = (levels[r * w + c], levels[r * w + c + 1]);
            m[a][b] += 1.0;
            m[b][a] += 1.0;
            total += 2.0;
        }
    }
    if total == 0.0 {
        // 1x1 patch: single level, no pairs.
        return [0.0, 1.0, 1.0, 1.0];
    }
    for row in m.iter_mut() {
        for v in row.iter_mut() {
            *v /= total;
        }
    }

    let mut contrast = 0.0;
    let mut homogeneity = 0.0;
    let mut asm = 0.0;
    let mut mean_i = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &pij) in row.iter().enumerate() {
            let d = i as f64 - j as f64;
            contrast += pij * d * d;
            homogeneity += pij / (1.0 + d * d);
            asm += pij * pij;
            mean_i += pij * i as f64;
        }
    }
    // symmetric matrix: row and column marginals coincide
    let mut var_i = 0.0;
    for (i, row) in m.iter().enumerate() {
        let di = i as f64 - mean_i;
        var_i += row.iter().sum::<f64>() * di * di;
    }
    let correlation = if var_i <= 0.0 {
        1.0
    } else {
        let mut cov = 0.0;
        for (i, row) in m.iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                cov += pij * (i as f64 - mean_i) * (j as f64 - mean_i);
            }
        }
        cov / var_i
    };
    [contrast, homogeneity, asm.sqrt(), correlation]
}

/// Produces the 768-d patch embedding. Implementations must be
/// deterministic for identical pixels.
pub trait EmbeddingProvider: Send + Sync {
    /// `key` identifies the patch as `image/row/col`; file-backed providers
    /// look vectors up by it, computed providers may ignore it.
    fn embed(&self, patch: &Patch, key: &str) -> Result<Vec<f64>>;
}

/// Built-in extractor: a fixed seeded random projection of 8x8-pooled
/// pixel statistics. A stand-in for a pretrained backbone; swap in real
/// vectors through [`SidecarEmbeddings`] when available.
pub struct PooledProjectionEmbedding {
    projection: DMatrix<f64>,
}

const POOL_GRID: usize = 8;
// mean and std per pooled cell per channel
const POOL_STATS: usize = POOL_GRID * POOL_GRID * 3 * 2;

impl PooledProjectionEmbedding {
    pub fn new(seed: u64) -> Self {
        let mut rng = child_rng(seed, "embedding-projection", 0);
        let scale = 1.0 / (POOL_STATS as f64).sqrt();
        let projection = DMatrix::from_fn(EMBEDDING_DIM, POOL_STATS, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        Self { projection }
    }

    fn pooled_stats(patch: &Patch) -> Vec<f64> {
        let n = patch.size();
        let mut stats = Vec::with_capacity(POOL_STATS);
        for gr in 0..POOL_GRID {
            for gc in 0..POOL_GRID {
                let r0 = gr * n / POOL_GRID;
                let r1 = ((gr + 1) * n / POOL_GRID).max(r0 + 1).min(n);
                let c0 = gc * n / POOL_GRID;
                let c1 = ((gc + 1) * n / POOL_GRID).max(c0 + 1).min(n);
                for ch in 0..3 {
                    let mut sum = 0.0f64;
                    let mut sq = 0.0f64;
                    let mut cnt = 0.0f64;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            let v = f64::from(patch.pixels[(r, c, ch)]) / 255.0;
                            sum += v;
                            sq += v * v;
                            cnt += 1.0;
                        }
                    }
                    let mean = sum / cnt;
                    let var = (sq / cnt - mean * mean).max(0.0);
                    stats.push(mean);
                    stats.push(var.sqrt());
                }
            }
        }
        stats
    }
}

impl Default for PooledProjectionEmbedding {
    fn default() -> Self {
        Self::new(0x5eed)
    }
}

impl EmbeddingProvider for PooledProjectionEmbedding {
    fn embed(&self, patch: &Patch, _key: &str) -> Result<Vec<f64>> {
        let stats = nalgebra::DVector::from_vec(Self::pooled_stats(patch));
        Ok((&self.projection * stats).iter().copied().collect())
    }
}

/// File-backed embeddings: one line per patch,
/// `<image>/<row>/<col> v0 v1 ... v767`, whitespace separated.
/// Lines starting with `#` are skipped.
pub struct SidecarEmbeddings {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl SidecarEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = BTreeMap::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts
                .next()
                .ok_or_else(|| Error::schema(path, format!("line {}: empty record", lineno + 1)))?
                .to_string();
            let values: Vec<f64> = parts
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::schema(path, format!("line {}: {e}", lineno + 1)))?;
            if values.len() != EMBEDDING_DIM {
                return Err(Error::schema(
                    path,
                    format!(
                        "line {}: key {key} has {} values, expected {EMBEDDING_DIM}",
                        lineno + 1,
                        values.len()
                    ),
                ));
            }
            vectors.insert(key, values);
        }
        Ok(Self { vectors })
    }

    pub fn from_map(vectors: BTreeMap<String, Vec<f64>>) -> Self {
        Self { vectors }
    }
}

impl EmbeddingProvider for SidecarEmbeddings {
    fn embed(&self, _patch: &Patch, key: &str) -> Result<Vec<f64>> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(key.to_string()))
    }
}

/// Full raw feature vector for one patch: embedding followed by the 4 GLCM
/// statistics.
pub fn raw_features(
    patch: &Patch,
    key: &str,
    extractor: &dyn EmbeddingProvider,
) -> Result<Vec<f64>> {
    let mut v = extractor.embed(patch, key)?;
    if v.len() != EMBEDDING_DIM {
        return Err(Error::DimensionMismatch {
            expected: EMBEDDING_DIM,
            got: v.len(),
        });
    }
    v.extend_from_slice(&glcm_features(patch));
    Ok(v)
}

/// Per-dimension affine scaler (zero mean, unit variance on the fit set).
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fit on a reference pool. Dimensions with (near-)zero spread pass
    /// through unscaled.
    pub fn fit(pool: &[Vec<f64>]) -> Result<Self> {
        let n = pool.len();
        if n == 0 {
            return Err(Error::InsufficientData("empty standardizer pool".into()));
        }
        let d = pool[0].len();
        let mut mean = vec![0.0; d];
        for v in pool {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for v in pool {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let denom = (n as f64 - 1.0).max(1.0);
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / denom).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

/// PCA projector: orthonormal rows spanning the top principal directions.
#[derive(Debug, Clone)]
pub struct PcaProjector {
    pub mean: Vec<f64>,
    /// `p` orthonormal rows of length `input_dim`.
    pub basis: DMatrix<f64>,
    /// Explained variance per row, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaProjector {
    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Fit PCA on the sample set. When fewer than `p` significant directions
/// exist, the basis is completed with orthonormal zero-variance directions
/// and a warning is logged.
pub fn fit_pca(samples: &[Vec<f64>], p: usize) -> Result<PcaProjector> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "PCA needs at least 2 samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if p > d {
        return Err(Error::DimensionMismatch { expected: d, got: p });
    }
    let mut mean = vec![0.0; d];
    for v in samples {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
    let total_var = centered.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0);
    if total_var < 1e-18 {
        return Err(Error::DegenerateVariance(
            "all PCA samples identical".into(),
        ));
    }

    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numeric("SVD did not produce right singular vectors".into()))?;
    // nalgebra sorts singular values descending
    let mut rows: Vec<(f64, Vec<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let var = s * s / (n as f64 - 1.0);
            (var, v_t.row(i).iter().copied().collect())
        })
        .collect();
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    rows.truncate(p);

    if rows.len() < p {
        log::warn!(
            "PCA: only {} directions available from {} samples; padding to {} with zero-variance directions",
            rows.len(),
            n,
            p
        );
        let mut pad_rng = child_rng(0x9ad, "pca-padding", d as u64);
        while rows.len() < p {
            // Gram-Schmidt a random vector against the current basis.
            let mut v: Vec<f64> = (0..d)
                .map(|_| StandardNormal.sample(&mut pad_rng))
                .collect();
            for (_, row) in &rows {
                let dot: f64 = v.iter().zip(row).map(|(a, b)| a * b).sum();
                for (x, r) in v.iter_mut().zip(row) {
                    *x -= dot * r;
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            for x in &mut v {
                *x /= norm;
            }
            rows.push((0.0, v));
        }
    }

    let explained_variance: Vec<f64> = rows.iter().map(|(v, _)| *v).collect();
    let basis = DMatrix::from_fn(p, d, |i, j| rows[i].1[j]);
    Ok(PcaProjector {
        mean,
        basis,
        explained_variance,
    })
}

/// `basis * (v - mean)`.
pub fn project(pr: &PcaProjector, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != pr.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: pr.input_dim(),
            got: v.len(),
        });
    }
    let centered = nalgebra::DVector::from_fn(v.len(), |i, _| v[i] - pr.mean[i]);
    Ok((&pr.basis * centered).iter().copied().collect())
}
