//! Denoising-diffusion core: noise schedule, forward process, training loop,
//! deterministic DDIM sampling, and measurement-guided inpainting.
//!
//! Images live in `(3, H, W)` tensors scaled to [−1, 1]. The reverse process
//! is the deterministic DDIM variant; inpainting conditions each step with a
//! gradient of the masked measurement residual (taken through the posterior
//! mean) and, optionally, a hard projection that re-noises observed pixels to
//! the current level so the final output matches the measurement bit-exactly.

mod unet;

pub use unet::{time_embedding, Adam, SmallUnet, Tensor, BASE_CHANNELS, TIME_EMBED_DIM};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbRaster};
use crate::rng::child_rng;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_DDIM_STEPS: usize = 250;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 1.0;

/// Map 8-bit pixels to [−1, 1].
pub fn raster_to_tensor(raster: &RgbRaster) -> Tensor {
    let (h, w, _) = raster.dim();
    Array3::from_shape_fn((3, h, w), |(c, r, cc)| {
        raster[(r, cc, c)] as f64 / 127.5 - 1.0
    })
}

/// Map [−1, 1] back to 8-bit pixels (clamped, rounded).
pub fn tensor_to_raster(t: &Tensor) -> RgbRaster {
    let (_, h, w) = t.dim();
    Array3::from_shape_fn((h, w, 3), |(r, cc, c)| {
        let v = t[(c, r, cc)].clamp(-1.0, 1.0);
        ((v + 1.0) * 127.5).round() as u8
    })
}

/// Variance schedule and the per-step quantities derived from it. Arrays are
/// indexed by `t − 1` for t ∈ 1..=steps; [`Self::alpha_bar`] extends the
/// cumulative product with ᾱ₀ = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Reverse-process posterior variances β̃_t = (1−ᾱ_{t−1})/(1−ᾱ_t)·β_t.
    pub posterior_betas: Vec<f64>,
}

impl DiffusionSchedule {
    /// Cumulative signal fraction ᾱ_t, with ᾱ₀ = 1 so that level 0 means
    /// "no noise".
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linearly interpolated β schedule with the derived α products.
///
/// # Errors
///
/// [`Error::Config`] when `steps < 1` or the β range is not
/// `0 < beta_start ≤ beta_end < 1`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    let posterior_betas: Vec<f64> = (0..steps)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
            (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
        })
        .collect();
    Ok(DiffusionSchedule {
        steps,
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
        posterior_betas,
    })
}

/// A noise-prediction function ε(x_t, t) with a vector-Jacobian product for
/// guidance gradients. Implementations must be deterministic so sampling is
/// reproducible.
pub trait NoisePredictor: Send + Sync {
    /// Predicted noise, same shape as the input.
    fn predict(&self, x_t: &Tensor, t: usize) -> Tensor;
    /// `(∂ predict/∂ x_t)ᵀ · g` evaluated at `(x_t, t)`.
    fn vjp(&self, x_t: &Tensor, t: usize, g: &Tensor) -> Tensor;
    fn param_count(&self) -> usize;
}

impl NoisePredictor for SmallUnet {
    fn predict(&self, x_t: &Tensor, t: usize) -> Tensor {
        self.forward(x_t, t).0
    }

    fn vjp(&self, x_t: &Tensor, t: usize, g: &Tensor) -> Tensor {
        let (_, cache) = self.forward(x_t, t);
        self.backward(&cache, g).1
    }

    fn param_count(&self) -> usize {
        SmallUnet::param_count(self)
    }
}

/// Predicts zero noise everywhere. The Jacobian is zero, so the vjp is too.
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize) -> Tensor {
        Array3::zeros(x_t.dim())
    }

    fn vjp(&self, x_t: &Tensor, _t: usize, _g: &Tensor) -> Tensor {
        Array3::zeros(x_t.dim())
    }

    fn param_count(&self) -> usize {
        0
    }
}

/// Returns a fixed noise field regardless of input — an oracle for tests
/// that know the true ε. Constant in x, so the vjp is zero.
pub struct OraclePredictor {
    pub eps: Tensor,
}

impl NoisePredictor for OraclePredictor {
    fn predict(&self, _x_t: &Tensor, _t: usize) -> Tensor {
        self.eps.clone()
    }

    fn vjp(&self, x_t: &Tensor, _t: usize, _g: &Tensor) -> Tensor {
        Array3::zeros(x_t.dim())
    }

    fn param_count(&self) -> usize {
        self.eps.len()
    }
}

/// A dense random linear map over the flattened tensor, with the exact
/// transpose as its vjp. Differentiable by construction, which makes it the
/// reference predictor for finite-difference checks of guidance gradients.
pub struct LinearMixPredictor {
    matrix: Array2<f64>,
    shape: (usize, usize, usize),
}

impl LinearMixPredictor {
    /// `scale` controls entry magnitude; keep it small (≈0.1/√n) so the map
    /// is well-conditioned on [−1, 1] inputs.
    pub fn new(shape: (usize, usize, usize), seed: u64, scale: f64) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let mut rng = child_rng(seed, "linear-mix", 0);
        let matrix = Array2::from_shape_fn((n, n), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        LinearMixPredictor { matrix, shape }
    }
}

impl NoisePredictor for LinearMixPredictor {
    fn predict(&self, x_t: &Tensor, _t: usize) -> Tensor {
        let flat = ndarray::Array1::from_iter(x_t.iter().copied());
        let out = self.matrix.dot(&flat);
        Array3::from_shape_vec(self.shape, out.to_vec()).expect("shape fixed at build")
    }

    fn vjp(&self, _x_t: &Tensor, _t: usize, g: &Tensor) -> Tensor {
        let flat = ndarray::Array1::from_iter(g.iter().copied());
        let out = self.matrix.t().dot(&flat);
        Array3::from_shape_vec(self.shape, out.to_vec()).expect("shape fixed at build")
    }

    fn param_count(&self) -> usize {
        self.matrix.len()
    }
}

/// I.i.d. standard-normal tensor.
pub fn sample_noise(shape: (usize, usize, usize), rng: &mut impl Rng) -> Tensor {
    Array3::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Closed-form noising: x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε.
///
/// # Errors
///
/// [`Error::Numeric`] for t outside 1..=steps; [`Error::DimensionMismatch`]
/// when x₀ and ε disagree in size.
pub fn forward_sample(
    sch: &DiffusionSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    if t < 1 || t > sch.steps {
        return Err(Error::Numeric(format!(
            "timestep {t} outside 1..={}",
            sch.steps
        )));
    }
    if x0.dim() != eps.dim() {
        return Err(Error::DimensionMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let ab = sch.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0.mapv(|v| v * signal) + eps.mapv(|v| v * noise))
}

/// Denoising objective: mean over the batch of per-sample ‖ε − ε̂‖², with t
/// and ε drawn fresh per sample.
///
/// # Errors
///
/// [`Error::InsufficientData`] for an empty batch.
pub fn training_loss(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    batch: &[Tensor],
    rng: &mut impl Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty training batch".into()));
    }
    let mut total = 0.0;
    for x0 in batch {
        let t = rng.random_range(1..=sch.steps);
        let eps = sample_noise(x0.dim(), rng);
        let x_t = forward_sample(sch, x0, t, &eps)?;
        let eps_hat = model.predict(&x_t, t);
        total += (&eps - &eps_hat).iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Posterior-mean estimate of the clean image from a known noise estimate:
/// x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t.
///
/// # Errors
///
/// [`Error::Numeric`] when √ᾱ_t underflows (division would explode) or t is
/// out of range.
pub fn tweedie_from_eps(
    sch: &DiffusionSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    if t > sch.steps {
        return Err(Error::Numeric(format!(
            "timestep {t} outside 0..={}",
            sch.steps
        )));
    }
    let ab = sch.alpha_bar(t);
    let signal = ab.sqrt();
    if signal < 1e-12 {
        return Err(Error::Numeric(format!(
            "alpha-bar at t={t} is numerically zero; posterior mean undefined"
        )));
    }
    let noise = (1.0 - ab).sqrt();
    Ok((x_t - &eps_hat.mapv(|v| v * noise)).mapv(|v| v / signal))
}

/// Posterior-mean estimate using the model's own noise prediction.
pub fn tweedie_x0(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
) -> Result<Tensor> {
    if t < 1 || t > sch.steps {
        return Err(Error::Numeric(format!(
            "timestep {t} outside 1..={}",
            sch.steps
        )));
    }
    let eps_hat = model.predict(x_t, t);
    tweedie_from_eps(sch, x_t, t, &eps_hat)
}

/// One deterministic reverse step: x' = √ᾱ_{t_prev}·x̂₀ + √(1−ᾱ_{t_prev})·ε̂,
/// reusing the noise estimate from level t.
///
/// # Errors
///
/// [`Error::Numeric`] unless 1 ≤ t ≤ steps and t_prev < t.
pub fn ddim_step(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    if t < 1 || t > sch.steps {
        return Err(Error::Numeric(format!(
            "timestep {t} outside 1..={}",
            sch.steps
        )));
    }
    if t_prev >= t {
        return Err(Error::Numeric(format!(
            "reverse step needs t_prev < t, got {t_prev} >= {t}"
        )));
    }
    let eps_hat = model.predict(x_t, t);
    let x0_hat = tweedie_from_eps(sch, x_t, t, &eps_hat)?;
    Ok(ddim_combine(sch, &x0_hat, &eps_hat, t_prev))
}

fn ddim_combine(
    sch: &DiffusionSchedule,
    x0_hat: &Tensor,
    eps_hat: &Tensor,
    t_prev: usize,
) -> Tensor {
    let ab_prev = sch.alpha_bar(t_prev);
    let signal = ab_prev.sqrt();
    let noise = (1.0 - ab_prev).sqrt();
    x0_hat.mapv(|v| v * signal) + eps_hat.mapv(|v| v * noise)
}

/// A partially observed image: `y` holds pixel values wherever `mask` is
/// true; everything else is to be synthesized.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub y: Tensor,
    pub mask: Mask,
}

impl Measurement {
    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Gradient of the masked measurement residual ‖mask ⊙ (y − x̂₀(x_t))‖²
/// with respect to x_t, taken through the posterior mean:
/// ∇ = (1/√ᾱ_t)·(g − √(1−ᾱ_t)·Jᵀg) with g = −2·mask ⊙ (y − x̂₀) and J the
/// noise-predictor Jacobian.
pub fn guidance_gradient(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    meas: &Measurement,
) -> Result<Tensor> {
    let x0_hat = tweedie_x0(sch, model, x_t, t)?;
    guidance_gradient_from(sch, model, x_t, t, meas, &x0_hat)
}

fn guidance_gradient_from(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    meas: &Measurement,
    x0_hat: &Tensor,
) -> Result<Tensor> {
    let (c, h, w) = x_t.dim();
    if meas.y.dim() != x_t.dim() || meas.mask.dim() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: x_t.len(),
            got: meas.y.len(),
        });
    }
    let mut g = Array3::zeros((c, h, w));
    for ch in 0..c {
        for r in 0..h {
            for cc in 0..w {
                if meas.mask[(r, cc)] {
                    g[(ch, r, cc)] = -2.0 * (meas.y[(ch, r, cc)] - x0_hat[(ch, r, cc)]);
                }
            }
        }
    }
    let ab = sch.alpha_bar(t);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    let jt_g = model.vjp(x_t, t, &g);
    Ok((g - jt_g.mapv(|v| v * noise)).mapv(|v| v / signal))
}

/// Evenly spaced reverse-time ladder ending at 0: the step count picks how
/// many noise levels the reverse pass visits.
fn time_ladder(steps: usize, n_steps: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = (1..=n_steps)
        .map(|i| ((steps as f64) * i as f64 / n_steps as f64).round() as usize)
        .map(|t| t.max(1))
        .collect();
    ts.dedup();
    ts
}

/// Masked-image synthesis. Starts from pure noise and runs `n_steps`
/// deterministic reverse steps; each step subtracts `guidance_scale` times
/// the measurement-residual gradient, and `hard_consistency` additionally
/// overwrites observed pixels with the measurement re-noised to the
/// destination level. With hard consistency on, observed pixels of the
/// result equal `y` bit-exactly.
///
/// # Errors
///
/// [`Error::Config`] for a bad step count or mismatched shapes;
/// [`Error::SamplingAborted`] if the trajectory leaves finite range.
pub fn guided_inpaint(
    sch: &DiffusionSchedule,
    model: &dyn NoisePredictor,
    meas: &Measurement,
    n_steps: usize,
    guidance_scale: f64,
    hard_consistency: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if n_steps < 1 || n_steps > sch.steps {
        return Err(Error::Config(format!(
            "ddim step count {n_steps} outside 1..={}",
            sch.steps
        )));
    }
    let (c, h, w) = meas.y.dim();
    if meas.mask.dim() != (h, w) {
        return Err(Error::DimensionMismatch {
            expected: h * w,
            got: meas.mask.len(),
        });
    }
    let ladder = time_ladder(sch.steps, n_steps);
    let mut x = sample_noise((c, h, w), rng);
    for (step_idx, window) in (0..ladder.len()).rev().enumerate() {
        let t = ladder[window];
        let t_prev = if window == 0 { 0 } else { ladder[window - 1] };

        let eps_hat = model.predict(&x, t);
        let x0_hat = tweedie_from_eps(sch, &x, t, &eps_hat)?;
        let mut x_next = ddim_combine(sch, &x0_hat, &eps_hat, t_prev);
        if guidance_scale != 0.0 {
            let grad = guidance_gradient_from(sch, model, &x, t, meas, &x0_hat)?;
            x_next -= &grad.mapv(|v| v * guidance_scale);
        }
        if hard_consistency {
            if t_prev == 0 {
                for ch in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            if meas.mask[(r, cc)] {
                                x_next[(ch, r, cc)] = meas.y[(ch, r, cc)];
                            }
                        }
                    }
                }
            } else {
                let eps_proj = sample_noise((c, h, w), rng);
                let noised = forward_sample(sch, &meas.y, t_prev, &eps_proj)?;
                for ch in 0..c {
                    for r in 0..h {
                        for cc in 0..w {
                            if meas.mask[(r, cc)] {
                                x_next[(ch, r, cc)] = noised[(ch, r, cc)];
                            }
                        }
                    }
                }
            }
        }
        if !x_next.iter().all(|v| v.is_finite()) {
            return Err(Error::SamplingAborted {
                step: step_idx,
                t,
                msg: "non-finite values in trajectory".into(),
            });
        }
        x = x_next;
    }
    Ok(x)
}

/// Minimize the denoising objective with Adam. Each step noises a fresh
/// mini-batch (drawn sequentially from `rng`, evaluated in parallel with an
/// order-stable reduction) and applies one update. Returns the per-step loss
/// curve.
///
/// # Errors
///
/// [`Error::InsufficientData`] for an empty corpus, [`Error::Config`] for a
/// zero batch size, [`Error::TrainingDiverged`] if the loss exceeds 10× its
/// initial value or leaves finite range.
pub fn train(
    model: &mut SmallUnet,
    sch: &DiffusionSchedule,
    textures: &[Tensor],
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if textures.is_empty() {
        return Err(Error::InsufficientData("no training textures".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut curve = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(curve);
    }
    let mut opt = Adam::new(lr, model.param_count());
    let mut initial: Option<f64> = None;
    for step in 0..steps {
        // Draw the whole batch up front so parallel evaluation cannot
        // perturb the rng stream.
        let drawn: Vec<(usize, usize, Tensor)> = (0..batch_size)
            .map(|_| {
                let which = rng.random_range(0..textures.len());
                let t = rng.random_range(1..=sch.steps);
                let eps = sample_noise(textures[which].dim(), rng);
                (which, t, eps)
            })
            .collect();
        let per_sample: Vec<Result<(f64, Vec<f64>)>> = drawn
            .par_iter()
            .map(|(which, t, eps)| {
                let x_t = forward_sample(sch, &textures[*which], *t, eps)?;
                let (eps_hat, cache) = model.forward(&x_t, *t);
                let residual = &eps_hat - eps;
                let loss = residual.iter().map(|v| v * v).sum::<f64>();
                let gout = residual.mapv(|v| 2.0 * v);
                let (gnet, _) = model.backward(&cache, &gout);
                Ok((loss, gnet.flatten_params()))
            })
            .collect();

        let mut loss_sum = 0.0;
        let mut grad = vec![0.0; model.param_count()];
        for sample in per_sample {
            let (loss, g) = sample?;
            loss_sum += loss;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
        let inv_b = 1.0 / batch_size as f64;
        let loss = loss_sum * inv_b;
        for g in grad.iter_mut() {
            *g *= inv_b;
        }

        let initial_loss = *initial.get_or_insert(loss);
        if !loss.is_finite() || loss > 10.0 * initial_loss {
            return Err(Error::TrainingDiverged {
                step,
                loss,
                initial: initial_loss,
            });
        }

        let mut params = model.flatten_params();
        opt.update(&mut params, &grad);
        model.load_params(&params)?;
        curve.push(loss);
    }
    Ok(curve)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RMXD";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    base_channels: usize,
    time_embed_dim: usize,
    param_count: usize,
}

/// Serialize model parameters plus the schedule configuration into a small
/// versioned container: magic, version, JSON header, little-endian f64 blob.
pub fn save_checkpoint(path: &Path, model: &SmallUnet, sch: &DiffusionSchedule) -> Result<()> {
    let header = CheckpointHeader {
        steps: sch.steps,
        beta_start: sch.beta_start,
        beta_end: sch.beta_end,
        base_channels: BASE_CHANNELS,
        time_embed_dim: TIME_EMBED_DIM,
        param_count: model.param_count(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("header encode failed: {e}"),
    })?;
    let params = model.flatten_params();
    let mut bytes =
        Vec::with_capacity(4 + 4 + 8 + header_json.len() + params.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint written by [`save_checkpoint`].
///
/// # Errors
///
/// [`Error::Checkpoint`] for wrong magic, unsupported version, malformed
/// header, or a truncated/mismatched parameter blob.
pub fn load_checkpoint(path: &Path) -> Result<(SmallUnet, DiffusionSchedule)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 16 {
        return Err(fail("file too short for a checkpoint".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail("not a model checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(fail("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| fail(format!("header decode failed: {e}")))?;
    if header.base_channels != BASE_CHANNELS || header.time_embed_dim != TIME_EMBED_DIM {
        return Err(fail(format!(
            "architecture mismatch: checkpoint has {} channels / {}-d embedding",
            header.base_channels, header.time_embed_dim
        )));
    }
    let blob = &bytes[16 + header_len..];
    if blob.len() != header.param_count * 8 {
        return Err(fail(format!(
            "parameter blob holds {} bytes, expected {}",
            blob.len(),
            header.param_count * 8
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = SmallUnet::new(0);
    if params.len() != model.param_count() {
        return Err(fail(format!(
            "checkpoint has {} parameters, this build expects {}",
            params.len(),
            model.param_count()
        )));
    }
    model.load_params(&params)?;
    let sch = build_schedule(header.steps, header.beta_start, header.beta_end)?;
    Ok((model, sch))
}
