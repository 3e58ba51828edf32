//! A small fully-convolutional U-Net noise predictor with hand-written
//! backpropagation.
//!
//! One down/up level, residual blocks with additive timestep conditioning,
//! ~100k parameters in `f64`. Convolutions run as im2col + matmul; every
//! layer's backward pass returns gradients in a container of the same shape
//! as the parameters, so optimizer and checkpoint code can treat the whole
//! network as one flat vector. Inputs are `(3, H, W)` tensors scaled to
//! [−1, 1]; `H` and `W` must be even (one 2× pooling stage).

use crate::error::{Error, Result};
use crate::rng::child_rng;
use ndarray::{concatenate, Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, StandardNormal};

/// `(channels, height, width)` activation or image tensor.
pub type Tensor = Array3<f64>;

pub const TIME_EMBED_DIM: usize = 32;
pub const BASE_CHANNELS: usize = 24;
const KERNEL: usize = 3;

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// d silu / dx = σ(x) · (1 + x · (1 − σ(x))).
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

fn silu_tensor(x: &Tensor) -> Tensor {
    x.mapv(silu)
}

fn silu_vec(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(silu)
}

/// Sinusoidal timestep embedding: half sines, half cosines over a geometric
/// frequency ladder from 1 down to 1/10000.
pub fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / (half as f64 - 1.0));
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// 3×3 same-padding convolution. Weights are stored pre-flattened as
/// `(out_c, in_c·9)` for the im2col matmul.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_c: usize,
    pub out_c: usize,
}

impl Conv2d {
    fn new(in_c: usize, out_c: usize, rng: &mut impl rand::Rng) -> Self {
        // Kaiming-style init for SiLU-ish activations.
        let std = (2.0 / (in_c * KERNEL * KERNEL) as f64).sqrt();
        let w = Array2::from_shape_fn((out_c, in_c * KERNEL * KERNEL), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Conv2d {
            w,
            b: Array1::zeros(out_c),
            in_c,
            out_c,
        }
    }

    fn zeroed(in_c: usize, out_c: usize) -> Self {
        Conv2d {
            w: Array2::zeros((out_c, in_c * KERNEL * KERNEL)),
            b: Array1::zeros(out_c),
            in_c,
            out_c,
        }
    }

    fn zeros_like(&self) -> Self {
        Conv2d::zeroed(self.in_c, self.out_c)
    }

    /// Returns the output and the im2col matrix (cached for backward).
    fn forward(&self, x: &Tensor) -> (Tensor, Array2<f64>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_c);
        let col = im2col(x);
        let mut out_mat = self.w.dot(&col);
        for (mut row, &bias) in out_mat.outer_iter_mut().zip(self.b.iter()) {
            row += bias;
        }
        let out = Array3::from_shape_vec(
            (self.out_c, h, w),
            out_mat.into_raw_vec_and_offset().0,
        )
        .expect("matmul output is dense");
        (out, col)
    }

    /// Gradients w.r.t. parameters (same container shape) and input.
    fn backward(&self, col: &Array2<f64>, gout: &Tensor) -> (Conv2d, Tensor) {
        let (oc, h, w) = gout.dim();
        debug_assert_eq!(oc, self.out_c);
        let gout_mat = Array2::from_shape_vec(
            (oc, h * w),
            gout.iter().copied().collect(),
        )
        .expect("gout is dense");
        let gw = gout_mat.dot(&col.t());
        let gb = gout_mat.sum_axis(Axis(1));
        let gcol = self.w.t().dot(&gout_mat);
        let gin = col2im(&gcol, self.in_c, h, w);
        (
            Conv2d {
                w: gw,
                b: gb,
                in_c: self.in_c,
                out_c: self.out_c,
            },
            gin,
        )
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    fn load_from(&mut self, flat: &[f64], cursor: &mut usize) {
        for v in self.w.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
        for v in self.b.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
    }
}

/// Unfold 3×3 neighborhoods (zero padding 1) into `(in_c·9, H·W)`.
fn im2col(x: &Tensor) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = Array2::zeros((c * KERNEL * KERNEL, h * w));
    for ci in 0..c {
        for kr in 0..KERNEL {
            for kc in 0..KERNEL {
                let row = ci * KERNEL * KERNEL + kr * KERNEL + kc;
                for r in 0..h {
                    let ir = r as i64 + kr as i64 - 1;
                    if ir < 0 || ir as usize >= h {
                        continue;
                    }
                    for cc in 0..w {
                        let ic = cc as i64 + kc as i64 - 1;
                        if ic < 0 || ic as usize >= w {
                            continue;
                        }
                        col[(row, r * w + cc)] = x[(ci, ir as usize, ic as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the image.
fn col2im(gcol: &Array2<f64>, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        for kr in 0..KERNEL {
            for kc in 0..KERNEL {
                let row = ci * KERNEL * KERNEL + kr * KERNEL + kc;
                for r in 0..h {
                    let ir = r as i64 + kr as i64 - 1;
                    if ir < 0 || ir as usize >= h {
                        continue;
                    }
                    for cc in 0..w {
                        let ic = cc as i64 + kc as i64 - 1;
                        if ic < 0 || ic as usize >= w {
                            continue;
                        }
                        out[(ci, ir as usize, ic as usize)] += gcol[(row, r * w + cc)];
                    }
                }
            }
        }
    }
    out
}

fn avgpool2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dimensions");
    Array3::from_shape_fn((c, h / 2, w / 2), |(ci, r, cc)| {
        (x[(ci, 2 * r, 2 * cc)]
            + x[(ci, 2 * r, 2 * cc + 1)]
            + x[(ci, 2 * r + 1, 2 * cc)]
            + x[(ci, 2 * r + 1, 2 * cc + 1)])
            / 4.0
    })
}

fn avgpool2_backward(gout: &Tensor) -> Tensor {
    let (c, h2, w2) = gout.dim();
    Array3::from_shape_fn((c, h2 * 2, w2 * 2), |(ci, r, cc)| {
        gout[(ci, r / 2, cc / 2)] / 4.0
    })
}

fn upsample2(x: &Tensor) -> Tensor {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, r, cc)| x[(ci, r / 2, cc / 2)])
}

fn upsample2_backward(gout: &Tensor) -> Tensor {
    let (c, h2, w2) = gout.dim();
    Array3::from_shape_fn((c, h2 / 2, w2 / 2), |(ci, r, cc)| {
        gout[(ci, 2 * r, 2 * cc)]
            + gout[(ci, 2 * r, 2 * cc + 1)]
            + gout[(ci, 2 * r + 1, 2 * cc)]
            + gout[(ci, 2 * r + 1, 2 * cc + 1)]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn new(in_d: usize, out_d: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (1.0 / in_d as f64).sqrt();
        let w = Array2::from_shape_fn((out_d, in_d), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Linear {
            w,
            b: Array1::zeros(out_d),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.dim()),
            b: Array1::zeros(self.b.len()),
        }
    }

    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    fn backward(&self, x: &Array1<f64>, gout: &Array1<f64>) -> (Linear, Array1<f64>) {
        let gw = gout
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        let gin = self.w.t().dot(gout);
        (
            Linear {
                w: gw,
                b: gout.clone(),
            },
            gin,
        )
    }

    fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend(self.w.iter());
        out.extend(self.b.iter());
    }

    fn load_from(&mut self, flat: &[f64], cursor: &mut usize) {
        for v in self.w.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
        for v in self.b.iter_mut() {
            *v = flat[*cursor];
            *cursor += 1;
        }
    }
}

/// conv → +t-bias → SiLU → conv, with an identity skip.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub t_proj: Linear,
}

pub(crate) struct ResCache {
    col1: Array2<f64>,
    /// Pre-activation after the timestep bias.
    h2: Tensor,
    col2: Array2<f64>,
}

impl ResBlock {
    fn new(channels: usize, time_dim: usize, rng: &mut impl rand::Rng) -> Self {
        ResBlock {
            conv1: Conv2d::new(channels, channels, rng),
            conv2: Conv2d::new(channels, channels, rng),
            t_proj: Linear::new(time_dim, channels, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        ResBlock {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            t_proj: self.t_proj.zeros_like(),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Array1<f64>) -> (Tensor, ResCache) {
        let (h1, col1) = self.conv1.forward(x);
        let tb = self.t_proj.forward(temb);
        let mut h2 = h1;
        for (mut channel, &bias) in h2.outer_iter_mut().zip(tb.iter()) {
            channel += bias;
        }
        let h3 = silu_tensor(&h2);
        let (h4, col2) = self.conv2.forward(&h3);
        let out = &h4 + x;
        (out, ResCache { col1, h2, col2 })
    }

    /// Returns (parameter grads, input grad, time-embedding grad).
    fn backward(
        &self,
        cache: &ResCache,
        temb: &Array1<f64>,
        gout: &Tensor,
    ) -> (ResBlock, Tensor, Array1<f64>) {
        let (g_conv2, gh3) = self.conv2.backward(&cache.col2, gout);
        let mut gh2 = gh3;
        gh2.zip_mut_with(&cache.h2, |g, &pre| *g *= silu_grad(pre));
        let gtb = Array1::from_iter(gh2.outer_iter().map(|channel| channel.sum()));
        let (g_tproj, gtemb) = self.t_proj.backward(temb, &gtb);
        let (g_conv1, gx) = self.conv1.backward(&cache.col1, &gh2);
        (
            ResBlock {
                conv1: g_conv1,
                conv2: g_conv2,
                t_proj: g_tproj,
            },
            gx + gout,
            gtemb,
        )
    }

    fn param_count(&self) -> usize {
        self.conv1.param_count() + self.conv2.param_count() + self.t_proj.param_count()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        self.conv1.flatten_into(out);
        self.conv2.flatten_into(out);
        self.t_proj.flatten_into(out);
    }

    fn load_from(&mut self, flat: &[f64], cursor: &mut usize) {
        self.conv1.load_from(flat, cursor);
        self.conv2.load_from(flat, cursor);
        self.t_proj.load_from(flat, cursor);
    }
}

/// The noise-prediction network. Gradients for the whole network reuse this
/// same container type, so `flatten_params` serves parameters and gradients
/// alike.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallUnet {
    pub(crate) conv_in: Conv2d,
    pub(crate) t_lin: Linear,
    pub(crate) rb1: ResBlock,
    pub(crate) down: Conv2d,
    pub(crate) rb2: ResBlock,
    pub(crate) up: Conv2d,
    pub(crate) fuse: Conv2d,
    pub(crate) rb3: ResBlock,
    pub(crate) conv_out: Conv2d,
    base: usize,
    time_dim: usize,
}

/// Everything the backward pass needs from a forward pass.
pub struct UnetCache {
    temb0: Array1<f64>,
    z: Array1<f64>,
    temb: Array1<f64>,
    col_in: Array2<f64>,
    rb1: ResCache,
    col_down: Array2<f64>,
    d_pre: Tensor,
    rb2: ResCache,
    col_up: Array2<f64>,
    up_pre: Tensor,
    col_fuse: Array2<f64>,
    f_pre: Tensor,
    rb3: ResCache,
    col_out: Array2<f64>,
}

impl SmallUnet {
    /// Fresh network with seeded initialization. The output convolution is
    /// zero-initialized, so an untrained network predicts exactly zero
    /// noise.
    pub fn new(seed: u64) -> Self {
        let base = BASE_CHANNELS;
        let time_dim = TIME_EMBED_DIM;
        let mut layer = 0u64;
        let mut next = || {
            layer += 1;
            child_rng(seed, "unet-init", layer)
        };
        SmallUnet {
            conv_in: Conv2d::new(3, base, &mut next()),
            t_lin: Linear::new(time_dim, time_dim, &mut next()),
            rb1: ResBlock::new(base, time_dim, &mut next()),
            down: Conv2d::new(base, 2 * base, &mut next()),
            rb2: ResBlock::new(2 * base, time_dim, &mut next()),
            up: Conv2d::new(2 * base, base, &mut next()),
            fuse: Conv2d::new(2 * base, base, &mut next()),
            rb3: ResBlock::new(base, time_dim, &mut next()),
            conv_out: Conv2d::zeroed(base, 3),
            base,
            time_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        SmallUnet {
            conv_in: self.conv_in.zeros_like(),
            t_lin: self.t_lin.zeros_like(),
            rb1: self.rb1.zeros_like(),
            down: self.down.zeros_like(),
            rb2: self.rb2.zeros_like(),
            up: self.up.zeros_like(),
            fuse: self.fuse.zeros_like(),
            rb3: self.rb3.zeros_like(),
            conv_out: self.conv_out.zeros_like(),
            base: self.base,
            time_dim: self.time_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv_in.param_count()
            + self.t_lin.param_count()
            + self.rb1.param_count()
            + self.down.param_count()
            + self.rb2.param_count()
            + self.up.param_count()
            + self.fuse.param_count()
            + self.rb3.param_count()
            + self.conv_out.param_count()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.conv_in.flatten_into(&mut out);
        self.t_lin.flatten_into(&mut out);
        self.rb1.flatten_into(&mut out);
        self.down.flatten_into(&mut out);
        self.rb2.flatten_into(&mut out);
        self.up.flatten_into(&mut out);
        self.fuse.flatten_into(&mut out);
        self.rb3.flatten_into(&mut out);
        self.conv_out.flatten_into(&mut out);
        out
    }

    /// Load parameters from a flat vector in [`Self::flatten_params`] order.
    ///
    /// # Errors
    ///
    /// [`Error::DimensionMismatch`] when the length is wrong.
    pub fn load_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut cursor = 0;
        self.conv_in.load_from(flat, &mut cursor);
        self.t_lin.load_from(flat, &mut cursor);
        self.rb1.load_from(flat, &mut cursor);
        self.down.load_from(flat, &mut cursor);
        self.rb2.load_from(flat, &mut cursor);
        self.up.load_from(flat, &mut cursor);
        self.fuse.load_from(flat, &mut cursor);
        self.rb3.load_from(flat, &mut cursor);
        self.conv_out.load_from(flat, &mut cursor);
        Ok(())
    }

    /// Forward pass with cached intermediates for backpropagation.
    /// Panics on odd spatial dimensions (the one pooling stage needs them
    /// even) or a channel count other than 3.
    pub fn forward(&self, x: &Tensor, t: usize) -> (Tensor, UnetCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, 3, "expected a 3-channel input");
        assert!(h % 2 == 0 && w % 2 == 0, "spatial dims must be even, got {h}x{w}");
        let temb0 = time_embedding(t, self.time_dim);
        let z = self.t_lin.forward(&temb0);
        let temb = silu_vec(&z);

        let (h0, col_in) = self.conv_in.forward(x);
        let (a1, rb1) = self.rb1.forward(&h0, &temb);
        let pooled = avgpool2(&a1);
        let (d_pre, col_down) = self.down.forward(&pooled);
        let d = silu_tensor(&d_pre);
        let (a2, rb2) = self.rb2.forward(&d, &temb);
        let up_nn = upsample2(&a2);
        let (up_pre, col_up) = self.up.forward(&up_nn);
        let up_act = silu_tensor(&up_pre);
        let cat = concatenate(Axis(0), &[a1.view(), up_act.view()])
            .expect("skip and upsample share spatial dims");
        let (f_pre, col_fuse) = self.fuse.forward(&cat);
        let f_act = silu_tensor(&f_pre);
        let (a3, rb3) = self.rb3.forward(&f_act, &temb);
        let (out, col_out) = self.conv_out.forward(&a3);
        (
            out,
            UnetCache {
                temb0,
                z,
                temb,
                col_in,
                rb1,
                col_down,
                d_pre,
                rb2,
                col_up,
                up_pre,
                col_fuse,
                f_pre,
                rb3,
                col_out,
            },
        )
    }

    /// Backpropagate `gout` (gradient w.r.t. the network output). Returns
    /// parameter gradients in a [`SmallUnet`]-shaped container and the
    /// gradient w.r.t. the input tensor.
    pub fn backward(&self, cache: &UnetCache, gout: &Tensor) -> (SmallUnet, Tensor) {
        let base = self.base;
        let (g_conv_out, ga3) = self.conv_out.backward(&cache.col_out, gout);
        let (g_rb3, gf_act, gtemb3) = self.rb3.backward(&cache.rb3, &cache.temb, &ga3);
        let mut gf_pre = gf_act;
        gf_pre.zip_mut_with(&cache.f_pre, |g, &pre| *g *= silu_grad(pre));
        let (g_fuse, gcat) = self.fuse.backward(&cache.col_fuse, &gf_pre);
        let ga1_skip = gcat.slice(ndarray::s![0..base, .., ..]).to_owned();
        let mut gup_act = gcat.slice(ndarray::s![base.., .., ..]).to_owned();
        gup_act.zip_mut_with(&cache.up_pre, |g, &pre| *g *= silu_grad(pre));
        let (g_up, gup_nn) = self.up.backward(&cache.col_up, &gup_act);
        let ga2 = upsample2_backward(&gup_nn);
        let (g_rb2, gd, gtemb2) = self.rb2.backward(&cache.rb2, &cache.temb, &ga2);
        let mut gd_pre = gd;
        gd_pre.zip_mut_with(&cache.d_pre, |g, &pre| *g *= silu_grad(pre));
        let (g_down, gpooled) = self.down.backward(&cache.col_down, &gd_pre);
        let ga1 = avgpool2_backward(&gpooled) + &ga1_skip;
        let (g_rb1, gh0, gtemb1) = self.rb1.backward(&cache.rb1, &cache.temb, &ga1);
        let (g_conv_in, gx) = self.conv_in.backward(&cache.col_in, &gh0);

        let mut gz = gtemb1 + gtemb2 + gtemb3;
        gz.zip_mut_with(&cache.z, |g, &pre| *g *= silu_grad(pre));
        let (g_t_lin, _g_temb0) = self.t_lin.backward(&cache.temb0, &gz);

        (
            SmallUnet {
                conv_in: g_conv_in,
                t_lin: g_t_lin,
                rb1: g_rb1,
                down: g_down,
                rb2: g_rb2,
                up: g_up,
                fuse: g_fuse,
                rb3: g_rb3,
                conv_out: g_conv_out,
                base: self.base,
                time_dim: self.time_dim,
            },
            gx,
        )
    }
}

/// Adam optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::Array3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: (usize, usize, usize), rng: &mut impl Rng) -> Tensor {
        Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar loss used by the gradient checks: L = Σ out².
    fn sq_loss(out: &Tensor) -> f64 {
        out.iter().map(|v| v * v).sum()
    }

    #[test]
    fn silu_gradient_matches_finite_difference() {
        let eps = 1e-6;
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (silu(x + eps) - silu(x - eps)) / (2.0 * eps);
            assert_relative_eq!(silu_grad(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn time_embedding_has_unit_range_and_distinguishes_steps() {
        let e1 = time_embedding(1, TIME_EMBED_DIM);
        let e2 = time_embedding(2, TIME_EMBED_DIM);
        assert_eq!(e1.len(), TIME_EMBED_DIM);
        assert!(e1.iter().all(|v| v.abs() <= 1.0));
        let diff: f64 = (&e1 - &e2).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-3, "distinct steps must embed differently");
        // Highest frequency is 1, so the first coordinate is sin(t).
        assert_relative_eq!(e1[0], (1f64).sin(), epsilon = 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv2d::new(2, 3, &mut rng);
        let x = random_tensor((2, 4, 5), &mut rng);
        let (out, col) = conv.forward(&x);
        let gout = out.mapv(|v| 2.0 * v);
        let (gp, gx) = conv.backward(&col, &gout);

        let eps = 1e-6;
        // Input gradient, a few positions.
        for &(c, r, cc) in &[(0, 0, 0), (1, 2, 3), (0, 3, 4)] {
            let mut xp = x.clone();
            xp[(c, r, cc)] += eps;
            let mut xm = x.clone();
            xm[(c, r, cc)] -= eps;
            let fd = (sq_loss(&conv.forward(&xp).0) - sq_loss(&conv.forward(&xm).0))
                / (2.0 * eps);
            assert_relative_eq!(gx[(c, r, cc)], fd, epsilon = 1e-4, max_relative = 1e-5);
        }
        // Weight gradient, a few entries.
        for &(o, k) in &[(0, 0), (2, 17), (1, 9)] {
            let mut cp = conv.clone();
            cp.w[(o, k)] += eps;
            let mut cm = conv.clone();
            cm.w[(o, k)] -= eps;
            let fd =
                (sq_loss(&cp.forward(&x).0) - sq_loss(&cm.forward(&x).0)) / (2.0 * eps);
            assert_relative_eq!(gp.w[(o, k)], fd, epsilon = 1e-4, max_relative = 1e-5);
        }
        // Bias gradient.
        for o in 0..3 {
            let mut cp = conv.clone();
            cp.b[o] += eps;
            let mut cm = conv.clone();
            cm.b[o] -= eps;
            let fd =
                (sq_loss(&cp.forward(&x).0) - sq_loss(&cm.forward(&x).0)) / (2.0 * eps);
            assert_relative_eq!(gp.b[o], fd, epsilon = 1e-4, max_relative = 1e-5);
        }
    }

    #[test]
    fn linear_gradients_match_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let lin = Linear::new(5, 3, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let out = lin.forward(&x);
        let gout = out.mapv(|v| 2.0 * v);
        let (gp, gx) = lin.backward(&x, &gout);

        let eps = 1e-6;
        let loss = |l: &Linear, x: &Array1<f64>| -> f64 {
            l.forward(x).iter().map(|v| v * v).sum()
        };
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps);
            assert_relative_eq!(gx[i], fd, epsilon = 1e-6, max_relative = 1e-6);
        }
        for o in 0..3 {
            for i in 0..5 {
                let mut lp = lin.clone();
                lp.w[(o, i)] += eps;
                let mut lm = lin.clone();
                lm.w[(o, i)] -= eps;
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
                assert_relative_eq!(gp.w[(o, i)], fd, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn pooling_and_upsampling_backwards_are_adjoint() {
        // ⟨A x, y⟩ must equal ⟨x, Aᵀ y⟩ for the linear resampling ops.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_tensor((3, 6, 8), &mut rng);
        let y = random_tensor((3, 3, 4), &mut rng);
        let fwd: f64 = (avgpool2(&x) * &y).sum();
        let adj: f64 = (&x * &avgpool2_backward(&y)).sum();
        assert_relative_eq!(fwd, adj, epsilon = 1e-12);

        let u = random_tensor((2, 3, 4), &mut rng);
        let v = random_tensor((2, 6, 8), &mut rng);
        let fwd: f64 = (upsample2(&u) * &v).sum();
        let adj: f64 = (&u * &upsample2_backward(&v)).sum();
        assert_relative_eq!(fwd, adj, epsilon = 1e-12);
    }

    #[test]
    fn upsample_repeats_nearest_neighbor() {
        let x = Array3::from_shape_fn((1, 2, 2), |(_, r, c)| (r * 2 + c) as f64);
        let up = upsample2(&x);
        assert_eq!(up.dim(), (1, 4, 4));
        assert_eq!(up[(0, 0, 0)], 0.0);
        assert_eq!(up[(0, 0, 1)], 0.0);
        assert_eq!(up[(0, 1, 1)], 0.0);
        assert_eq!(up[(0, 2, 3)], 3.0);
        assert_eq!(up[(0, 3, 3)], 3.0);
    }

    #[test]
    fn fresh_network_predicts_zero_noise() {
        let net = SmallUnet::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor((3, 8, 8), &mut rng);
        let (out, _) = net.forward(&x, 500);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_is_pinned() {
        let net = SmallUnet::new(0);
        assert_eq!(net.param_count(), 99_147);
    }

    #[test]
    fn flatten_then_load_roundtrips() {
        let net = SmallUnet::new(3);
        let flat = net.flatten_params();
        assert_eq!(flat.len(), net.param_count());
        let mut other = SmallUnet::new(99);
        other.load_params(&flat).unwrap();
        assert_eq!(net, other);
        assert!(other.load_params(&flat[1..]).is_err());
    }

    #[test]
    fn same_seed_builds_identical_networks() {
        assert_eq!(SmallUnet::new(42), SmallUnet::new(42));
        assert_ne!(SmallUnet::new(42), SmallUnet::new(43));
    }

    #[test]
    fn network_input_gradient_matches_finite_difference() {
        let mut net = SmallUnet::new(5);
        // Give conv_out real weights so gradients flow end to end.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        net.conv_out = Conv2d::new(BASE_CHANNELS, 3, &mut rng);
        let x = random_tensor((3, 8, 8), &mut rng);
        let t = 321;
        let (out, cache) = net.forward(&x, t);
        let gout = out.mapv(|v| 2.0 * v);
        let (_, gx) = net.backward(&cache, &gout);

        let eps = 1e-5;
        for &(c, r, cc) in &[(0, 0, 0), (1, 3, 5), (2, 7, 7), (0, 4, 2)] {
            let mut xp = x.clone();
            xp[(c, r, cc)] += eps;
            let mut xm = x.clone();
            xm[(c, r, cc)] -= eps;
            let fd = (sq_loss(&net.forward(&xp, t).0) - sq_loss(&net.forward(&xm, t).0))
                / (2.0 * eps);
            assert_relative_eq!(gx[(c, r, cc)], fd, epsilon = 1e-5, max_relative = 1e-4);
        }
    }

    #[test]
    fn network_parameter_gradients_match_finite_difference() {
        let mut net = SmallUnet::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        net.conv_out = Conv2d::new(BASE_CHANNELS, 3, &mut rng);
        let x = random_tensor((3, 8, 8), &mut rng);
        let t = 77;
        let (out, cache) = net.forward(&x, t);
        let gout = out.mapv(|v| 2.0 * v);
        let (gnet, _) = net.backward(&cache, &gout);
        let ganalytic = gnet.flatten_params();
        let params = net.flatten_params();
        let n = params.len();

        // Probe a deterministic spread of parameters across every layer.
        let eps = 1e-5;
        let mut probe = net.clone();
        for k in 0..24 {
            let idx = (k * (n / 24) + k) % n;
            let mut pp = params.clone();
            pp[idx] += eps;
            probe.load_params(&pp).unwrap();
            let lp = sq_loss(&probe.forward(&x, t).0);
            pp[idx] -= 2.0 * eps;
            probe.load_params(&pp).unwrap();
            let lm = sq_loss(&probe.forward(&x, t).0);
            let fd = (lp - lm) / (2.0 * eps);
            assert_relative_eq!(ganalytic[idx], fd, epsilon = 1e-5, max_relative = 1e-4);
        }
    }

    #[test]
    #[should_panic(expected = "even")]
    fn odd_spatial_dims_panic() {
        let net = SmallUnet::new(0);
        let x = Array3::zeros((3, 7, 8));
        net.forward(&x, 1);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        let mut opt = Adam::new(0.1, 2);
        let mut params = vec![1.0, -2.0];
        let grads = vec![0.5, -0.25];
        opt.update(&mut params, &grads);
        // After one step m̂ = g and v̂ = g², so Δ = lr·g/(|g|+eps) ≈ ±lr.
        assert_relative_eq!(params[0], 1.0 - 0.1 * (0.5 / (0.5 + 1e-8)), epsilon = 1e-12);
        assert_relative_eq!(
            params[1],
            -2.0 + 0.1 * (0.25 / (0.25 + 1e-8)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut opt = Adam::new(0.05, 1);
        let mut p = vec![3.0];
        for _ in 0..400 {
            let g = vec![2.0 * (p[0] - 1.5)];
            opt.update(&mut p, &g);
        }
        assert_relative_eq!(p[0], 1.5, epsilon = 1e-3);
    }
}
