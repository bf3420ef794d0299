//! Layer kernels with hand-written backward passes.
//!
//! Activations are stored channel-major across the batch: a feature map is a
//! tensor of shape `[channels, batch, height, width]`. With that layout the
//! convolution is a single GEMM against an im2col matrix, and batch-norm
//! statistics for a channel are one contiguous slice. Dense activations are
//! `[features, batch]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};
use crate::tensor::Tensor;

pub const KERNEL: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Conv 3×3 (stride 1, pad 1) → batch norm → ReLU → max-pool 2×2 (stride 2).
///
/// The same struct carries gradients: `conv_block_backward` returns one with
/// the learnable fields filled and the running statistics zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams<T> {
    /// `[out, in, 3, 3]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> ConvBlockParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_ch, in_ch, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[out_ch]),
            gamma: Tensor::zeros(&[out_ch]),
            beta: Tensor::zeros(&[out_ch]),
            running_mean: Tensor::zeros(&[out_ch]),
            running_var: Tensor::zeros(&[out_ch]),
        }
    }

    /// He-normal kernel, zero bias, identity batch norm.
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(in_ch, out_ch);
        he_normal(p.weight.data_mut(), in_ch * KERNEL * KERNEL, rng);
        p.gamma.data_mut().fill(T::one());
        p.running_var.data_mut().fill(T::one());
        p
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ConvBlockCache<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let count = cache.batch * cache.size * cache.size;
        // running variance tracks the unbiased estimate
        let correction = if count > 1 {
            T::from_f64(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.out_channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = keep * *rm + m * cache.batch_mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = keep * *rv + m * cache.batch_var[c] * correction;
        }
    }
}

/// Saved activations for one conv block's backward pass.
#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch: usize,
    /// Spatial size before pooling.
    pub size: usize,
    cols: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    active: Vec<bool>,
    argmax: Vec<usize>,
}

fn he_normal<T: Scalar>(out: &mut [T], fan_in: usize, rng: &mut ChaCha8Rng) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = T::from_f64(z * std);
    }
}

/// im2col for a `[cin, n, s, s]` input: rows are `(ci, ky, kx)`, columns are
/// `(n, y, x)`.
fn im2col<T: Scalar>(x: &[T], cin: usize, n: usize, s: usize) -> Vec<T> {
    let plane = s * s;
    let ncols = n * plane;
    let mut cols = vec![T::zero(); cin * KERNEL * KERNEL * ncols];
    for ci in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let src = &x[(ci * n + b) * plane..(ci * n + b + 1) * plane];
                    for y in 0..s {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= s as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..s {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= s as isize {
                                continue;
                            }
                            dst[b * plane + y * s + xx] = src[sy * s + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, n: usize, s: usize) -> Vec<T> {
    let plane = s * s;
    let ncols = n * plane;
    let mut x = vec![T::zero(); cin * n * plane];
    for ci in 0..cin {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..n {
                    let dst = &mut x[(ci * n + b) * plane..(ci * n + b + 1) * plane];
                    for y in 0..s {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= s as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for xx in 0..s {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= s as isize {
                                continue;
                            }
                            dst[sy * s + sx as usize] += src[b * plane + y * s + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

fn check_map<T: Scalar>(x: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize)> {
    let shape = x.shape();
    if shape.len() != 4 || shape[2] != shape[3] {
        return Err(Error::Shape(format!(
            "{what}: expected [channels, batch, s, s], got {shape:?}"
        )));
    }
    if shape[0] != channels {
        return Err(Error::Shape(format!(
            "{what}: expected {channels} input channels, got {}",
            shape[0]
        )));
    }
    Ok((shape[1], shape[2]))
}

/// Forward pass of one block. Train mode normalizes with batch statistics and
/// returns the cache; the caller folds the statistics into the running
/// estimates with [`ConvBlockParams::update_running_stats`], which keeps this
/// function free of side effects.
pub fn conv_block_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvBlockParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<ConvBlockCache<T>>)> {
    let cin = p.in_channels();
    let cout = p.out_channels();
    let (n, s) = check_map(x, cin, "conv block input")?;
    if s < 2 {
        return Err(Error::Shape(format!(
            "conv block input must be at least 2×2, got {s}×{s}"
        )));
    }
    let plane = s * s;
    let count = n * plane;
    let k = cin * KERNEL * KERNEL;

    let cols = im2col(x.data(), cin, n, s);
    let mut z = vec![T::zero(); cout * count];
    for (c, row) in z.chunks_mut(count).enumerate() {
        row.fill(p.bias.data()[c]);
    }
    gemm(
        Op::N,
        Op::N,
        cout,
        count,
        k,
        T::one(),
        p.weight.data(),
        &cols,
        T::one(),
        &mut z,
    );

    // batch norm, in place: z becomes xhat
    let eps = T::from_f64(BN_EPS);
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut inv_std = vec![T::zero(); cout];
    let mut batch_mean = vec![T::zero(); cout];
    let mut batch_var = vec![T::zero(); cout];
    for (c, row) in z.chunks_mut(count).enumerate() {
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = row.iter().copied().sum::<T>() * inv_count;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_count;
                (mean, var)
            }
            Mode::Eval => (p.running_mean.data()[c], p.running_var.data()[c]),
        };
        let is = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std[c] = is;
        batch_mean[c] = mean;
        batch_var[c] = var;
    }
    let xhat = if mode == Mode::Train {
        Some(z.clone())
    } else {
        None
    };

    // affine + relu
    let mut active = if mode == Mode::Train {
        vec![false; cout * count]
    } else {
        Vec::new()
    };
    for (c, row) in z.chunks_mut(count).enumerate() {
        let (g, b) = (p.gamma.data()[c], p.beta.data()[c]);
        for (i, v) in row.iter_mut().enumerate() {
            let y = g * *v + b;
            let on = y > T::zero();
            *v = if on { y } else { T::zero() };
            if mode == Mode::Train {
                active[c * count + i] = on;
            }
        }
    }

    // 2×2 max-pool, floor; ties go to the first element in row-major order
    let so = s / 2;
    let oplane = so * so;
    let mut out = vec![T::zero(); cout * n * oplane];
    let mut argmax = if mode == Mode::Train {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    for cb in 0..cout * n {
        let base = cb * plane;
        for oy in 0..so {
            for ox in 0..so {
                let mut best = base + (2 * oy) * s + 2 * ox;
                let mut best_v = z[best];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * s + 2 * ox + dx;
                    if z[idx] > best_v {
                        best = idx;
                        best_v = z[idx];
                    }
                }
                let o = cb * oplane + oy * so + ox;
                out[o] = best_v;
                if mode == Mode::Train {
                    argmax[o] = best;
                }
            }
        }
    }

    let out = Tensor::from_vec(&[cout, n, so, so], out)?;
    let cache = xhat.map(|xhat| ConvBlockCache {
        in_channels: cin,
        out_channels: cout,
        batch: n,
        size: s,
        cols,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
        active,
        argmax,
    });
    Ok((out, cache))
}

/// Exact gradients of one block (train-mode batch norm included). Returns the
/// input gradient and a params-shaped struct holding the parameter gradients.
pub fn conv_block_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &ConvBlockCache<T>,
    p: &ConvBlockParams<T>,
) -> Result<(Tensor<T>, ConvBlockParams<T>)> {
    let (cin, cout, n, s) = (
        cache.in_channels,
        cache.out_channels,
        cache.batch,
        cache.size,
    );
    if p.in_channels() != cin || p.out_channels() != cout {
        return Err(Error::Shape(
            "conv block cache does not match the parameters".into(),
        ));
    }
    let so = s / 2;
    grad_out.expect_shape(&[cout, n, so, so], "conv block upstream gradient")?;
    let count = n * s * s;
    let k = cin * KERNEL * KERNEL;

    // pool
    let mut dz = vec![T::zero(); cout * count];
    for (o, &g) in grad_out.data().iter().enumerate() {
        dz[cache.argmax[o]] += g;
    }
    // relu
    for (d, &on) in dz.iter_mut().zip(&cache.active) {
        if !on {
            *d = T::zero();
        }
    }

    let mut grads = ConvBlockParams::zeros(cin, cout);
    // batch norm
    let inv_count = T::from_f64(1.0 / count as f64);
    for c in 0..cout {
        let dy = &mut dz[c * count..(c + 1) * count];
        let xh = &cache.xhat[c * count..(c + 1) * count];
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for (&d, &x) in dy.iter().zip(xh) {
            sum_dy += d;
            sum_dy_xh += d * x;
        }
        grads.gamma.data_mut()[c] = sum_dy_xh;
        grads.beta.data_mut()[c] = sum_dy;
        let g = p.gamma.data()[c];
        let scale = g * cache.inv_std[c];
        let mean_dy = sum_dy * inv_count;
        let mean_dy_xh = sum_dy_xh * inv_count;
        for (d, &x) in dy.iter_mut().zip(xh) {
            *d = scale * (*d - mean_dy - x * mean_dy_xh);
        }
    }

    // conv
    for c in 0..cout {
        grads.bias.data_mut()[c] = dz[c * count..(c + 1) * count].iter().copied().sum();
    }
    gemm(
        Op::N,
        Op::T,
        cout,
        k,
        count,
        T::one(),
        &dz,
        &cache.cols,
        T::zero(),
        grads.weight.data_mut(),
    );
    let mut dcols = vec![T::zero(); k * count];
    gemm(
        Op::T,
        Op::N,
        k,
        count,
        cout,
        T::one(),
        p.weight.data(),
        &dz,
        T::zero(),
        &mut dcols,
    );
    let dx = col2im(&dcols, cin, n, s);
    Ok((Tensor::from_vec(&[cin, n, s, s], dx)?, grads))
}

/// Fully connected layer `y = W x + b`, applied to `[in, batch]` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(input, output);
        he_normal(p.weight.data_mut(), input, rng);
        p
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }
}

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    let (input, output) = (p.input_dim(), p.output_dim());
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != input {
        return Err(Error::Shape(format!(
            "linear layer expects [{input}, batch], got {shape:?}"
        )));
    }
    let n = shape[1];
    let mut y = vec![T::zero(); output * n];
    for (o, row) in y.chunks_mut(n.max(1)).enumerate().take(output) {
        row.fill(p.bias.data()[o]);
    }
    gemm(
        Op::N,
        Op::N,
        output,
        n,
        input,
        T::one(),
        p.weight.data(),
        x.data(),
        T::one(),
        &mut y,
    );
    Tensor::from_vec(&[output, n], y)
}

/// Returns `(grad_x, grad_params)`.
pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    p: &LinearParams<T>,
) -> Result<(Tensor<T>, LinearParams<T>)> {
    let (input, output) = (p.input_dim(), p.output_dim());
    let n = x.shape().get(1).copied().unwrap_or(0);
    x.expect_shape(&[input, n], "linear backward input")?;
    grad_out.expect_shape(&[output, n], "linear upstream gradient")?;
    let mut grads = LinearParams::zeros(input, output);
    gemm(
        Op::N,
        Op::T,
        output,
        input,
        n,
        T::one(),
        grad_out.data(),
        x.data(),
        T::zero(),
        grads.weight.data_mut(),
    );
    for (o, row) in grad_out.data().chunks(n.max(1)).enumerate().take(output) {
        grads.bias.data_mut()[o] = row.iter().copied().sum();
    }
    let mut dx = vec![T::zero(); input * n];
    gemm(
        Op::T,
        Op::N,
        input,
        n,
        output,
        T::one(),
        p.weight.data(),
        grad_out.data(),
        T::zero(),
        &mut dx,
    );
    Ok((Tensor::from_vec(&[input, n], dx)?, grads))
}

/// `[c, n, h, w]` feature maps to `[c·h·w, n]` columns, feature index
/// `c·h·w + y·w + x` per sample.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "flatten expects rank 4, got {shape:?}"
        )));
    }
    let (c, n, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    if hw == 1 {
        return Tensor::from_vec(&[c, n], x.data().to_vec());
    }
    let mut out = vec![T::zero(); c * hw * n];
    for ci in 0..c {
        for b in 0..n {
            for p in 0..hw {
                out[(ci * hw + p) * n + b] = x.data()[(ci * n + b) * hw + p];
            }
        }
    }
    Tensor::from_vec(&[c * hw, n], out)
}

/// Inverse of [`flatten`] for gradients.
pub fn unflatten<T: Scalar>(g: &Tensor<T>, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    let n = g.shape().get(1).copied().unwrap_or(0);
    g.expect_shape(&[c * hw, n], "unflatten")?;
    if hw == 1 {
        return Tensor::from_vec(&[c, n, h, w], g.data().to_vec());
    }
    let mut out = vec![T::zero(); c * n * hw];
    for ci in 0..c {
        for b in 0..n {
            for p in 0..hw {
                out[(ci * n + b) * hw + p] = g.data()[(ci * hw + p) * n + b];
            }
        }
    }
    Tensor::from_vec(&[c, n, h, w], out)
}

/// Seeded generator used for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
