//! Spectral and elevation encoders and the linear fusion head.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_block_backward, conv_block_forward, flatten, init_rng, linear_backward, linear_forward,
    unflatten, ConvBlockCache, ConvBlockParams, LinearParams, Mode,
};
use crate::sampling::PatchPair;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HSI_CHANNELS: [usize; 3] = [64, 128, 256];
pub const LIDAR_CHANNELS: [usize; 3] = [32, 64, 128];
pub const EMBED_DIM: usize = 512;
pub const PATCH_SIZE: usize = 11;

/// Which visual branches feed the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Both,
    Hsi,
    Lidar,
}

impl Modality {
    pub fn uses_hsi(self) -> bool {
        matches!(self, Modality::Both | Modality::Hsi)
    }

    pub fn uses_lidar(self) -> bool {
        matches!(self, Modality::Both | Modality::Lidar)
    }
}

/// Network shape. Each branch emits `embed_dim / 2` features; the fusion head
/// maps their concatenation (or the single active branch) to `embed_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub bands: usize,
    pub lidar_channels: usize,
    pub patch_size: usize,
    pub hsi_channels: [usize; 3],
    pub lidar_plan: [usize; 3],
    pub embed_dim: usize,
    pub modality: Modality,
}

impl Arch {
    /// The published configuration: 11×11 patches, 64/128/256 and 32/64/128
    /// filters, 512-d joint space.
    pub fn standard(bands: usize, lidar_channels: usize) -> Self {
        Self {
            bands,
            lidar_channels,
            patch_size: PATCH_SIZE,
            hsi_channels: HSI_CHANNELS,
            lidar_plan: LIDAR_CHANNELS,
            embed_dim: EMBED_DIM,
            modality: Modality::Both,
        }
    }

    pub fn branch_dim(&self) -> usize {
        self.embed_dim / 2
    }

    /// Spatial size after the three pooling stages.
    pub fn final_spatial(&self) -> usize {
        self.patch_size / 2 / 2 / 2
    }

    pub fn fusion_input(&self) -> usize {
        match self.modality {
            Modality::Both => self.embed_dim,
            _ => self.branch_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("bands must be positive".into()));
        }
        if !(1..=2).contains(&self.lidar_channels) {
            return Err(Error::Config(format!(
                "lidar channels must be 1 or 2, got {}",
                self.lidar_channels
            )));
        }
        if self.patch_size.is_multiple_of(2) || self.final_spatial() == 0 {
            return Err(Error::Config(format!(
                "patch size must be odd and at least 9, got {}",
                self.patch_size
            )));
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "embedding dimension must be even, got {}",
                self.embed_dim
            )));
        }
        if self.hsi_channels.contains(&0) || self.lidar_plan.contains(&0) {
            return Err(Error::Config("channel plans must be positive".into()));
        }
        Ok(())
    }
}

/// Three conv blocks, flatten, one FC layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub blocks: Vec<ConvBlockParams<T>>,
    pub fc: LinearParams<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn init(
        in_ch: usize,
        plan: [usize; 3],
        spatial: usize,
        out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(3);
        let mut c = in_ch;
        for &next in &plan {
            blocks.push(ConvBlockParams::init(c, next, rng));
            c = next;
        }
        let fc = LinearParams::init(c * spatial * spatial, out, rng);
        Self { blocks, fc }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlockParams::zeros(b.in_channels(), b.out_channels()))
                .collect(),
            fc: LinearParams::zeros(self.fc.input_dim(), self.fc.output_dim()),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].in_channels()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    blocks: Vec<ConvBlockCache<T>>,
    final_shape: (usize, usize, usize),
    fc_input: Tensor<T>,
}

impl<T> EncoderCache<T> {
    pub fn block_caches(&self) -> &[ConvBlockCache<T>] {
        &self.blocks
    }
}

/// Runs one branch over a `[channels, batch, P, P]` batch; returns `[out, batch]`.
pub fn encoder_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &EncoderParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<EncoderCache<T>>)> {
    let mut caches = Vec::with_capacity(p.blocks.len());
    let mut h = conv_block_forward(x, &p.blocks[0], mode)?;
    let mut act = h.0;
    caches.extend(h.1);
    for block in &p.blocks[1..] {
        h = conv_block_forward(&act, block, mode)?;
        act = h.0;
        caches.extend(h.1);
    }
    let s = act.shape();
    let final_shape = (s[0], s[2], s[3]);
    let flat = flatten(&act)?;
    if flat.shape()[0] != p.fc.input_dim() {
        return Err(Error::Shape(format!(
            "encoder FC expects {} inputs, conv stack produced {}",
            p.fc.input_dim(),
            flat.shape()[0]
        )));
    }
    let z = linear_forward(&flat, &p.fc)?;
    let cache = (mode == Mode::Train).then_some(EncoderCache {
        blocks: caches,
        final_shape,
        fc_input: flat,
    });
    Ok((z, cache))
}

pub fn encoder_backward<T: Scalar>(
    grad_z: &Tensor<T>,
    cache: &EncoderCache<T>,
    p: &EncoderParams<T>,
) -> Result<(Tensor<T>, EncoderParams<T>)> {
    let (g_flat, g_fc) = linear_backward(grad_z, &cache.fc_input, &p.fc)?;
    let (c, h, w) = cache.final_shape;
    let mut g = unflatten(&g_flat, c, h, w)?;
    let mut block_grads = Vec::with_capacity(p.blocks.len());
    for (block, bc) in p.blocks.iter().zip(&cache.blocks).rev() {
        let (gx, gp) = conv_block_backward(&g, bc, block)?;
        block_grads.push(gp);
        g = gx;
    }
    block_grads.reverse();
    Ok((
        g,
        EncoderParams {
            blocks: block_grads,
            fc: g_fc,
        },
    ))
}

/// Every learnable tensor of the model plus batch-norm running statistics.
/// Gradients use the same struct.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Arch,
    pub hsi: Option<EncoderParams<T>>,
    pub lidar: Option<EncoderParams<T>>,
    pub fusion: LinearParams<T>,
    /// `ln(1/τ)`, shape `[1]`.
    pub log_inv_tau: Tensor<T>,
}

/// Initial `ln(1/τ)` for `τ = 0.07`.
pub fn initial_log_inv_tau() -> f64 {
    (1.0f64 / 0.07).ln()
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = init_rng(seed);
        let s = arch.final_spatial();
        let hsi = arch.modality.uses_hsi().then(|| {
            EncoderParams::init(
                arch.bands,
                arch.hsi_channels,
                s,
                arch.branch_dim(),
                &mut rng,
            )
        });
        let lidar = arch.modality.uses_lidar().then(|| {
            EncoderParams::init(
                arch.lidar_channels,
                arch.lidar_plan,
                s,
                arch.branch_dim(),
                &mut rng,
            )
        });
        let fusion = LinearParams::init(arch.fusion_input(), arch.embed_dim, &mut rng);
        Ok(Self {
            arch: arch.clone(),
            hsi,
            lidar,
            fusion,
            log_inv_tau: Tensor::scalar(T::from_f64(initial_log_inv_tau())),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            hsi: self.hsi.as_ref().map(EncoderParams::zeros_like),
            lidar: self.lidar.as_ref().map(EncoderParams::zeros_like),
            fusion: LinearParams::zeros(self.fusion.input_dim(), self.fusion.output_dim()),
            log_inv_tau: Tensor::zeros(&[1]),
        }
    }

    pub fn log_inv_tau(&self) -> T {
        self.log_inv_tau.data()[0]
    }

    fn branches(&self) -> [(&'static str, Option<&EncoderParams<T>>); 2] {
        [("hsi", self.hsi.as_ref()), ("lidar", self.lidar.as_ref())]
    }

    fn branches_mut(&mut self) -> [(&'static str, Option<&mut EncoderParams<T>>); 2] {
        [("hsi", self.hsi.as_mut()), ("lidar", self.lidar.as_mut())]
    }

    /// Learnable tensors in a fixed order, with stable names.
    pub fn learnable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, enc) in self.branches() {
            let Some(enc) = enc else { continue };
            for (i, b) in enc.blocks.iter().enumerate() {
                out.push((format!("{name}.block{i}.weight"), &b.weight));
                out.push((format!("{name}.block{i}.bias"), &b.bias));
                out.push((format!("{name}.block{i}.gamma"), &b.gamma));
                out.push((format!("{name}.block{i}.beta"), &b.beta));
            }
            out.push((format!("{name}.fc.weight"), &enc.fc.weight));
            out.push((format!("{name}.fc.bias"), &enc.fc.bias));
        }
        out.push(("fusion.weight".into(), &self.fusion.weight));
        out.push(("fusion.bias".into(), &self.fusion.bias));
        out.push(("log_inv_tau".into(), &self.log_inv_tau));
        out
    }

    /// Same order as [`ModelParams::learnable`].
    pub fn learnable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        let Self {
            hsi,
            lidar,
            fusion,
            log_inv_tau,
            ..
        } = self;
        for (name, enc) in [("hsi", hsi.as_mut()), ("lidar", lidar.as_mut())] {
            let Some(enc) = enc else { continue };
            for (i, b) in enc.blocks.iter_mut().enumerate() {
                out.push((format!("{name}.block{i}.weight"), &mut b.weight));
                out.push((format!("{name}.block{i}.bias"), &mut b.bias));
                out.push((format!("{name}.block{i}.gamma"), &mut b.gamma));
                out.push((format!("{name}.block{i}.beta"), &mut b.beta));
            }
            out.push((format!("{name}.fc.weight"), &mut enc.fc.weight));
            out.push((format!("{name}.fc.bias"), &mut enc.fc.bias));
        }
        out.push(("fusion.weight".into(), &mut fusion.weight));
        out.push(("fusion.bias".into(), &mut fusion.bias));
        out.push(("log_inv_tau".into(), log_inv_tau));
        out
    }

    /// Batch-norm running statistics (not learnable).
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (name, enc) in self.branches() {
            let Some(enc) = enc else { continue };
            for (i, b) in enc.blocks.iter().enumerate() {
                out.push((format!("{name}.block{i}.running_mean"), &b.running_mean));
                out.push((format!("{name}.block{i}.running_var"), &b.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (name, enc) in self.branches_mut() {
            let Some(enc) = enc else { continue };
            for (i, b) in enc.blocks.iter_mut().enumerate() {
                out.push((format!("{name}.block{i}.running_mean"), &mut b.running_mean));
                out.push((format!("{name}.block{i}.running_var"), &mut b.running_var));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.learnable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let enc = |e: &EncoderParams<T>| EncoderParams {
            blocks: e
                .blocks
                .iter()
                .map(|b| ConvBlockParams {
                    weight: b.weight.cast(),
                    bias: b.bias.cast(),
                    gamma: b.gamma.cast(),
                    beta: b.beta.cast(),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                })
                .collect(),
            fc: LinearParams {
                weight: e.fc.weight.cast(),
                bias: e.fc.bias.cast(),
            },
        };
        ModelParams {
            arch: self.arch.clone(),
            hsi: self.hsi.as_ref().map(enc),
            lidar: self.lidar.as_ref().map(enc),
            fusion: LinearParams {
                weight: self.fusion.weight.cast(),
                bias: self.fusion.bias.cast(),
            },
            log_inv_tau: self.log_inv_tau.cast(),
        }
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, cache: &ModelCache<T>) {
        let pairs = [
            (self.hsi.as_mut(), cache.hsi.as_ref()),
            (self.lidar.as_mut(), cache.lidar.as_ref()),
        ];
        for (enc, c) in pairs {
            if let (Some(enc), Some(c)) = (enc, c) {
                for (b, bc) in enc.blocks.iter_mut().zip(&c.blocks) {
                    b.update_running_stats(bc);
                }
            }
        }
    }
}

/// A mini-batch laid out for the encoders.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[bands, n, P, P]`
    pub hsi: Tensor<T>,
    /// `[lidar_channels, n, P, P]`
    pub lidar: Tensor<T>,
    pub labels: Vec<u16>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_pairs(pairs: &[&PatchPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Shape("cannot build an empty batch".into()))?;
        let (b, l, p) = (first.bands, first.lidar_channels, first.size);
        let n = pairs.len();
        let area = p * p;
        let mut hsi = vec![T::zero(); b * n * area];
        let mut lidar = vec![T::zero(); l * n * area];
        for (i, pair) in pairs.iter().enumerate() {
            if (pair.bands, pair.lidar_channels, pair.size) != (b, l, p) {
                return Err(Error::Shape("patches in a batch differ in shape".into()));
            }
            for ch in 0..b {
                let dst = &mut hsi[(ch * n + i) * area..(ch * n + i + 1) * area];
                for (d, &s) in dst.iter_mut().zip(&pair.hsi[ch * area..(ch + 1) * area]) {
                    *d = T::from_f64(s as f64);
                }
            }
            for ch in 0..l {
                let dst = &mut lidar[(ch * n + i) * area..(ch * n + i + 1) * area];
                for (d, &s) in dst.iter_mut().zip(&pair.lidar[ch * area..(ch + 1) * area]) {
                    *d = T::from_f64(s as f64);
                }
            }
        }
        Ok(Self {
            hsi: Tensor::from_vec(&[b, n, p, p], hsi)?,
            lidar: Tensor::from_vec(&[l, n, p, p], lidar)?,
            labels: pairs.iter().map(|p| p.label).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelCache<T> {
    hsi: Option<EncoderCache<T>>,
    lidar: Option<EncoderCache<T>>,
    fusion_input: Tensor<T>,
    batch: usize,
}

/// Concatenates feature columns `[a, n]` and `[b, n]` into `[a + b, n]`.
fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.shape()[1];
    if b.shape()[1] != n {
        return Err(Error::Shape("fusion inputs differ in batch size".into()));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[a.shape()[0] + b.shape()[0], n], data)
}

/// `z_v = W_fuse (z_hsi ⊕ z_lidar) + b_fuse` on `[256, n]` columns.
pub fn fuse<T: Scalar>(
    z_hsi: &Tensor<T>,
    z_lidar: &Tensor<T>,
    fusion: &LinearParams<T>,
) -> Result<Tensor<T>> {
    let half = fusion.input_dim() / 2;
    if z_hsi.shape()[0] != half || z_lidar.shape()[0] != half {
        return Err(Error::Shape(format!(
            "fusion expects two {half}-d inputs, got {} and {}",
            z_hsi.shape()[0],
            z_lidar.shape()[0]
        )));
    }
    linear_forward(&concat_rows(z_hsi, z_lidar)?, fusion)
}

fn check_input<T: Scalar>(
    x: &Tensor<T>,
    channels: usize,
    size: usize,
    what: &str,
) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[0] != channels || s[2] != size || s[3] != size {
        return Err(Error::Shape(format!(
            "{what}: expected [{channels}, n, {size}, {size}], got {s:?}"
        )));
    }
    Ok(s[1])
}

/// Visual embedding `z_v` for a batch, `[embed_dim, n]`. Inactive branches
/// never read their input.
pub fn model_forward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<ModelCache<T>>)> {
    let arch = &params.arch;
    let mut n = None;
    let mut run = |enc: Option<&EncoderParams<T>>, x: &Tensor<T>, ch: usize, what: &str| {
        enc.map(|enc| -> Result<_> {
            let bn = check_input(x, ch, arch.patch_size, what)?;
            n = Some(bn);
            encoder_forward(x, enc, mode)
        })
        .transpose()
    };
    let hsi = run(
        params.hsi.as_ref(),
        &batch.hsi,
        arch.bands,
        "spectral batch",
    )?;
    let lidar = run(
        params.lidar.as_ref(),
        &batch.lidar,
        arch.lidar_channels,
        "elevation batch",
    )?;
    let n = n.ok_or_else(|| Error::Config("model has no active branch".into()))?;
    let fusion_input = match (&hsi, &lidar) {
        (Some((a, _)), Some((b, _))) => concat_rows(a, b)?,
        (Some((a, _)), None) => a.clone(),
        (None, Some((b, _))) => b.clone(),
        (None, None) => unreachable!(),
    };
    let z = linear_forward(&fusion_input, &params.fusion)?;
    let cache = (mode == Mode::Train).then(|| ModelCache {
        hsi: hsi.and_then(|h| h.1),
        lidar: lidar.and_then(|l| l.1),
        fusion_input,
        batch: n,
    });
    Ok((z, cache))
}

/// Gradients of every learnable tensor given `dL/dz_v` (`[embed_dim, n]`).
/// The returned struct leaves `log_inv_tau` at zero; the alignment head
/// owns that gradient.
pub fn model_backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ModelCache<T>,
    grad_z: &Tensor<T>,
) -> Result<ModelParams<T>> {
    let n = cache.batch;
    let (g_in, g_fusion) = linear_backward(grad_z, &cache.fusion_input, &params.fusion)?;
    let mut grads = params.zeros_like();
    grads.fusion = g_fusion;
    let half = params.arch.branch_dim();
    let (g_hsi, g_lidar) = match params.arch.modality {
        Modality::Both => {
            let (a, b) = g_in.data().split_at(half * n);
            (
                Some(Tensor::from_vec(&[half, n], a.to_vec())?),
                Some(Tensor::from_vec(&[half, n], b.to_vec())?),
            )
        }
        Modality::Hsi => (Some(g_in), None),
        Modality::Lidar => (None, Some(g_in)),
    };
    if let (Some(g), Some(c), Some(p)) = (g_hsi, &cache.hsi, &params.hsi) {
        grads.hsi = Some(encoder_backward(&g, c, p)?.1);
    }
    if let (Some(g), Some(c), Some(p)) = (g_lidar, &cache.lidar, &params.lidar) {
        grads.lidar = Some(encoder_backward(&g, c, p)?.1);
    }
    Ok(grads)
}

/// Embedding of a single patch pair in eval mode.
pub fn embed_pair<T: Scalar>(pair: &PatchPair, params: &ModelParams<T>) -> Result<Vec<T>> {
    let batch = Batch::from_pairs(&[pair])?;
    Ok(model_forward(params, &batch, Mode::Eval)?.0.into_data())
}
