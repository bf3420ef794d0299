#![allow(dead_code)]

use geoalign_core::alignment::{alignment_loss, random_text_table, LossDirection, TextTable};
use geoalign_core::data::SceneDataset;
use geoalign_core::encoders::{model_backward, model_forward, Arch, Batch, Modality, ModelParams};
use geoalign_core::nn::Mode;
use geoalign_core::sampling::{generate_synthetic_scene, SynthConfig};
use geoalign_core::training::TrainConfig;
use geoalign_core::{Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// B=4, L=1, plans [4,8,8]/[2,4,4], D=16.
pub fn mini_arch() -> Arch {
    Arch {
        bands: 4,
        lidar_channels: 1,
        patch_size: 11,
        hsi_channels: [4, 8, 8],
        lidar_plan: [2, 4, 4],
        embed_dim: 16,
        modality: Modality::Both,
    }
}

pub fn class_names(classes: usize) -> Vec<String> {
    (1..=classes).map(|c| format!("class {c}")).collect()
}

pub fn mini_table(classes: usize, dim: usize) -> TextTable {
    random_text_table(class_names(classes), dim, 11).unwrap()
}

/// Random standard-normal patches with labels `1..=n` cycled over `classes`.
pub fn random_batch(arch: &Arch, n: usize, classes: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = arch.patch_size;
    let mut normal = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| {
                let u: f64 = rng.random_range(1e-12..1.0);
                let v: f64 = rng.random();
                (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
            })
            .collect()
    };
    let hsi = normal(arch.bands * n * p * p);
    let lidar = normal(arch.lidar_channels * n * p * p);
    Batch {
        hsi: Tensor::from_vec(&[arch.bands, n, p, p], hsi).unwrap(),
        lidar: Tensor::from_vec(&[arch.lidar_channels, n, p, p], lidar).unwrap(),
        labels: (0..n).map(|i| (i % classes) as u16 + 1).collect(),
    }
}

/// Training-mode loss of the full model on one batch.
pub fn total_loss(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    table: &TextTable,
    direction: LossDirection,
) -> f64 {
    let (z, _) = model_forward(params, batch, Mode::Train).unwrap();
    alignment_loss(&z, &batch.labels, table, params.log_inv_tau(), direction)
        .unwrap()
        .loss
}

/// Analytic gradient of every learnable tensor, `log_inv_tau` included.
pub fn analytic_gradients(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    table: &TextTable,
    direction: LossDirection,
) -> ModelParams<f64> {
    let (z, cache) = model_forward(params, batch, Mode::Train).unwrap();
    let out = alignment_loss(&z, &batch.labels, table, params.log_inv_tau(), direction).unwrap();
    let mut grads = model_backward(params, &cache.unwrap(), &out.grad_z).unwrap();
    grads.log_inv_tau.data_mut()[0] = out.grad_log_inv_tau;
    grads
}

/// Finite-difference comparison of one tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub entries: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
    pub rel: f64,
    pub max_abs: f64,
    pub analytic_norm: f64,
}

/// Gradient magnitude treated as zero. Conv biases ahead of batch norm have
/// a vanishing gradient; their central differences are rounding of an O(1)
/// loss divided by `2h = 2e-6`, near 1e-10.
pub const ZERO_GRAD_ABS: f64 = 1e-8;

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        if self.analytic_norm < ZERO_GRAD_ABS {
            self.max_abs < ZERO_GRAD_ABS
        } else {
            self.rel < tol
        }
    }
}

pub fn norm_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn report(name: &str, analytic: &[f64], numeric: &[f64]) -> GradReport {
    GradReport {
        name: name.to_string(),
        entries: analytic.len(),
        rel: norm_relative_error(analytic, numeric),
        max_abs: analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max),
        analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
    }
}

/// Central differences with step `h` on every entry of every learnable tensor.
pub fn gradcheck(
    params: &ModelParams<f64>,
    batch: &Batch<f64>,
    table: &TextTable,
    direction: LossDirection,
    h: f64,
) -> Vec<GradReport> {
    let grads = analytic_gradients(params, batch, table, direction);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .learnable()
        .into_iter()
        .map(|(name, t)| (name, t.data().to_vec()))
        .collect();
    let mut probe = params.clone();
    let mut reports = Vec::new();
    for (slot, (name, g)) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..g.len())
            .map(|idx| {
                let orig = probe.learnable_mut()[slot].1.data()[idx];
                probe.learnable_mut()[slot].1.data_mut()[idx] = orig + h;
                let up = total_loss(&probe, batch, table, direction);
                probe.learnable_mut()[slot].1.data_mut()[idx] = orig - h;
                let down = total_loss(&probe, batch, table, direction);
                probe.learnable_mut()[slot].1.data_mut()[idx] = orig;
                (up - down) / (2.0 * h)
            })
            .collect();
        reports.push(report(name, g, &numeric));
    }
    reports
}

/// A small scene that trains in a couple of seconds.
pub fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 48,
        width: 48,
        classes: 4,
        bands: 6,
        cells: 6,
        train_pixels: 96,
        test_pixels: 200,
        noise_length: 12.0,
        seed,
        ..SynthConfig::default()
    }
}

pub fn small_scene(seed: u64) -> SceneDataset {
    generate_synthetic_scene(&small_synth(seed)).unwrap()
}

/// Narrow channel plans and a short run.
pub fn small_config() -> TrainConfig {
    TrainConfig {
        hsi_channels: [8, 8, 8],
        lidar_plan: [4, 4, 4],
        embed_dim: 32,
        batch_size: 32,
        max_epochs: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    }
}

pub fn small_config_f64() -> TrainConfig {
    TrainConfig {
        precision: Precision::F64,
        ..small_config()
    }
}

/// Textbook formulas on probabilities, written independently of the library.
pub struct Brute {
    pub oa: f64,
    pub aa: f64,
    pub kappa: Option<f64>,
}

pub fn brute_force(m: &[Vec<u64>]) -> Brute {
    let c = m.len();
    let n: f64 = m.iter().flatten().map(|&v| v as f64).sum();
    let mut po = 0.0;
    let mut pe = 0.0;
    let mut recalls = Vec::new();
    for (i, line) in m.iter().enumerate() {
        po += line[i] as f64 / n;
        let row: f64 = line.iter().map(|&v| v as f64).sum();
        let col: f64 = (0..c).map(|r| m[r][i] as f64).sum();
        pe += (row / n) * (col / n);
        if row > 0.0 {
            recalls.push(line[i] as f64 / row);
        }
    }
    Brute {
        oa: po,
        aa: recalls.iter().sum::<f64>() / recalls.len() as f64,
        kappa: (pe < 1.0).then(|| (po - pe) / (1.0 - pe)),
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<u64>> {
    let c = rng.random_range(2..=12);
    let diag_boost = rng.random_range(0..200);
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let base = rng.random_range(0..40u64);
                    if i == j {
                        base + diag_boost
                    } else if rng.random_bool(0.3) {
                        0
                    } else {
                        base
                    }
                })
                .collect()
        })
        .collect()
}
