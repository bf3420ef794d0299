//! Input normalization, patch extraction, batch scheduling and synthetic
//! scene generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ElevationRaster, HyperCube, LabelMap, Pixel, SceneDataset};
use crate::error::{Error, Result};

/// Floor applied to per-band standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-band z-score statistics estimated on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub cube_mean: Vec<f64>,
    pub cube_std: Vec<f64>,
    pub lidar_mean: Vec<f64>,
    pub lidar_std: Vec<f64>,
}

impl NormalizationStats {
    pub fn bands(&self) -> usize {
        self.cube_mean.len()
    }

    pub fn lidar_channels(&self) -> usize {
        self.lidar_mean.len()
    }
}

/// Welford accumulator, one lane per band.
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(lanes: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; lanes],
            m2: vec![0.0; lanes],
        }
    }

    fn push(&mut self, xs: &[f32]) {
        self.count += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(xs) {
            let x = x as f64;
            let delta = x - *m;
            *m += delta / self.count;
            *s += delta * (x - *m);
        }
    }

    fn finish(self) -> (Vec<f64>, Vec<f64>) {
        let count = self.count;
        let std = self
            .m2
            .iter()
            .map(|s| (s / count).sqrt().max(STD_FLOOR))
            .collect();
        (self.mean, std)
    }
}

/// Population mean/std per band over the training pixels.
pub fn compute_stats(scene: &SceneDataset) -> Result<NormalizationStats> {
    if scene.train_indices.is_empty() {
        return Err(Error::Config(
            "cannot compute normalization statistics: training split is empty".into(),
        ));
    }
    let mut cube = Moments::new(scene.cube.bands());
    let mut lidar = Moments::new(scene.lidar.channels());
    for &(r, c) in &scene.train_indices {
        cube.push(scene.cube.pixel(r, c));
        lidar.push(scene.lidar.pixel(r, c));
    }
    let (cube_mean, cube_std) = cube.finish();
    let (lidar_mean, lidar_std) = lidar.finish();
    Ok(NormalizationStats {
        cube_mean,
        cube_std,
        lidar_mean,
        lidar_std,
    })
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge:
/// `-1 -> 1`, `n -> n - 2`.
pub fn reflect(index: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = index.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// One training/evaluation sample: normalized patches around a center pixel.
///
/// Patches are band-major: `hsi[b * size * size + i * size + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub hsi: Vec<f32>,
    pub lidar: Vec<f32>,
    pub label: u16,
    pub origin: Pixel,
    pub bands: usize,
    pub lidar_channels: usize,
    pub size: usize,
}

fn check_patch_size(size: usize) -> Result<()> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::Config(format!("patch size must be odd, got {size}")));
    }
    Ok(())
}

/// Extracts the normalized window around a labeled center pixel.
pub fn extract_patch(
    scene: &SceneDataset,
    stats: &NormalizationStats,
    center: Pixel,
    size: usize,
) -> Result<PatchPair> {
    check_patch_size(size)?;
    let (r, c) = center;
    if r >= scene.height() || c >= scene.width() {
        return Err(Error::Sampling(format!(
            "center ({r}, {c}) lies outside the scene"
        )));
    }
    let label = scene.label(center);
    if label == 0 {
        return Err(Error::Sampling(format!(
            "center ({r}, {c}) is an unlabeled pixel"
        )));
    }
    let mut pair = extract_window(&scene.cube, &scene.lidar, stats, center, size)?;
    pair.label = label;
    Ok(pair)
}

/// Like [`extract_patch`] but accepts any center; the label is left at 0.
pub fn extract_window(
    cube: &HyperCube,
    lidar: &ElevationRaster,
    stats: &NormalizationStats,
    center: Pixel,
    size: usize,
) -> Result<PatchPair> {
    check_patch_size(size)?;
    if stats.bands() != cube.bands() || stats.lidar_channels() != lidar.channels() {
        return Err(Error::Shape(format!(
            "normalization stats cover {} bands / {} lidar channels, scene has {} / {}",
            stats.bands(),
            stats.lidar_channels(),
            cube.bands(),
            lidar.channels()
        )));
    }
    let half = (size / 2) as isize;
    let (h, w) = (cube.height(), cube.width());
    let (b, l) = (cube.bands(), lidar.channels());
    let area = size * size;
    let mut hsi = vec![0.0f32; b * area];
    let mut elev = vec![0.0f32; l * area];
    for i in 0..size {
        let row = reflect(center.0 as isize + i as isize - half, h);
        for j in 0..size {
            let col = reflect(center.1 as isize + j as isize - half, w);
            let offset = i * size + j;
            for (band, &v) in cube.pixel(row, col).iter().enumerate() {
                hsi[band * area + offset] =
                    ((v as f64 - stats.cube_mean[band]) / stats.cube_std[band]) as f32;
            }
            for (ch, &v) in lidar.pixel(row, col).iter().enumerate() {
                elev[ch * area + offset] =
                    ((v as f64 - stats.lidar_mean[ch]) / stats.lidar_std[ch]) as f32;
            }
        }
    }
    Ok(PatchPair {
        hsi,
        lidar: elev,
        label: 0,
        origin: center,
        bands: b,
        lidar_channels: l,
        size,
    })
}

/// Extracts patches for every listed pixel.
pub fn extract_all(
    scene: &SceneDataset,
    stats: &NormalizationStats,
    pixels: &[Pixel],
    size: usize,
) -> Result<Vec<PatchPair>> {
    pixels
        .iter()
        .map(|&p| extract_patch(scene, stats, p, size))
        .collect()
}

// ---------------------------------------------------------------------------
// batching

/// How samples are grouped into mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    /// Interleave classes round-robin so every batch is near class-balanced.
    pub class_balanced: bool,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub const BYTES: usize = 32 + 8 + 16;

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTES);
        out.extend_from_slice(&self.seed);
        out.extend_from_slice(&self.stream.to_le_bytes());
        out.extend_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != Self::BYTES {
            return Err(Error::Format(format!(
                "rng state blob must be {} bytes, got {}",
                Self::BYTES,
                bytes.len()
            )));
        }
        Ok(Self {
            seed: bytes[..32].try_into().unwrap(),
            stream: u64::from_le_bytes(bytes[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(bytes[40..56].try_into().unwrap()),
        })
    }
}

/// Stateful epoch generator for a [`BatchPlan`].
#[derive(Debug, Clone)]
pub struct BatchSchedule {
    plan: BatchPlan,
    rng: ChaCha8Rng,
}

impl BatchSchedule {
    pub fn new(plan: BatchPlan) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        // stream 0 is used for parameter init
        rng.set_stream(1);
        Self { plan, rng }
    }

    pub fn resume(plan: BatchPlan, state: RngState) -> Self {
        Self {
            plan,
            rng: state.restore(),
        }
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Index batches for the next epoch. `labels[i]` is the class of sample `i`.
    pub fn next_epoch(&mut self, labels: &[u16]) -> Vec<Vec<usize>> {
        let n = labels.len();
        let order: Vec<usize> = if self.plan.class_balanced {
            let classes = labels.iter().copied().max().unwrap_or(0) as usize;
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes + 1];
            for (i, &l) in labels.iter().enumerate() {
                per_class[l as usize].push(i);
            }
            for bucket in per_class.iter_mut() {
                bucket.shuffle(&mut self.rng);
            }
            let mut order = Vec::with_capacity(n);
            let mut cursor = vec![0usize; per_class.len()];
            while order.len() < n {
                for (k, bucket) in per_class.iter().enumerate() {
                    if cursor[k] < bucket.len() {
                        order.push(bucket[cursor[k]]);
                        cursor[k] += 1;
                    }
                }
            }
            order
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            order
        };
        order
            .chunks(self.plan.batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

/// Runs `epochs` epochs of the plan over `pairs`, returning every batch in order.
pub fn iterate_batches<'a>(
    pairs: &'a [PatchPair],
    plan: &BatchPlan,
    epochs: usize,
) -> Vec<Vec<&'a PatchPair>> {
    let labels: Vec<u16> = pairs.iter().map(|p| p.label).collect();
    let mut schedule = BatchSchedule::new(*plan);
    let mut out = Vec::new();
    for _ in 0..epochs {
        for batch in schedule.next_epoch(&labels) {
            out.push(batch.into_iter().map(|i| &pairs[i]).collect());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// synthetic scenes

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub lidar_channels: usize,
    pub train_pixels: usize,
    pub test_pixels: usize,
    /// Per-band spectral noise σ.
    pub noise: f64,
    /// Fraction of the spectral noise variance that is spatially smooth.
    pub correlated_noise: f64,
    /// Correlation length of the smooth noise component, in pixels.
    pub noise_length: f64,
    /// Minimum distance between class means, in units of σ.
    pub separation: f64,
    /// Distance between the last two class means, in units of σ. LiDAR
    /// elevation tells these two apart.
    pub close_pair_separation: f64,
    /// Elevation noise in meters.
    pub lidar_noise: f64,
    /// Number of Voronoi cells the scene is tiled with.
    pub cells: usize,
    /// Fraction of cells left unlabeled.
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            height: 128,
            width: 128,
            bands: 16,
            lidar_channels: 1,
            train_pixels: 600,
            test_pixels: 3000,
            noise: 1.0,
            correlated_noise: 0.9,
            noise_length: 32.0,
            separation: 8.0,
            close_pair_separation: 4.0,
            lidar_noise: 1.5,
            cells: 12,
            unlabeled_fraction: 0.125,
            seed: 7,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class `c` mean elevation (meters above terrain). Classes are paired up so
/// elevation alone cannot separate every class; the last two classes get
/// distinct heights.
fn class_height(class: usize, classes: usize) -> f64 {
    if classes >= 3 && class + 2 >= classes {
        // zero-based class index; last two
        30.0 + 15.0 * (class + 2 - classes) as f64
    } else {
        10.0 * (class / 2) as f64
    }
}

/// Builds a deterministic scene of Voronoi regions. Spectra of class `c` have
/// mean `mu_c` and per-band noise variance `noise²`, split between white noise
/// and a spatially smooth field; elevation is a smooth terrain plus a
/// class-specific height.
pub fn generate_synthetic_scene(cfg: &SynthConfig) -> Result<SceneDataset> {
    if cfg.classes < 2 {
        return Err(Error::Config(
            "synthetic scene needs at least 2 classes".into(),
        ));
    }
    if !(1..=2).contains(&cfg.lidar_channels) {
        return Err(Error::Config("lidar_channels must be 1 or 2".into()));
    }
    if cfg.bands == 0 || cfg.height == 0 || cfg.width == 0 {
        return Err(Error::Config(
            "synthetic scene dimensions must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.correlated_noise)
        || !cfg.noise_length.is_finite()
        || cfg.noise_length <= 0.0
    {
        return Err(Error::Config(
            "correlated_noise must lie in [0, 1] and noise_length must be positive".into(),
        ));
    }
    if cfg.separation < 4.0 || cfg.close_pair_separation < 4.0 {
        return Err(Error::Config(
            "class means must be separated by at least 4σ".into(),
        ));
    }
    let unlabeled_cells = ((cfg.cells as f64) * cfg.unlabeled_fraction).round() as usize;
    if cfg.cells < cfg.classes + unlabeled_cells {
        return Err(Error::Config(format!(
            "{} cells cannot hold {} classes plus {unlabeled_cells} unlabeled cells",
            cfg.cells, cfg.classes
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, b, c) = (cfg.height, cfg.width, cfg.bands, cfg.classes);
    let sigma = cfg.noise;
    // spacing unit for the class means; stays positive in the noiseless limit
    let unit = if sigma > 0.0 { sigma } else { 1.0 };

    // Class means: rejection-sample well-separated points, then place the last
    // class close to the second-to-last one.
    let radius = cfg.separation * (c as f64).sqrt() / (b as f64).sqrt().max(1.0) + cfg.separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0usize;
    let far_classes = if c >= 3 { c - 1 } else { c };
    while means.len() < far_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(
                "could not place separated class means; raise bands or lower separation".into(),
            ));
        }
        let candidate: Vec<f64> = (0..b).map(|_| radius * gaussian(&mut rng) * unit).collect();
        let far_enough = means
            .iter()
            .all(|m| euclid(m, &candidate) >= cfg.separation * unit);
        if far_enough {
            means.push(candidate);
        }
    }
    if c >= 3 {
        loop {
            attempts += 1;
            if attempts > 200_000 {
                return Err(Error::Config("could not place close class pair".into()));
            }
            let dir: Vec<f64> = (0..b).map(|_| gaussian(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let anchor = &means[c - 2];
            let candidate: Vec<f64> = anchor
                .iter()
                .zip(&dir)
                .map(|(a, d)| a + cfg.close_pair_separation * unit * d / norm)
                .collect();
            let far_enough = means[..c - 2]
                .iter()
                .all(|m| euclid(m, &candidate) >= cfg.separation * unit);
            if far_enough {
                means.push(candidate);
                break;
            }
        }
    }

    // Voronoi layout; retried until every class has enough pixels.
    let train_per_class = cfg.train_pixels.div_ceil(c);
    let labels = loop {
        attempts += 1;
        if attempts > 300_000 {
            return Err(Error::Config(
                "could not lay out a scene with enough pixels per class".into(),
            ));
        }
        let seeds: Vec<(f64, f64)> = (0..cfg.cells)
            .map(|_| {
                (
                    rng.random::<f64>() * h as f64,
                    rng.random::<f64>() * w as f64,
                )
            })
            .collect();
        let mut cell_class: Vec<u16> = (0..cfg.cells)
            .map(|i| {
                if i < cfg.cells - unlabeled_cells {
                    (i % c) as u16 + 1
                } else {
                    0
                }
            })
            .collect();
        cell_class.shuffle(&mut rng);
        let mut labels = vec![0u16; h * w];
        for r in 0..h {
            for col in 0..w {
                let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
                let nearest = seeds
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, (s.0 - y).powi(2) + (s.1 - x).powi(2)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                labels[r * w + col] = cell_class[nearest];
            }
        }
        let mut counts = vec![0usize; c + 1];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        let labeled: usize = counts[1..].iter().sum();
        let enough = counts[1..].iter().all(|&k| k >= 2 * train_per_class)
            && labeled >= cfg.train_pixels + cfg.test_pixels;
        if enough {
            break labels;
        }
    };

    // Smooth terrain shared by all classes.
    let (fy, fx, phase) = (
        rng.random::<f64>() * 0.1 + 0.02,
        rng.random::<f64>() * 0.1 + 0.02,
        rng.random::<f64>() * std::f64::consts::TAU,
    );
    let terrain =
        |r: usize, col: usize| 5.0 * ((r as f64 * fy + phase).sin() + (col as f64 * fx).cos());

    // Smooth unit-variance noise field per band: random Fourier features.
    const FEATURES: usize = 16;
    let fields: Vec<Vec<(f64, f64, f64)>> = (0..b)
        .map(|_| {
            (0..FEATURES)
                .map(|_| {
                    let angle = rng.random::<f64>() * std::f64::consts::TAU;
                    let freq =
                        std::f64::consts::TAU / cfg.noise_length * (0.5 + rng.random::<f64>());
                    let phase = rng.random::<f64>() * std::f64::consts::TAU;
                    (freq * angle.cos(), freq * angle.sin(), phase)
                })
                .collect()
        })
        .collect();
    let amp = (2.0 / FEATURES as f64).sqrt();
    let smooth = |band: usize, r: usize, col: usize| {
        amp * fields[band]
            .iter()
            .map(|&(fy, fx, ph)| (fy * r as f64 + fx * col as f64 + ph).cos())
            .sum::<f64>()
    };
    let white = sigma * (1.0 - cfg.correlated_noise).sqrt();
    let tinted = sigma * cfg.correlated_noise.sqrt();

    let mut cube_values = Vec::with_capacity(h * w * b);
    let mut lidar_values = Vec::with_capacity(h * w * cfg.lidar_channels);
    // unlabeled background: its own spectral mean and ground level
    let background: Vec<f64> = (0..b)
        .map(|_| radius * 0.5 * gaussian(&mut rng) * unit)
        .collect();
    for r in 0..h {
        for col in 0..w {
            let label = labels[r * w + col];
            let mean = if label == 0 {
                &background
            } else {
                &means[label as usize - 1]
            };
            for (band, m) in mean.iter().enumerate() {
                let noise = white * gaussian(&mut rng) + tinted * smooth(band, r, col);
                cube_values.push((m + noise) as f32);
            }
            let ground = terrain(r, col);
            let height = if label == 0 {
                0.0
            } else {
                class_height(label as usize - 1, c)
            };
            let dsm = ground + height + cfg.lidar_noise * gaussian(&mut rng);
            lidar_values.push(dsm as f32);
            if cfg.lidar_channels == 2 {
                let dtm = ground + 0.25 * cfg.lidar_noise * gaussian(&mut rng);
                lidar_values.push(dtm as f32);
            }
        }
    }

    // Stratified training split, uniform test split from the remainder.
    let mut by_class: Vec<Vec<Pixel>> = vec![Vec::new(); c + 1];
    for r in 0..h {
        for col in 0..w {
            by_class[labels[r * w + col] as usize].push((r, col));
        }
    }
    let mut train = Vec::with_capacity(cfg.train_pixels);
    let mut rest = Vec::new();
    for (k, pixels) in by_class.iter_mut().enumerate().skip(1) {
        pixels.shuffle(&mut rng);
        let quota = cfg.train_pixels / c + usize::from(k - 1 < cfg.train_pixels % c);
        train.extend_from_slice(&pixels[..quota]);
        rest.extend_from_slice(&pixels[quota..]);
    }
    rest.shuffle(&mut rng);
    let mut test: Vec<Pixel> = rest[..cfg.test_pixels].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    let cube = HyperCube::new(h, w, b, cube_values)?;
    let lidar = ElevationRaster::new(h, w, cfg.lidar_channels, lidar_values)?;
    let label_map = LabelMap::new(h, w, c, labels)?;
    SceneDataset::new(cube, lidar, label_map, train, test)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
