//! Scene inference, confusion-matrix metrics and class-map rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{classify_batch, TextTable};
use crate::checkpoint::Checkpoint;
use crate::data::{write_file, Pixel, SceneDataset};
use crate::encoders::{model_forward, Batch, ModelParams};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::sampling::{extract_window, NormalizationStats, PatchPair};
use crate::scalar::Scalar;

/// Pixels classified per forward pass during inference.
pub const INFERENCE_BATCH: usize = 256;

/// Which fixed split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train or test)"
            ))),
        }
    }
}

/// `C×C` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    /// Records one sample; classes are 1-based.
    pub fn add(&mut self, truth: u16, predicted: u16) {
        let (t, p) = (truth as usize - 1, predicted as usize - 1);
        self.counts[t * self.classes + p] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Count at 0-based `(truth, predicted)`.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.classes.max(1))
            .map(<[u64]>::to_vec)
            .collect()
    }
}

fn require_samples(cm: &ConfusionMatrix) -> Result<u64> {
    match cm.total() {
        0 => Err(Error::Config("no samples were evaluated".into())),
        n => Ok(n),
    }
}

pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = require_samples(cm)?;
    Ok(cm.trace() as f64 / n as f64)
}

/// Recall per class; NaN for classes with no ground-truth samples.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes())
        .map(|c| match cm.row_sum(c) {
            0 => f64::NAN,
            r => cm.get(c, c) as f64 / r as f64,
        })
        .collect()
}

/// Mean of the per-class accuracies over classes present in the split.
pub fn average_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    require_samples(cm)?;
    let present: Vec<f64> = per_class_accuracy(cm)
        .into_iter()
        .filter(|v| !v.is_nan())
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Cohen's κ, computed as `(N·trace − Σ r·c) / (N² − Σ r·c)` in exact
/// integer arithmetic followed by one rounding division.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = require_samples(cm)? as u128;
    let chance: u128 = (0..cm.classes())
        .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
        .sum();
    let denom = n * n - chance;
    if denom == 0 {
        return Err(Error::Degenerate(
            "chance agreement is 1; kappa is undefined".into(),
        ));
    }
    let num = (n * cm.trace() as u128) as i128 - chance as i128;
    Ok(num as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub split: Split,
    pub total: u64,
    /// Ground-truth samples per class.
    pub per_class: Vec<u64>,
}

/// Metrics for one split. `per_class` holds `null` for classes absent from
/// the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub counts: EvalCounts,
    pub config_digest: String,
}

impl EvalReport {
    pub fn from_confusion(
        cm: &ConfusionMatrix,
        split: Split,
        config_digest: &[u8; 32],
    ) -> Result<Self> {
        let per_class = per_class_accuracy(cm);
        for (c, v) in per_class.iter().enumerate() {
            if v.is_nan() {
                log::warn!("class {} has no samples in the {split:?} split", c + 1);
            }
        }
        Ok(Self {
            confusion: cm.rows(),
            per_class: per_class
                .iter()
                .map(|v| (!v.is_nan()).then_some(*v))
                .collect(),
            oa: overall_accuracy(cm)?,
            aa: average_accuracy(cm)?,
            kappa: kappa(cm)?,
            counts: EvalCounts {
                split,
                total: cm.total(),
                per_class: (0..cm.classes()).map(|c| cm.row_sum(c)).collect(),
            },
            config_digest: hex::encode(config_digest),
        })
    }

    /// Per-class accuracy rows followed by OA, AA and κ, in percent.
    pub fn render_table(&self, class_names: &[String]) -> String {
        let width = class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = String::new();
        for (c, acc) in self.per_class.iter().enumerate() {
            let name = class_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("{}", c + 1));
            let cell = acc.map_or_else(|| "n/a".to_string(), |a| format!("{:.2}", a * 100.0));
            let _ = writeln!(out, "{name:<width$}  {cell:>6}");
        }
        let _ = writeln!(out, "{:<width$}  {:>6.2}", "OA", self.oa * 100.0);
        let _ = writeln!(out, "{:<width$}  {:>6.2}", "AA", self.aa * 100.0);
        let _ = writeln!(out, "{:<width$}  {:>6.2}", "kappa", self.kappa * 100.0);
        out
    }
}

fn check_compatible<T: Scalar>(
    scene: &SceneDataset,
    params: &ModelParams<T>,
    stats: &NormalizationStats,
    table: &TextTable,
) -> Result<()> {
    let arch = &params.arch;
    if arch.bands != scene.cube.bands() || arch.lidar_channels != scene.lidar.channels() {
        return Err(Error::Config(format!(
            "model expects {} bands / {} lidar channels, scene has {} / {}",
            arch.bands,
            arch.lidar_channels,
            scene.cube.bands(),
            scene.lidar.channels()
        )));
    }
    if stats.bands() != arch.bands || stats.lidar_channels() != arch.lidar_channels {
        return Err(Error::Config(
            "normalization statistics do not match the model".into(),
        ));
    }
    table.check_compatible(arch.embed_dim, scene.class_count())
}

/// Predicted class (1-based) for each listed pixel, in order. Centers need
/// not be labeled.
pub fn predict_pixels<T: Scalar>(
    scene: &SceneDataset,
    params: &ModelParams<T>,
    stats: &NormalizationStats,
    table: &TextTable,
    pixels: &[Pixel],
) -> Result<Vec<u16>> {
    check_compatible(scene, params, stats, table)?;
    let size = params.arch.patch_size;
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(INFERENCE_BATCH) {
        let pairs: Vec<PatchPair> = chunk
            .iter()
            .map(|&p| extract_window(&scene.cube, &scene.lidar, stats, p, size))
            .collect::<Result<_>>()?;
        let refs: Vec<&PatchPair> = pairs.iter().collect();
        let batch = Batch::<T>::from_pairs(&refs)?;
        let (z, _) = model_forward(params, &batch, Mode::Eval)?;
        out.extend(classify_batch(&z, table)?);
    }
    Ok(out)
}

/// Classifies every pixel of `split` and summarizes the result.
pub fn evaluate<T: Scalar>(
    scene: &SceneDataset,
    checkpoint: &Checkpoint<T>,
    table: &TextTable,
    split: Split,
) -> Result<EvalReport> {
    let pixels = match split {
        Split::Train => &scene.train_indices,
        Split::Test => &scene.test_indices,
    };
    if pixels.is_empty() {
        return Err(Error::Config(format!("the {split:?} split is empty")));
    }
    let predicted = predict_pixels(scene, &checkpoint.params, &checkpoint.stats, table, pixels)?;
    let mut cm = ConfusionMatrix::new(scene.class_count());
    for (&p, &pred) in pixels.iter().zip(&predicted) {
        cm.add(scene.label(p), pred);
    }
    EvalReport::from_confusion(&cm, split, &checkpoint.config_digest)
}

/// Default colors; index 0 is unlabeled/background.
pub const DEFAULT_PALETTE: [[u8; 3]; 12] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
];

/// An RGB raster of predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    /// Row-major predicted class per pixel; 0 where masked.
    pub classes: Vec<u16>,
    /// Row-major RGB triples.
    pub rgb: Vec<u8>,
}

impl ClassMap {
    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_ppm())
    }
}

/// Classifies every pixel of the scene and colors it from `palette`. With
/// `mask_unlabeled`, pixels without ground truth are painted `palette[0]`.
pub fn render_class_map<T: Scalar>(
    scene: &SceneDataset,
    checkpoint: &Checkpoint<T>,
    table: &TextTable,
    palette: &[[u8; 3]],
    mask_unlabeled: bool,
) -> Result<ClassMap> {
    let c = scene.class_count();
    if palette.len() < c + 1 {
        return Err(Error::Config(format!(
            "palette has {} colors, {} classes need {}",
            palette.len(),
            c,
            c + 1
        )));
    }
    let (h, w) = (scene.height(), scene.width());
    let pixels: Vec<Pixel> = (0..h)
        .flat_map(|r| (0..w).map(move |col| (r, col)))
        .filter(|&p| !mask_unlabeled || scene.label(p) != 0)
        .collect();
    let predicted = predict_pixels(scene, &checkpoint.params, &checkpoint.stats, table, &pixels)?;
    let mut classes = vec![0u16; h * w];
    for (&(r, col), &k) in pixels.iter().zip(&predicted) {
        classes[r * w + col] = k;
    }
    let rgb = classes.iter().flat_map(|&k| palette[k as usize]).collect();
    Ok(ClassMap {
        height: h,
        width: w,
        classes,
        rgb,
    })
}
