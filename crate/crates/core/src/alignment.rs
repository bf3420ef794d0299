//! Visual/text alignment: the class-prompt embedding table, cosine
//! similarities scaled by a learnable inverse temperature, and the
//! bidirectional InfoNCE objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    put_str, put_u32, read_file, read_prefix, write_file, ByteReader, FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};
use crate::tensor::Tensor;

pub const TEXT_MAGIC: &[u8; 4] = b"MMTE";
pub const DEFAULT_TEMPLATE: &str = "the hyperspectral patch of [CLS]";
/// Upper bound on the logit scale `exp(log_inv_tau)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Largest `log_inv_tau` representable in `T` whose exponential does not
/// exceed [`MAX_LOGIT_SCALE`].
pub fn max_log_inv_tau<T: Scalar>() -> T {
    let mut c = T::from_f64(MAX_LOGIT_SCALE.ln());
    while c.as_f64().exp() > MAX_LOGIT_SCALE {
        c = c.next_below();
    }
    c
}

/// Frozen class-prompt embeddings, one row per class in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTable {
    template: String,
    names: Vec<String>,
    dim: usize,
    /// Rows as stored on disk.
    raw: Vec<f32>,
    /// Unit-norm rows used for similarity.
    unit: Vec<f64>,
}

impl TextTable {
    pub fn new(
        template: impl Into<String>,
        names: Vec<String>,
        dim: usize,
        raw: Vec<f32>,
    ) -> Result<Self> {
        if names.is_empty() || dim == 0 {
            return Err(Error::Data(
                "text table needs at least one class and D > 0".into(),
            ));
        }
        if raw.len() != names.len() * dim {
            return Err(Error::Data(format!(
                "text table holds {} values, expected {}×{dim}",
                raw.len(),
                names.len()
            )));
        }
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "text embedding value at index {i} is not finite"
            )));
        }
        let mut unit = Vec::with_capacity(raw.len());
        for (c, row) in raw.chunks(dim).enumerate() {
            let row64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let normed = l2_normalize(&row64).map_err(|_| {
                Error::Data(format!(
                    "text embedding for class {} is the zero vector",
                    c + 1
                ))
            })?;
            unit.extend(normed);
        }
        Ok(Self {
            template: template.into(),
            names,
            dim,
            raw,
            unit,
        })
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn template(&self) -> &str {
        &self.template
    }
    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn raw(&self) -> &[f32] {
        &self.raw
    }

    /// Unit-norm embedding of class `class` (1-based).
    pub fn unit_row(&self, class: usize) -> &[f64] {
        &self.unit[(class - 1) * self.dim..class * self.dim]
    }

    /// Checks the table against the model's embedding width and the scene's
    /// class count.
    pub fn check_compatible(&self, embed_dim: usize, classes: usize) -> Result<()> {
        if self.dim != embed_dim {
            return Err(Error::Config(format!(
                "text table has D = {}, model expects {embed_dim}",
                self.dim
            )));
        }
        if self.class_count() != classes {
            return Err(Error::Config(format!(
                "text table has {} classes, labels declare {classes}",
                self.class_count()
            )));
        }
        Ok(())
    }
}

/// Header fields of an MMTE file.
#[derive(Debug, Clone, PartialEq)]
pub struct TextHeader {
    pub class_count: u32,
    pub dim: u32,
    pub template: String,
    pub names: Vec<String>,
}

/// Reads an MMTE table and L2-normalizes its rows. When `expected_dim` is
/// given, a different `D` is a config error.
pub fn load_text_table(path: &Path, expected_dim: Option<usize>) -> Result<TextTable> {
    let bytes = read_file(path)?;
    let what = path.display().to_string();
    let mut r = ByteReader::new(&bytes, &what);
    r.expect_magic(TEXT_MAGIC)?;
    r.expect_version()?;
    let c = r.u32()? as usize;
    let d = r.u32()? as usize;
    if let Some(expected) = expected_dim {
        if d != expected {
            return Err(Error::Config(format!(
                "{what}: text embeddings have D = {d}, expected {expected}"
            )));
        }
    }
    let template = r.string()?;
    let mut names = Vec::with_capacity(c);
    let mut raw = Vec::with_capacity(c * d);
    for _ in 0..c {
        names.push(r.string()?);
        let payload = r.take(d * 4)?;
        raw.extend(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
        );
    }
    r.finish()?;
    TextTable::new(template, names, d, raw)
}

pub fn write_text_table(table: &TextTable, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + table.raw.len() * 4);
    out.extend_from_slice(TEXT_MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, table.class_count() as u32);
    put_u32(&mut out, table.dim as u32);
    put_str(&mut out, &table.template);
    for (name, row) in table.names.iter().zip(table.raw.chunks(table.dim)) {
        put_str(&mut out, name);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_file(path, &out)
}

/// Reads the MMTE header and class names, skipping the embedding payloads.
pub fn read_text_header(path: &Path) -> Result<TextHeader> {
    use std::io::{Read, Seek, SeekFrom};
    let what = path.display().to_string();
    let head = read_prefix(path, 16)?;
    let mut r = ByteReader::new(&head, &what);
    r.expect_magic(TEXT_MAGIC)?;
    r.expect_version()?;
    let class_count = r.u32()?;
    let dim = r.u32()?;
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    file.seek(SeekFrom::Start(16))
        .map_err(|e| Error::io(path, e))?;
    let read_string = |file: &mut std::fs::File| -> Result<String> {
        let mut len = [0u8; 4];
        file.read_exact(&mut len)
            .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
        let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
        file.read_exact(&mut buf)
            .map_err(|_| Error::Format(format!("{what}: truncated header")))?;
        String::from_utf8(buf).map_err(|_| Error::Format(format!("{what}: invalid UTF-8")))
    };
    let template = read_string(&mut file)?;
    let mut names = Vec::with_capacity(class_count as usize);
    for _ in 0..class_count {
        names.push(read_string(&mut file)?);
        file.seek(SeekFrom::Current(dim as i64 * 4))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(TextHeader {
        class_count,
        dim,
        template,
        names,
    })
}

/// `z / ‖z‖₂`. A zero vector signals a collapsed embedding.
pub fn l2_normalize<T: Scalar>(z: &[T]) -> Result<Vec<T>> {
    let norm = z.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !norm.is_finite() || norm <= T::zero() {
        return Err(Error::Numerical(format!(
            "cannot normalize an embedding with norm {norm}"
        )));
    }
    Ok(z.iter().map(|&v| v / norm).collect())
}

/// Learnable inverse temperature, stored as `ln(1/τ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature {
    pub log_inv_tau: f64,
}

impl Temperature {
    pub fn scale(&self) -> f64 {
        self.log_inv_tau.exp().min(MAX_LOGIT_SCALE)
    }
}

/// Contrastive objective variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LossDirection {
    /// Rows of S: each visual sample picks its text.
    #[serde(rename = "v2t")]
    VisualToText,
    /// Columns of S: each text picks its visual sample.
    #[serde(rename = "t2v")]
    TextToVisual,
    #[default]
    #[serde(rename = "sym")]
    Symmetric,
}

impl std::str::FromStr for LossDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "v2t" => Ok(Self::VisualToText),
            "t2v" => Ok(Self::TextToVisual),
            "sym" | "symmetric" => Ok(Self::Symmetric),
            other => Err(Error::Config(format!(
                "unknown loss direction {other:?} (expected v2t, t2v or sym)"
            ))),
        }
    }
}

/// `S[i][j] = scale · cos(z_v,i, z_t,label_j)`, row-major `n×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub n: usize,
    pub values: Vec<T>,
    pub scale: T,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_values(n: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!(
                "similarity matrix needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(Self {
            n,
            values,
            scale: T::one(),
        })
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }
}

fn text_rows<T: Scalar>(table: &TextTable, labels: &[u16]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(labels.len() * table.dim);
    for &l in labels {
        if l == 0 || l as usize > table.class_count() {
            return Err(Error::Data(format!(
                "label {l} outside 1..={}",
                table.class_count()
            )));
        }
        out.extend(table.unit_row(l as usize).iter().map(|&v| T::from_f64(v)));
    }
    Ok(out)
}

fn normalize_rows<T: Scalar>(rows: &[T], dim: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut unit = Vec::with_capacity(rows.len());
    let mut norms = Vec::with_capacity(rows.len() / dim.max(1));
    for (i, row) in rows.chunks(dim).enumerate() {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !norm.is_finite() || norm <= T::zero() {
            return Err(Error::Numerical(format!(
                "visual embedding {i} has norm {norm}; the encoder output collapsed"
            )));
        }
        unit.extend(row.iter().map(|&v| v / norm));
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Similarity of each visual row (`n×D`) against the text embedding of every
/// sample's label in the batch.
pub fn similarity<T: Scalar>(
    z_v: &[T],
    table: &TextTable,
    labels: &[u16],
    temp: Temperature,
) -> Result<SimilarityMatrix<T>> {
    let n = labels.len();
    let d = table.dim;
    if z_v.len() != n * d {
        return Err(Error::Shape(format!(
            "expected {n}×{d} visual embeddings, got {} values",
            z_v.len()
        )));
    }
    let text = text_rows::<T>(table, labels)?;
    let (unit, _) = normalize_rows(z_v, d)?;
    let scale = T::from_f64(temp.scale());
    let mut values = vec![T::zero(); n * n];
    gemm(
        Op::N,
        Op::T,
        n,
        n,
        d,
        scale,
        &unit,
        &text,
        T::zero(),
        &mut values,
    );
    Ok(SimilarityMatrix { n, values, scale })
}

/// Mean cross-entropy of the diagonal over rows (`by_rows`) or columns, and
/// its gradient with respect to `S`.
fn directional_loss<T: Scalar>(s: &SimilarityMatrix<T>, by_rows: bool) -> (T, Vec<T>) {
    let n = s.n;
    let at = |line: usize, k: usize| {
        if by_rows {
            s.values[line * n + k]
        } else {
            s.values[k * n + line]
        }
    };
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * n];
    let mut probs = vec![T::zero(); n];
    for line in 0..n {
        let max = (0..n).map(|k| at(line, k)).fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (k, p) in probs.iter_mut().enumerate() {
            *p = (at(line, k) - max).exp();
            sum += *p;
        }
        // -log softmax at the diagonal: (max - S_dd) + ln Σ exp(S - max)
        loss += (max - at(line, line)) + sum.ln();
        for (k, p) in probs.iter().enumerate() {
            let mut g = *p / sum;
            if k == line {
                g -= T::one();
            }
            let idx = if by_rows { line * n + k } else { k * n + line };
            grad[idx] = g * inv_n;
        }
    }
    (loss * inv_n, grad)
}

/// Loss and exact `dL/dS` for the chosen direction.
pub fn contrastive_loss<T: Scalar>(
    s: &SimilarityMatrix<T>,
    direction: LossDirection,
) -> Result<(T, Vec<T>)> {
    if s.n == 0 {
        return Err(Error::Shape(
            "contrastive loss needs at least one sample".into(),
        ));
    }
    if s.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "similarity matrix has non-finite entries".into(),
        ));
    }
    Ok(match direction {
        LossDirection::VisualToText => directional_loss(s, true),
        LossDirection::TextToVisual => directional_loss(s, false),
        LossDirection::Symmetric => {
            let (a, ga) = directional_loss(s, true);
            let (b, gb) = directional_loss(s, false);
            let half = T::from_f64(0.5);
            let grad = ga.iter().zip(&gb).map(|(&x, &y)| (x + y) * half).collect();
            ((a + b) * half, grad)
        }
    })
}

/// Result of [`alignment_loss`].
#[derive(Debug, Clone)]
pub struct AlignmentOutput<T> {
    pub loss: T,
    /// `dL/dz_v`, `[D, n]`.
    pub grad_z: Tensor<T>,
    pub grad_log_inv_tau: T,
    pub similarity: SimilarityMatrix<T>,
}

/// Full alignment head on encoder output `z_v` laid out `[D, n]`: normalize,
/// score against the batch's text rows, contrastive loss, and backward to
/// both `z_v` and `ln(1/τ)`.
pub fn alignment_loss<T: Scalar>(
    z: &Tensor<T>,
    labels: &[u16],
    table: &TextTable,
    log_inv_tau: T,
    direction: LossDirection,
) -> Result<AlignmentOutput<T>> {
    let d = table.dim;
    let n = labels.len();
    z.expect_shape(&[d, n], "visual embedding batch")?;
    // [D, n] -> [n, D]
    let mut rows = vec![T::zero(); n * d];
    for f in 0..d {
        for i in 0..n {
            rows[i * d + f] = z.data()[f * n + i];
        }
    }
    let (unit, norms) = normalize_rows(&rows, d)?;
    let text = text_rows::<T>(table, labels)?;
    let scale = log_inv_tau.exp();
    let mut values = vec![T::zero(); n * n];
    gemm(
        Op::N,
        Op::T,
        n,
        n,
        d,
        scale,
        &unit,
        &text,
        T::zero(),
        &mut values,
    );
    let sim = SimilarityMatrix { n, values, scale };
    let (loss, ds) = contrastive_loss(&sim, direction)?;

    // S = scale · U Tᵀ; dS/d(ln scale) = S
    let grad_log_inv_tau = ds.iter().zip(&sim.values).map(|(&g, &s)| g * s).sum::<T>();
    let mut d_unit = vec![T::zero(); n * d];
    gemm(
        Op::N,
        Op::N,
        n,
        d,
        n,
        scale,
        &ds,
        &text,
        T::zero(),
        &mut d_unit,
    );
    let mut grad = vec![T::zero(); d * n];
    for i in 0..n {
        let u = &unit[i * d..(i + 1) * d];
        let du = &d_unit[i * d..(i + 1) * d];
        let dot = u.iter().zip(du).map(|(&a, &b)| a * b).sum::<T>();
        let inv = T::one() / norms[i];
        for f in 0..d {
            grad[f * n + i] = (du[f] - u[f] * dot) * inv;
        }
    }
    Ok(AlignmentOutput {
        loss,
        grad_z: Tensor::from_vec(&[d, n], grad)?,
        grad_log_inv_tau,
        similarity: sim,
    })
}

/// Nearest class by cosine similarity. Returns the 1-based class and the
/// per-class cosine scores; ties go to the lowest class index.
pub fn classify<T: Scalar>(z_v: &[T], table: &TextTable) -> Result<(usize, Vec<f64>)> {
    if z_v.len() != table.dim {
        return Err(Error::Shape(format!(
            "embedding has {} values, table D = {}",
            z_v.len(),
            table.dim
        )));
    }
    let z64: Vec<f64> = z_v.iter().map(|v| v.as_f64()).collect();
    let unit = l2_normalize(&z64)?;
    let scores: Vec<f64> = (1..=table.class_count())
        .map(|c| {
            table
                .unit_row(c)
                .iter()
                .zip(&unit)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    Ok((best + 1, scores))
}

/// [`classify`] over a `[D, n]` batch.
pub fn classify_batch<T: Scalar>(z: &Tensor<T>, table: &TextTable) -> Result<Vec<u16>> {
    let d = table.dim;
    let n = z.shape().get(1).copied().unwrap_or(0);
    z.expect_shape(&[d, n], "embedding batch")?;
    let mut col = vec![T::zero(); d];
    (0..n)
        .map(|i| {
            for (f, v) in col.iter_mut().enumerate() {
                *v = z.data()[f * n + i];
            }
            classify(&col, table).map(|(c, _)| c as u16)
        })
        .collect()
}

/// Largest pairwise |cos| allowed between rows of a generated table.
pub const SYNTHETIC_MAX_COSINE: f64 = 0.3;

/// Random near-orthogonal unit rows, one per class name. Rows are redrawn
/// until every pair satisfies [`SYNTHETIC_MAX_COSINE`].
pub fn random_text_table(names: Vec<String>, dim: usize, seed: u64) -> Result<TextTable> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    if names.is_empty() || dim == 0 {
        return Err(Error::Config("text table needs classes and D > 0".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    let mut attempts = 0usize;
    while rows.len() < names.len() {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "cannot place {} near-orthogonal rows in {dim} dimensions",
                names.len()
            )));
        }
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let unit = l2_normalize(&v)?;
        // rows are stored as f32; check the bound on the stored values
        let stored: Vec<f64> = unit.iter().map(|&x| x as f32 as f64).collect();
        let ok = rows.iter().all(|r| {
            let dot: f64 = r.iter().zip(&stored).map(|(a, b)| a * b).sum();
            let norms = (r.iter().map(|a| a * a).sum::<f64>()
                * stored.iter().map(|b| b * b).sum::<f64>())
            .sqrt();
            (dot / norms).abs() <= SYNTHETIC_MAX_COSINE
        });
        if ok {
            rows.push(stored);
        }
    }
    let raw = rows.iter().flatten().map(|&v| v as f32).collect();
    TextTable::new(DEFAULT_TEMPLATE, names, dim, raw)
}
