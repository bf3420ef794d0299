//! MMCK checkpoint files: model parameters, optimizer moments, loop state,
//! normalization statistics and the batch-order RNG position.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Seek, SeekFrom};
use std::path::Path;

use crate::data::{put_str, put_u32, read_file, write_file, ByteReader, FORMAT_VERSION};
use crate::encoders::{Arch, ModelParams};
use crate::error::{Error, Result};
use crate::sampling::{NormalizationStats, RngState};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::training::{EpochRecord, OptimizerState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";

/// Complete training state after some epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub optimizer: OptimizerState<T>,
    pub epoch: usize,
    /// Lowest monitored loss seen so far.
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub rng: RngState,
    pub config_digest: [u8; 32],
    pub stats: NormalizationStats,
    /// Per-epoch losses and logit scales. Wall times are not persisted.
    pub history: Vec<EpochRecord>,
}

/// A checkpoint of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

/// Metadata of a checkpoint, read without touching tensor payloads.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub precision: Precision,
    pub config_digest: [u8; 32],
    pub arch: Arch,
    pub epoch: u64,
    pub best_loss: f64,
    pub epochs_since_improvement: u64,
    pub adam_step: u64,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub precision: Precision,
    pub shape: Vec<usize>,
}

enum Payload<'a> {
    F32(Vec<usize>, &'a [u8]),
    F64(Vec<usize>, &'a [u8]),
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_str(out, name);
    out.push(T::PRECISION.code());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn f64_tensor(values: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(&[values.len()], values.to_vec()).expect("1-d tensor")
}

impl<T: Scalar> Checkpoint<T> {
    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Serialized bytes. Identical state always yields identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        out.push(T::PRECISION.code());
        out.extend_from_slice(&self.config_digest);
        put_str(
            &mut out,
            &serde_json::to_string(&self.params.arch).expect("arch serializes"),
        );
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.best_loss.to_le_bytes());
        out.extend_from_slice(&(self.epochs_since_improvement as u64).to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());

        let learnable = self.params.learnable();
        let buffers = self.params.buffers();
        let history = [
            (
                "history.train_loss",
                self.history
                    .iter()
                    .map(|r| r.train_loss)
                    .collect::<Vec<_>>(),
            ),
            (
                "history.val_loss",
                self.history
                    .iter()
                    .map(|r| r.val_loss.unwrap_or(f64::NAN))
                    .collect(),
            ),
            (
                "history.logit_scale",
                self.history.iter().map(|r| r.logit_scale).collect(),
            ),
        ];
        let stats = [
            ("stats.cube_mean", &self.stats.cube_mean),
            ("stats.cube_std", &self.stats.cube_std),
            ("stats.lidar_mean", &self.stats.lidar_mean),
            ("stats.lidar_std", &self.stats.lidar_std),
        ];
        let count = learnable.len() * 3 + buffers.len() + stats.len() + history.len();
        put_u32(&mut out, count as u32);
        for (name, t) in learnable.iter().chain(&buffers) {
            put_tensor(&mut out, name, t);
        }
        for (k, (name, _)) in learnable.iter().enumerate() {
            put_tensor(&mut out, &format!("adam.m.{name}"), &self.optimizer.m[k]);
            put_tensor(&mut out, &format!("adam.v.{name}"), &self.optimizer.v[k]);
        }
        for (name, values) in stats {
            put_tensor(&mut out, name, &f64_tensor(values));
        }
        for (name, values) in &history {
            put_tensor(&mut out, name, &f64_tensor(values));
        }
        out.extend_from_slice(&self.rng.to_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    /// Parses a checkpoint whose tensors are stored in precision `T`.
    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, what);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version()?;
        let code = r.u8()?;
        let precision = Precision::from_code(code)
            .ok_or_else(|| Error::Format(format!("{what}: unknown precision code {code}")))?;
        if precision != T::PRECISION {
            return Err(Error::Format(format!(
                "{what}: checkpoint holds {precision:?} parameters, expected {:?}",
                T::PRECISION
            )));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let arch: Arch = serde_json::from_str(&r.string()?)
            .map_err(|e| Error::Format(format!("{what}: bad architecture record: {e}")))?;
        arch.validate()
            .map_err(|e| Error::Format(format!("{what}: {e}")))?;
        let epoch = r.u64()? as usize;
        let best_loss = r.f64()?;
        let since = r.u64()? as usize;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors: BTreeMap<String, Payload> = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let code = r.u8()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let payload = match Precision::from_code(code) {
                Some(Precision::F32) => Payload::F32(shape, r.take(len * 4)?),
                Some(Precision::F64) => Payload::F64(shape, r.take(len * 8)?),
                None => {
                    return Err(Error::Format(format!(
                        "{what}: tensor {name} has unknown dtype {code}"
                    )))
                }
            };
            if tensors.insert(name.clone(), payload).is_some() {
                return Err(Error::Format(format!("{what}: duplicate tensor {name}")));
            }
        }
        let rng = RngState::from_bytes(r.take(RngState::BYTES)?)?;
        r.finish()?;

        let mut take = |name: &str, expected: Option<&[usize]>| -> Result<Payload> {
            let p = tensors
                .remove(name)
                .ok_or_else(|| Error::Format(format!("{what}: missing tensor {name}")))?;
            let shape = match &p {
                Payload::F32(s, _) | Payload::F64(s, _) => s,
            };
            if let Some(expected) = expected {
                if shape.as_slice() != expected {
                    return Err(Error::Format(format!(
                        "{what}: tensor {name} has shape {shape:?}, expected {expected:?}"
                    )));
                }
            }
            Ok(p)
        };
        let decode_t = |name: &str, p: Payload| -> Result<Vec<T>> {
            match p {
                Payload::F32(_, b) if T::PRECISION == Precision::F32 => {
                    Ok(b.chunks_exact(4).map(T::read_le).collect())
                }
                Payload::F64(_, b) if T::PRECISION == Precision::F64 => {
                    Ok(b.chunks_exact(8).map(T::read_le).collect())
                }
                _ => Err(Error::Format(format!(
                    "{what}: tensor {name} has the wrong dtype"
                ))),
            }
        };
        let decode_f64 = |name: &str, p: Payload| -> Result<Vec<f64>> {
            match p {
                Payload::F64(_, b) => Ok(b
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()),
                _ => Err(Error::Format(format!("{what}: tensor {name} must be f64"))),
            }
        };

        let mut params =
            ModelParams::<T>::init(&arch, 0).map_err(|e| Error::Format(format!("{what}: {e}")))?;
        for (name, t) in params.learnable_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::from_vec(&shape, decode_t(&name, take(&name, Some(&shape))?)?)?;
        }
        for (name, t) in params.buffers_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::from_vec(&shape, decode_t(&name, take(&name, Some(&shape))?)?)?;
        }
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in params.learnable() {
            let shape = t.shape().to_vec();
            for (prefix, dst) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                dst.push(Tensor::from_vec(
                    &shape,
                    decode_t(&key, take(&key, Some(&shape))?)?,
                )?);
            }
        }
        let mut stat = |name: &str, len: usize| -> Result<Vec<f64>> {
            decode_f64(name, take(name, Some(&[len]))?)
        };
        let stats = NormalizationStats {
            cube_mean: stat("stats.cube_mean", arch.bands)?,
            cube_std: stat("stats.cube_std", arch.bands)?,
            lidar_mean: stat("stats.lidar_mean", arch.lidar_channels)?,
            lidar_std: stat("stats.lidar_std", arch.lidar_channels)?,
        };
        let mut series = |name: &str| -> Result<Vec<f64>> { decode_f64(name, take(name, None)?) };
        let train_loss = series("history.train_loss")?;
        let val_loss = series("history.val_loss")?;
        let logit_scale = series("history.logit_scale")?;
        if val_loss.len() != train_loss.len() || logit_scale.len() != train_loss.len() {
            return Err(Error::Format(format!(
                "{what}: history series differ in length"
            )));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Format(format!("{what}: unexpected tensor {extra}")));
        }
        let history = (0..train_loss.len())
            .map(|i| EpochRecord {
                epoch: i + 1,
                train_loss: train_loss[i],
                val_loss: (!val_loss[i].is_nan()).then_some(val_loss[i]),
                logit_scale: logit_scale[i],
                seconds: 0.0,
            })
            .collect();
        Ok(Self {
            params,
            optimizer: OptimizerState { step, m, v },
            epoch,
            best_loss,
            epochs_since_improvement: since,
            rng,
            config_digest,
            stats,
            history,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, &path.display().to_string())
    }

    /// Logs a warning when the checkpoint was produced under another config.
    pub fn check_digest(&self, digest: &[u8; 32]) -> bool {
        let same = &self.config_digest == digest;
        if !same {
            log::warn!(
                "checkpoint config digest {} differs from the current config {}",
                hex::encode(self.config_digest),
                hex::encode(digest)
            );
        }
        same
    }
}

impl AnyCheckpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let what = path.display().to_string();
        let mut r = ByteReader::new(&bytes, &what);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        r.expect_version()?;
        match Precision::from_code(r.u8()?) {
            Some(Precision::F32) => Ok(Self::F32(Checkpoint::from_bytes(&bytes, &what)?)),
            Some(Precision::F64) => Ok(Self::F64(Checkpoint::from_bytes(&bytes, &what)?)),
            None => Err(Error::Format(format!("{what}: unknown precision code"))),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            Self::F32(_) => Precision::F32,
            Self::F64(_) => Precision::F64,
        }
    }
}

/// Reads checkpoint metadata and the tensor directory, seeking past every
/// payload.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let what = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut f = BufReader::new(file);
    let truncated = || Error::Format(format!("{what}: truncated header"));
    let buf = |f: &mut BufReader<File>, n: usize| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        f.read_exact(&mut b).map_err(|_| truncated())?;
        Ok(b)
    };
    let fixed = buf(&mut f, 4 + 4 + 1 + 32)?;
    let mut r = ByteReader::new(&fixed, &what);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    r.expect_version()?;
    let code = r.u8()?;
    let precision = Precision::from_code(code)
        .ok_or_else(|| Error::Format(format!("{what}: unknown precision code {code}")))?;
    let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let u32_at = |f: &mut BufReader<File>| -> Result<u32> {
        Ok(u32::from_le_bytes(buf(f, 4)?.try_into().unwrap()))
    };
    let arch_len = u32_at(&mut f)? as usize;
    let arch_json = buf(&mut f, arch_len)?;
    let arch: Arch = serde_json::from_slice(&arch_json)
        .map_err(|e| Error::Format(format!("{what}: bad architecture record: {e}")))?;
    let meta = buf(&mut f, 32)?;
    let word = |i: usize| u64::from_le_bytes(meta[i * 8..(i + 1) * 8].try_into().unwrap());
    let count = u32_at(&mut f)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(&mut f)? as usize;
        let name = String::from_utf8(buf(&mut f, len)?)
            .map_err(|_| Error::Format(format!("{what}: tensor name is not UTF-8")))?;
        let code = buf(&mut f, 1)?[0];
        let tp = Precision::from_code(code)
            .ok_or_else(|| Error::Format(format!("{what}: tensor {name} has unknown dtype")))?;
        let rank = u32_at(&mut f)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut f)? as usize);
        }
        let bytes = shape.iter().product::<usize>() * tp.code() as usize;
        f.seek(SeekFrom::Current(bytes as i64))
            .map_err(|e| Error::io(path, e))?;
        tensors.push(TensorInfo {
            name,
            precision: tp,
            shape,
        });
    }
    Ok(CheckpointHeader {
        precision,
        config_digest,
        arch,
        epoch: word(0),
        best_loss: f64::from_bits(word(1)),
        epochs_since_improvement: word(2),
        adam_step: word(3),
        tensors,
    })
}
