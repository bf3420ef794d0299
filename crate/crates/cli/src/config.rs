//! Run configuration file and the run header written next to every output.

use std::path::{Path, PathBuf};

use geoalign_core::data::SceneManifest;
use geoalign_core::evaluation::Split;
use geoalign_core::training::TrainConfig;
use geoalign_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Options for `eval` and `map`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: Split,
    /// Class map output (PPM).
    pub map: Option<PathBuf>,
    pub mask_unlabeled: bool,
    /// Report output; defaults to `<output_dir>/eval_<split>.json`.
    pub report: Option<PathBuf>,
}

/// A complete run description. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub text_table: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads for matrix products; 1 is the bit-reproducible
    /// reference mode.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

fn default_threads() -> usize {
    1
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunConfig {
    pub fn new(scene: PathBuf, text_table: PathBuf) -> Self {
        Self {
            scene,
            text_table,
            output_dir: default_output_dir(),
            threads: default_threads(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses a config and resolves its paths against `base`.
    pub fn parse(text: &str, base: &Path) -> std::result::Result<Self, String> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.scene);
        resolve(&mut cfg.text_table);
        resolve(&mut cfg.output_dir);
        if let Some(m) = cfg.eval.map.as_mut() {
            resolve(m);
        }
        if let Some(r) = cfg.eval.report.as_mut() {
            resolve(r);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.train.validate()
    }

    pub fn thread_mode(&self) -> &'static str {
        if self.threads == 1 {
            "reference"
        } else {
            "parallel"
        }
    }
}

/// SHA-256 of a file's contents, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub precision: String,
    pub thread_mode: String,
    pub threads: usize,
    pub config_digest: String,
    pub inputs: Vec<InputDigest>,
    pub config: RunConfig,
}

impl RunHeader {
    pub fn new(command: &str, config: &RunConfig) -> Result<Self> {
        let manifest_text =
            std::fs::read_to_string(&config.scene).map_err(|e| io_error(&config.scene, e))?;
        let manifest: SceneManifest = serde_json::from_str(&manifest_text)
            .map_err(|e| Error::Format(format!("{}: {e}", config.scene.display())))?;
        let base = config.scene.parent().unwrap_or(Path::new("."));
        let mut paths = vec![config.scene.clone()];
        paths.extend([&manifest.cube, &manifest.lidar, &manifest.labels].map(|p| base.join(p)));
        paths.push(config.text_table.clone());
        let inputs = paths
            .into_iter()
            .map(|path| {
                Ok(InputDigest {
                    sha256: file_digest(&path)?,
                    path,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: "geoalign".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.train.seed,
            precision: format!("{:?}", config.train.precision).to_lowercase(),
            thread_mode: config.thread_mode().into(),
            threads: config.threads,
            config_digest: hex::encode(config.train.digest()),
            inputs,
            config: config.clone(),
        })
    }

    /// Warns about inputs whose contents changed since the header was written.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = file_digest(&input.path)?;
            if now != input.sha256 {
                log::warn!(
                    "{} changed since the run header was written",
                    input.path.display()
                );
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("header serializes");
        std::fs::write(path, body).map_err(|e| io_error(path, e))
    }
}
