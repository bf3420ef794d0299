//! Adam optimization of the full model against the contrastive objective,
//! with early stopping on the mean epoch loss and resumable state.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{alignment_loss, max_log_inv_tau, LossDirection, TextTable};
use crate::checkpoint::Checkpoint;
use crate::data::{Pixel, SceneDataset};
use crate::encoders::{
    model_backward, model_forward, Arch, Batch, Modality, ModelParams, EMBED_DIM, HSI_CHANNELS,
    LIDAR_CHANNELS, PATCH_SIZE,
};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::sampling::{
    compute_stats, extract_all, BatchPlan, BatchSchedule, NormalizationStats, PatchPair,
};
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// Minimum decrease of the monitored loss that counts as improvement.
    pub min_delta: f64,
    pub loss: LossDirection,
    pub seed: u64,
    pub precision: Precision,
    pub modality: Modality,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub patch_size: usize,
    pub hsi_channels: [usize; 3],
    pub lidar_plan: [usize; 3],
    pub embed_dim: usize,
    /// Fraction of training pixels held out to drive early stopping.
    pub val_fraction: f64,
    pub class_balanced: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_epochs: 100,
            batch_size: 128,
            patience: 15,
            min_delta: 1e-6,
            loss: LossDirection::Symmetric,
            seed: 7,
            precision: Precision::F32,
            modality: Modality::Both,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patch_size: PATCH_SIZE,
            hsi_channels: HSI_CHANNELS,
            lidar_plan: LIDAR_CHANNELS,
            embed_dim: EMBED_DIM,
            val_fraction: 0.0,
            class_balanced: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn arch(&self, bands: usize, lidar_channels: usize) -> Arch {
        Arch {
            bands,
            lidar_channels,
            patch_size: self.patch_size,
            hsi_channels: self.hsi_channels,
            lidar_plan: self.lidar_plan,
            embed_dim: self.embed_dim,
            modality: self.modality,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn batch_plan(&self) -> BatchPlan {
        BatchPlan {
            seed: self.seed,
            batch_size: self.batch_size,
            class_balanced: self.class_balanced,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

/// First and second moments for every learnable tensor, in
/// [`ModelParams::learnable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .learnable()
            .into_iter()
            .map(|(_, t)| t.zeros_like())
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every learnable tensor, followed by the
/// temperature clamp. Gradients are checked for finiteness before anything
/// is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut OptimizerState<T>,
    config: &AdamConfig,
) -> Result<()> {
    let grads = grads.learnable();
    if grads.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "optimizer tracks {} tensors, got {} gradients",
            state.m.len(),
            grads.len()
        )));
    }
    for ((name, g), (_, p)) in grads.iter().zip(params.learnable()) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient of {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "gradient of {name} is not finite"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let one = T::one();
    let bc1 = one - b1.powi(t);
    let bc2 = one - b2.powi(t);
    let lr = T::from_f64(config.learning_rate);
    let eps = T::from_f64(config.epsilon);
    let targets = params.learnable_mut();
    for (k, ((_, p), (_, g))) in targets.into_iter().zip(&grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    let cap = max_log_inv_tau::<T>();
    let lit = &mut params.log_inv_tau.data_mut()[0];
    if *lit > cap {
        *lit = cap;
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub train_loss: f64,
    /// Held-out loss when a validation fraction is configured.
    pub val_loss: Option<f64>,
    /// `exp(log_inv_tau)` at the end of the epoch.
    pub logit_scale: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn monitored(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

/// Result of a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: Vec<EpochRecord>,
}

/// Stateful training loop. Each call to [`Trainer::run_epoch`] advances one
/// epoch; the state after any epoch can be captured as a [`Checkpoint`] and
/// resumed bit-exactly.
pub struct Trainer<'a, T: Scalar> {
    config: TrainConfig,
    digest: [u8; 32],
    table: &'a TextTable,
    stats: NormalizationStats,
    train: Vec<PatchPair>,
    train_labels: Vec<u16>,
    val: Vec<PatchPair>,
    schedule: BatchSchedule,
    params: ModelParams<T>,
    optimizer: OptimizerState<T>,
    epoch: usize,
    best_loss: f64,
    since_improvement: usize,
    best: Option<Checkpoint<T>>,
    history: Vec<EpochRecord>,
}

/// Deterministic stratified hold-out of `fraction` of the training pixels.
fn split_validation(scene: &SceneDataset, seed: u64, fraction: f64) -> (Vec<Pixel>, Vec<Pixel>) {
    if fraction <= 0.0 {
        return (scene.train_indices.clone(), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 1..=scene.class_count() as u16 {
        let mut pixels: Vec<Pixel> = scene
            .train_indices
            .iter()
            .copied()
            .filter(|&p| scene.label(p) == class)
            .collect();
        pixels.shuffle(&mut rng);
        // keep at least one training pixel per class
        let hold = ((pixels.len() as f64 * fraction).floor() as usize).min(pixels.len() - 1);
        val.extend_from_slice(&pixels[..hold]);
        train.extend_from_slice(&pixels[hold..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

impl<'a, T: Scalar> Trainer<'a, T> {
    /// Fresh run: statistics from the training split, parameters from the seed.
    pub fn new(scene: &SceneDataset, table: &'a TextTable, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config requests {:?} precision, trainer runs {:?}",
                config.precision,
                T::PRECISION
            )));
        }
        let arch = config.arch(scene.cube.bands(), scene.lidar.channels());
        arch.validate()?;
        table.check_compatible(arch.embed_dim, scene.class_count())?;
        let (train_px, val_px) = split_validation(scene, config.seed, config.val_fraction);
        let stats = compute_stats(scene)?;
        let train = extract_all(scene, &stats, &train_px, arch.patch_size)?;
        let val = extract_all(scene, &stats, &val_px, arch.patch_size)?;
        let params = ModelParams::init(&arch, config.seed)?;
        let optimizer = OptimizerState::new(&params);
        Ok(Self {
            digest: config.digest(),
            train_labels: train.iter().map(|p| p.label).collect(),
            schedule: BatchSchedule::new(config.batch_plan()),
            config,
            table,
            stats,
            train,
            val,
            params,
            optimizer,
            epoch: 0,
            best_loss: f64::INFINITY,
            since_improvement: 0,
            best: None,
            history: Vec::new(),
        })
    }

    /// Continues from the state saved in `last`; `best` is the best snapshot
    /// recorded so far in the same run.
    pub fn resume(
        scene: &SceneDataset,
        table: &'a TextTable,
        config: TrainConfig,
        last: Checkpoint<T>,
        best: Checkpoint<T>,
    ) -> Result<Self> {
        let mut t = Self::new(scene, table, config)?;
        if last.config_digest != t.digest {
            log::warn!("checkpoint was written under a different configuration");
        }
        if last.params.arch != t.params.arch {
            return Err(Error::Config(
                "checkpoint architecture does not match the configuration".into(),
            ));
        }
        if last.stats != t.stats {
            log::warn!("checkpoint normalization statistics differ from the scene's");
        }
        t.schedule = BatchSchedule::resume(t.config.batch_plan(), last.rng);
        t.params = last.params;
        t.optimizer = last.optimizer;
        t.epoch = last.epoch;
        t.best_loss = last.best_loss;
        t.since_improvement = last.epochs_since_improvement;
        t.history = last.history;
        t.best = Some(best);
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }
    pub fn stats(&self) -> &NormalizationStats {
        &self.stats
    }
    pub fn epoch(&self) -> usize {
        self.epoch
    }
    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }
    pub fn best(&self) -> Option<&Checkpoint<T>> {
        self.best.as_ref()
    }
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    /// True once `max_epochs` is reached or patience is exhausted.
    pub fn finished(&self) -> bool {
        self.epoch >= self.config.max_epochs || self.since_improvement >= self.config.patience
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            best_loss: self.best_loss,
            epochs_since_improvement: self.since_improvement,
            rng: self.schedule.rng_state(),
            config_digest: self.digest,
            stats: self.stats.clone(),
            history: self.history.clone(),
        }
    }

    fn step_batch(&mut self, indices: &[usize]) -> Result<f64> {
        let pairs: Vec<&PatchPair> = indices.iter().map(|&i| &self.train[i]).collect();
        let batch = Batch::<T>::from_pairs(&pairs)?;
        let (z, cache) = model_forward(&self.params, &batch, Mode::Train)?;
        let cache = cache.expect("train mode keeps a cache");
        let out = alignment_loss(
            &z,
            &batch.labels,
            self.table,
            self.params.log_inv_tau(),
            self.config.loss,
        )?;
        let mut grads = model_backward(&self.params, &cache, &out.grad_z)?;
        grads.log_inv_tau.data_mut()[0] = out.grad_log_inv_tau;
        self.params.update_running_stats(&cache);
        adam_step(
            &mut self.params,
            &grads,
            &mut self.optimizer,
            &self.config.adam(),
        )?;
        Ok(out.loss.as_f64())
    }

    /// Sample-weighted mean loss on the held-out split in eval mode.
    fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.val.chunks(self.config.batch_size) {
            let refs: Vec<&PatchPair> = chunk.iter().collect();
            let batch = Batch::<T>::from_pairs(&refs)?;
            let (z, _) = model_forward(&self.params, &batch, Mode::Eval)?;
            let out = alignment_loss(
                &z,
                &batch.labels,
                self.table,
                self.params.log_inv_tau(),
                self.config.loss,
            )?;
            total += out.loss.as_f64() * chunk.len() as f64;
        }
        Ok(Some(total / self.val.len() as f64))
    }

    /// Runs one epoch and updates the early-stopping state.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let batches = self.schedule.next_epoch(&self.train_labels);
        let mut total = 0.0;
        for (b, indices) in batches.iter().enumerate() {
            let loss = self.step_batch(indices).map_err(|e| match e {
                Error::Numerical(msg) => {
                    Error::Numerical(format!("epoch {epoch}, batch {}: {msg}", b + 1))
                }
                other => other,
            })?;
            total += loss * indices.len() as f64;
        }
        let train_loss = total / self.train.len() as f64;
        let val_loss = self.validation_loss()?;
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            logit_scale: self.params.log_inv_tau().as_f64().exp(),
            seconds: start.elapsed().as_secs_f64(),
        };
        let monitored = record.monitored();
        self.history.push(record);
        if monitored < self.best_loss - self.config.min_delta {
            self.best_loss = monitored;
            self.since_improvement = 0;
            self.best = Some(self.checkpoint());
        } else {
            self.since_improvement += 1;
        }
        log::info!(
            "epoch {epoch}: loss {train_loss:.6} scale {:.3}",
            self.params.log_inv_tau().as_f64().exp()
        );
        Ok(self.history.last().unwrap())
    }

    pub fn run_to_completion(mut self) -> Result<TrainOutcome<T>> {
        while !self.finished() {
            self.run_epoch()?;
        }
        let last = self.checkpoint();
        let best = self.best.take().unwrap_or_else(|| last.clone());
        Ok(TrainOutcome {
            best,
            last,
            history: self.history,
        })
    }
}

/// Trains from scratch and returns the best checkpoint with the history.
pub fn train<T: Scalar>(
    scene: &SceneDataset,
    table: &TextTable,
    config: TrainConfig,
) -> Result<TrainOutcome<T>> {
    Trainer::<T>::new(scene, table, config)?.run_to_completion()
}
