//! Optimization: total loss, μ schedule, cosine learning rate, Adam and the
//! epoch loop over synthetically misaligned pairs.

use std::collections::BTreeMap;

use bsfa_core::data::{derive_seed, make_sample, RegisteredPair, TrainingSample};
use bsfa_core::deformation::Interval;
use bsfa_core::{Image, SyntheticDeformationSpec};
use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::convert::{images_to_tensor, tensor_to_field};
use crate::error::{NetError, Result};
use crate::model::{LossValues, Model};
use crate::ops::scalar;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Weight of the intensity loss.
    pub lambda: f64,
    pub seed: u64,
    /// Random flips and quarter turns shared by all images of a sample.
    pub augment: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            batch_size: 32,
            lr_init: 5e-5,
            lr_final: 5e-7,
            lambda: 0.5,
            seed: 0,
            augment: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NetError::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(NetError::Config("need 0 < lr_final <= lr_init".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(NetError::Config("lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Serializable description of the synthetic misalignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationConfig {
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: f64,
    /// Translations drawn from `±translation` pixels per axis.
    pub translation: f64,
    pub elastic_grid: usize,
    pub elastic_amplitude: f64,
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translation: 10.0,
            elastic_grid: 8,
            elastic_amplitude: 10.0,
        }
    }
}

impl DeformationConfig {
    pub fn spec(&self, seed: u64) -> SyntheticDeformationSpec {
        SyntheticDeformationSpec {
            rotation_deg: Interval::symmetric(self.rotation_deg),
            translation_x: Interval::symmetric(self.translation),
            translation_y: Interval::symmetric(self.translation),
            elastic_grid: self.elastic_grid,
            elastic_amplitude: self.elastic_amplitude,
            seed,
        }
    }
}

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·step/total))`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_init;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `μ = Σ L_ssim(I_fuse, I_B) / Σ L_ssim(I_fuse, Ĩ_A)` over one epoch. A zero
/// (or otherwise unusable) denominator keeps `previous`.
pub fn update_mu(losses_b: &[f64], losses_a: &[f64], previous: f64) -> f64 {
    if losses_a.is_empty() || losses_a.len() != losses_b.len() {
        log::warn!("mu update skipped: {} vs {} loss samples", losses_b.len(), losses_a.len());
        return previous;
    }
    let num: f64 = losses_b.iter().sum();
    let den: f64 = losses_a.iter().sum();
    let mu = num / den;
    if den == 0.0 || !mu.is_finite() || mu <= 0.0 {
        log::warn!("mu update skipped: ratio {num}/{den} is unusable, keeping {previous}");
        return previous;
    }
    mu
}

/// `L_ce1 + L_ce2 + L_consis + L_smooth + L_struct + L_grad + λ L_inten`.
pub fn total_loss(parts: &LossValues, lambda: f64) -> Result<f64> {
    parts.total(lambda)
}

/// Adam with bias correction; moments are kept per parameter name.
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, ps: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in ps.vars() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (g * (1.0 - beta1))?)?,
                None => (g * (1.0 - beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// A stacked training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub moving: Tensor,
    pub reference: Tensor,
    pub label: Tensor,
}

impl Batch {
    /// Colour images contribute their luminance.
    pub fn from_samples(samples: &[&TrainingSample], dtype: DType, dev: &Device) -> Result<Self> {
        let stack = |pick: fn(&TrainingSample) -> &Image| -> Result<Tensor> {
            let planes: Vec<Image> = samples.iter().map(|s| pick(s).luminance()).collect();
            let refs: Vec<&Image> = planes.iter().collect();
            images_to_tensor(&refs, dtype, dev)
        };
        Ok(Self {
            moving: stack(|s| &s.moving)?,
            reference: stack(|s| &s.reference)?,
            label: stack(|s| &s.label)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub mu: f64,
    pub losses: LossValues,
    pub total: f64,
    pub ssim_loss_a: f64,
    pub ssim_loss_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of each term over the epoch's steps.
    pub losses: LossValues,
    pub total: f64,
    /// μ used during the epoch.
    pub mu: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Held-out `L_consis` measured after the epoch, when a validation set exists.
    #[serde(default)]
    pub validation: Option<f64>,
}

impl EpochLog {
    pub fn csv_header() -> String {
        let mut cols = vec!["epoch".to_string()];
        cols.extend(LossValues::NAMES.iter().map(|s| s.to_string()));
        cols.extend(["total", "mu", "lr", "val_consis"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.epoch.to_string()];
        cols.extend(self.losses.as_array().iter().map(|v| format!("{v:.8e}")));
        cols.push(format!("{:.8e}", self.total));
        cols.push(format!("{:.8e}", self.mu));
        cols.push(format!("{:.8e}", self.lr));
        cols.push(self.validation.map(|v| format!("{v:.8e}")).unwrap_or_default());
        cols.join(",")
    }
}

/// Seed offset separating augmentation draws from deformation draws.
const AUGMENT_STREAM: u64 = 0x5A17_A0C3_91D2_4E6B;

/// Owns the model, optimizer and schedule state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model_cfg: ModelConfig,
    pub deformation: DeformationConfig,
    pub ps: ParamStore,
    pub model: Model,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub mu: f64,
    /// Number of steps the schedule spans; fixed at construction.
    pub total_steps: u64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        deformation: DeformationConfig,
        train_pairs: usize,
        dtype: DType,
        device: Device,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(cfg.seed, dtype, device);
        let model = Model::new(&mut ps, &model_cfg)?;
        let per_epoch = train_pairs.div_ceil(cfg.batch_size).max(1) as u64;
        Ok(Self {
            adam: Adam::new(cfg.adam),
            total_steps: per_epoch * cfg.epochs as u64,
            cfg,
            model_cfg,
            deformation,
            ps,
            model,
            epoch: 0,
            step: 0,
            mu: 1.0,
            steps: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.ps.dtype()
    }

    pub fn device(&self) -> Device {
        self.ps.device().clone()
    }

    /// The misaligned sample for pair `index` in `epoch`.
    pub fn sample(&self, pair: &RegisteredPair, epoch: usize, index: usize) -> Result<TrainingSample> {
        let spec = self.deformation.spec(derive_seed(self.cfg.seed, epoch as u64, index as u64));
        let aug = self
            .cfg
            .augment
            .then(|| derive_seed(self.cfg.seed ^ AUGMENT_STREAM, epoch as u64, index as u64));
        Ok(make_sample(pair, &spec, aug)?)
    }

    /// Pair indices in the order visited during `epoch`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64, u64::MAX));
        order.shuffle(&mut rng);
        order
    }

    /// One optimizer step on `batch`; nothing is updated if a term is not finite.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLog> {
        let lr = lr_at(self.step, self.total_steps, &self.cfg);
        let fwd = self.model.forward(&batch.moving, &batch.reference)?;
        let parts = self.model.losses(&fwd, &batch.label, &batch.reference, self.mu)?;
        let values = parts.values()?;
        let total = values.total(self.cfg.lambda)?;
        let grads = parts.total(self.cfg.lambda)?.backward()?;
        self.adam.step(&self.ps, &grads, lr)?;
        let log = StepLog {
            epoch: self.epoch,
            step: self.step,
            lr,
            mu: self.mu,
            losses: values,
            total,
            ssim_loss_a: scalar(&parts.ssim_loss_a)?,
            ssim_loss_b: scalar(&parts.ssim_loss_b)?,
        };
        self.step += 1;
        self.steps.push(log.clone());
        Ok(log)
    }

    /// One pass over `pairs` with fresh deformations, then the μ update.
    pub fn run_epoch(&mut self, pairs: &[RegisteredPair]) -> Result<EpochLog> {
        if pairs.is_empty() {
            return Err(NetError::Config("no training pairs".into()));
        }
        let order = self.epoch_order(pairs.len(), self.epoch);
        let (dtype, dev) = (self.dtype(), self.device());
        let mut logs = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| self.sample(&pairs[i], self.epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TrainingSample> = samples.iter().collect();
            let batch = Batch::from_samples(&refs, dtype, &dev)?;
            logs.push(self.train_step(&batch)?);
        }
        self.finish_epoch(&logs)
    }

    /// One pass over prebuilt batches whose misalignment stays fixed, as in
    /// overfitting checks.
    pub fn run_fixed_epoch(&mut self, batches: &[Batch]) -> Result<EpochLog> {
        if batches.is_empty() {
            return Err(NetError::Config("no training batches".into()));
        }
        let logs = batches.iter().map(|b| self.train_step(b)).collect::<Result<Vec<_>>>()?;
        self.finish_epoch(&logs)
    }

    fn finish_epoch(&mut self, logs: &[StepLog]) -> Result<EpochLog> {
        let n = logs.len() as f64;
        let mut mean = [0.0; 7];
        for l in logs {
            for (m, v) in mean.iter_mut().zip(l.losses.as_array()) {
                *m += v / n;
            }
        }
        let losses = LossValues::from_array(mean);
        let log = EpochLog {
            epoch: self.epoch,
            total: losses.total(self.cfg.lambda)?,
            losses,
            mu: self.mu,
            lr: logs.last().map(|l| l.lr).unwrap_or(self.cfg.lr_init),
            validation: None,
        };
        let sb: Vec<f64> = logs.iter().map(|l| l.ssim_loss_b).collect();
        let sa: Vec<f64> = logs.iter().map(|l| l.ssim_loss_a).collect();
        self.mu = update_mu(&sb, &sa, self.mu);
        self.epoch += 1;
        self.epochs.push(log.clone());
        Ok(log)
    }

    /// The model over untracked views of the current parameters, for
    /// forward passes that need no gradients.
    pub fn inference_model(&self) -> Result<Model> {
        Model::new(&mut self.ps.detached_view(), &self.model_cfg)
    }

    /// Loss terms for a batch without updating anything.
    pub fn evaluate(&self, batch: &Batch) -> Result<LossValues> {
        let model = self.inference_model()?;
        let fwd = model.forward(&batch.moving, &batch.reference)?;
        model.losses(&fwd, &batch.label, &batch.reference, self.mu)?.values()
    }

    /// Predicted full-resolution fields for a batch.
    pub fn predict_fields(&self, batch: &Batch) -> Result<Vec<bsfa_core::DeformationField>> {
        let fwd = self.inference_model()?.forward(&batch.moving, &batch.reference)?;
        let b = fwd.phi_ab.dim(0)?;
        (0..b).map(|i| tensor_to_field(&fwd.phi_ab, i, 0)).collect()
    }
}
