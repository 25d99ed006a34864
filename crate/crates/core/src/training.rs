//! Joint generator + enhancer pre-training.
//!
//! Every step draws its randomness from streams derived from `(seed, step)`,
//! so a run resumed from a checkpoint replays exactly the same batches,
//! masks and sampled tokens as the uninterrupted run.

use std::fs::OpenOptions;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backbones::{
    build_shared_stem, mask_tensor, unpatchify, DetectHead, Enhancer, EnhancerConfig, EnhancerHead, Generator,
    GeneratorConfig, GeneratorSpec, PixelHead, SharedStem,
};
use crate::checkpoint::Container;
use crate::corruption::{corrupt_tokens_from_logits, masked_token_ce, replacement_flags, CorruptionConfig, FlagGrid, MaskSet};
use crate::data::{augment, epoch_permutation, images_to_tensor, AugmentConfig, ImageTensor, LabeledDataset};
use crate::error::{CimError, Result};
use crate::nn::{self, dedup_params, AdamW, AdamWConfig, Init, NamedParam};
use crate::objectives::{flags_to_tensor, normalize_target, respix_loss, revdet_loss, targets_to_tensor, NormScheme};
use crate::seeding::{self, tag};
use crate::tokenizer::TokenizerState;

pub const PRETRAIN_KIND: &str = "pretrain";
pub const PRETRAIN_VERSION: &str = "cim-pretrain/1";
pub const ENHANCER_KIND: &str = "enhancer";
pub const ENHANCER_VERSION: &str = "cim-enhancer/1";
pub const GENERATOR_KIND: &str = "generator";
pub const GENERATOR_VERSION: &str = "cim-generator/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Respix,
    #[default]
    Revdet,
}

impl Objective {
    pub fn default_weight(self) -> f64 {
        match self {
            Objective::Respix => 10.0,
            Objective::Revdet => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Optimization schedule and pretext-task settings. Key names follow the
/// usual pre-training hyperparameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_learning_rate: f64,
    /// When set, the peak rate is multiplied by `batch_size / lr_reference_batch`.
    pub lr_reference_batch: Option<usize>,
    pub min_learning_rate: f64,
    pub warmup_epochs: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub gradient_clipping: f64,
    pub objective: Objective,
    /// Defaults to 10 for RESPIX and 1 for REVDET.
    pub enhancer_loss_weight: Option<f64>,
    pub respix_l1: f64,
    pub respix_l2: f64,
    pub target_norm: NormScheme,
    pub target_window: usize,
    pub target_eps: f64,
    pub augment: bool,
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
    pub checkpoint_every: Option<usize>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            peak_learning_rate: 1.5e-3,
            lr_reference_batch: None,
            min_learning_rate: 1e-5,
            warmup_epochs: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            gradient_clipping: 3.0,
            objective: Objective::Revdet,
            enhancer_loss_weight: None,
            respix_l1: 1.0,
            respix_l2: 1.0,
            target_norm: NormScheme::Sliding,
            target_window: 8,
            target_eps: 1e-6,
            augment: true,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            divergence_factor: 10.0,
            divergence_patience: 100,
            checkpoint_every: None,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("peak_learning_rate", self.peak_learning_rate),
            ("gradient_clipping", self.gradient_clipping),
            ("divergence_factor", self.divergence_factor),
            ("target_eps", self.target_eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CimError::config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.min_learning_rate < 0.0 || self.min_learning_rate > self.peak_learning_rate {
            return Err(CimError::config("min_learning_rate must lie in [0, peak_learning_rate]"));
        }
        if self.warmup_epochs < 0.0 || self.weight_decay < 0.0 {
            return Err(CimError::config("warmup_epochs and weight_decay must be non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CimError::config("epochs and batch_size must be at least 1"));
        }
        if let Some(w) = self.enhancer_loss_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CimError::config(format!("enhancer_loss_weight must be non-negative, got {w}")));
            }
        }
        if self.lr_reference_batch == Some(0) {
            return Err(CimError::config("lr_reference_batch must be at least 1"));
        }
        Ok(())
    }

    pub fn loss_weight(&self) -> f64 {
        self.enhancer_loss_weight.unwrap_or(self.objective.default_weight())
    }

    pub fn effective_peak_lr(&self) -> f64 {
        match self.lr_reference_batch {
            Some(r) => self.peak_learning_rate * self.batch_size as f64 / r as f64,
            None => self.peak_learning_rate,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup then cosine decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let total_steps = cfg.epochs * steps_per_epoch;
        let warmup_steps = ((cfg.warmup_epochs * steps_per_epoch as f64).round() as usize).min(total_steps);
        Self { peak: cfg.effective_peak_lr(), floor: cfg.min_learning_rate, warmup_steps, total_steps }
    }

    /// `peak·s/W` during warmup, then
    /// `floor + (peak − floor)·(1 + cos(π·(s − W)/(T − W)))/2`, reaching `floor` at `s = T`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.floor;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor + (self.peak - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lr_at(cfg: &TrainConfig, steps_per_epoch: usize, step: usize) -> f64 {
    Schedule::new(cfg, steps_per_epoch).lr_at(step)
}

/// Factor that brings a gradient of global norm `norm` within `max_norm`.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

/// Everything needed to build and train the two networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    /// Side of the square training views; the enhancer and generator grids follow it.
    pub image_size: usize,
    pub train: TrainConfig,
    pub enhancer: EnhancerConfig,
    pub generator: GeneratorConfig,
    pub corruption: CorruptionConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            train: TrainConfig::default(),
            enhancer: EnhancerConfig::default(),
            generator: GeneratorConfig::default(),
            corruption: CorruptionConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.corruption.mask.validate()
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mim_loss: f64,
    pub enhancer_loss: f64,
    pub flag_fraction: f64,
}

/// Appends rows to a CSV file, writing the header only for a new file.
pub fn append_metrics(path: &Path, rows: &[StepMetrics]) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CimError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CimError::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CimError::from)).collect()
}

/// Intermediate tensors of one step, kept for inspection in tests.
pub struct StepOutputs {
    pub mim_loss: Tensor,
    pub enhancer_loss: Tensor,
    pub total_loss: Tensor,
    pub masks: Vec<MaskSet>,
    pub flags: Vec<FlagGrid>,
}

pub struct Pretrainer {
    cfg: PretrainConfig,
    tokenizer: TokenizerState,
    pub generator: Generator,
    pub enhancer: Enhancer,
    pub head: EnhancerHead,
    pub stem: Option<SharedStem>,
    opt: AdamW,
    params: Vec<NamedParam>,
    schedule: Schedule,
    steps_per_epoch: usize,
    step: u64,
    initial_loss: Option<f64>,
    over_count: usize,
    history: Vec<StepMetrics>,
    device: Device,
}

impl Pretrainer {
    /// Builds freshly initialized networks for a dataset of `dataset_len` images.
    pub fn new(cfg: &PretrainConfig, tokenizer: TokenizerState, dataset_len: usize, device: &Device) -> Result<Self> {
        cfg.validate()?;
        if !tokenizer.is_frozen() {
            return Err(CimError::Frozen);
        }
        if dataset_len == 0 {
            return Err(CimError::validation("cannot pre-train on an empty dataset"));
        }
        let f = tokenizer.downsample();
        let image_size = cfg.image_size;
        let enhancer_cfg = cfg.enhancer.aligned(image_size, f);
        if enhancer_cfg.patch() != f {
            return Err(CimError::config("enhancer grid does not match the tokenizer"));
        }
        let spec = cfg.generator.resolve(&enhancer_cfg, image_size, f, tokenizer.vocab_size())?;
        let dtype = cfg.train.precision.dtype();
        let mut rng = seeding::rng_for(cfg.seed, &[tag("init")]);
        let mut init = Init::new(&mut rng, device, dtype);
        let stem = build_shared_stem(&mut init, &spec, &enhancer_cfg, cfg.generator.share_layers)?;
        let generator = Generator::new(&mut init, &spec, stem.as_ref())?;
        let enhancer = Enhancer::new(&mut init, &enhancer_cfg, stem.as_ref())?;
        let head = match cfg.train.objective {
            Objective::Respix => EnhancerHead::Pixel(PixelHead::new(&mut init, enhancer.dim(), f)?),
            Objective::Revdet => EnhancerHead::Detect(DetectHead::new(&mut init, enhancer.dim())?),
        };
        let mut params = generator.params("generator");
        params.extend(enhancer.params("enhancer"));
        params.extend(head.params("head"));
        let params = dedup_params(params);
        let opt = AdamW::with_defaults(&params, cfg.train.adamw())?;
        let steps_per_epoch = dataset_len.div_ceil(cfg.train.batch_size);
        let mut cfg = cfg.clone();
        cfg.enhancer = enhancer_cfg;
        Ok(Self {
            schedule: Schedule::new(&cfg.train, steps_per_epoch),
            cfg,
            tokenizer,
            generator,
            enhancer,
            head,
            stem,
            opt,
            params,
            steps_per_epoch,
            step: 0,
            initial_loss: None,
            over_count: 0,
            history: Vec::new(),
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &TokenizerState {
        &self.tokenizer
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn history(&self) -> &[StepMetrics] {
        &self.history
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.cfg.train.precision.dtype()
    }

    pub fn generator_spec(&self) -> &GeneratorSpec {
        &self.generator.spec
    }

    /// Image indices of the batch used at `step`.
    pub fn batch_indices(&self, dataset_len: usize, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch as u64;
        let epoch = step / spe;
        let k = (step % spe) as usize;
        let order = epoch_permutation(dataset_len, seeding::derive_seed(self.cfg.seed, &[tag("shuffle")]), epoch);
        let b = self.cfg.train.batch_size;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    /// Augmented views for the batch at `step`.
    pub fn batch_images(&self, data: &LabeledDataset, step: u64) -> Result<Vec<ImageTensor>> {
        if data.len() == 0 {
            return Err(CimError::validation("empty dataset"));
        }
        let idx = self.batch_indices(data.len(), step);
        let t = &self.cfg.train;
        let size = self.image_size();
        let aug = AugmentConfig { scale_range: t.crop_scale, out_size: size, flip_prob: t.flip_prob };
        let mut rng = seeding::rng_for(self.cfg.seed, &[tag("augment"), step]);
        idx.iter()
            .map(|&i| {
                let img = &data.images[i];
                if t.augment {
                    augment(img, &mut rng, &aug)
                } else if img.height() != size || img.width() != size {
                    Ok(img.resize_bilinear(size, size))
                } else {
                    Ok(img.clone())
                }
            })
            .collect()
    }

    pub fn image_size(&self) -> usize {
        self.generator.spec.vit.image_size
    }

    /// Forward pass of both networks on one batch, without updating anything.
    pub fn forward(&self, images: &[ImageTensor], step: u64) -> Result<StepOutputs> {
        let dtype = self.dtype();
        let x32 = images_to_tensor(images, &self.device, DType::F32)?;
        let golden = self.tokenizer.encode_batch(&x32)?;
        let (gh, gw) = (golden[0].h, golden[0].w);
        let n = gh * gw;
        let mut mask_rng = seeding::rng_for(self.cfg.seed, &[tag("mask"), step]);
        let masks = (0..images.len())
            .map(|_| self.cfg.corruption.mask.sample(gh, gw, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let x = x32.to_dtype(dtype)?;
        let m = mask_tensor(&masks, n, dtype, &self.device)?;
        let logits = self.generator.forward(&x, &m)?;
        let mim_loss = masked_token_ce(&logits, &golden, &m)?;

        let mut sample_rng = seeding::rng_for(self.cfg.seed, &[tag("sample"), step]);
        let c = &self.cfg.corruption;
        let corrupted = corrupt_tokens_from_logits(&logits, &golden, &masks, c.sampling, c.temperature, &mut sample_rng)?;
        let flags = golden
            .iter()
            .zip(&corrupted)
            .map(|(g, c)| replacement_flags(g, c))
            .collect::<Result<Vec<_>>>()?;
        for (f, mask) in flags.iter().zip(&masks) {
            if f.count() > mask.k() {
                return Err(CimError::validation("more replaced tokens than masked positions"));
            }
        }
        // The corrupted image is a constant for the enhancer.
        let corrupted_x = self.tokenizer.decode_batch(&corrupted)?.to_dtype(dtype)?.detach();
        let features = self.enhancer.token_features(&corrupted_x)?;
        let out = self.head.forward(&features)?;
        let t = &self.cfg.train;
        let enhancer_loss = match t.objective {
            Objective::Revdet => revdet_loss(&out, &flags_to_tensor(&flags, &self.device, dtype)?)?,
            Objective::Respix => {
                let f = self.tokenizer.downsample();
                let pred = unpatchify(&out, f, gh, gw)?;
                let targets = images
                    .iter()
                    .map(|img| normalize_target(img, t.target_norm, t.target_window, t.target_eps))
                    .collect::<Result<Vec<_>>>()?;
                let target = targets_to_tensor(&targets, &self.device, dtype)?;
                respix_loss(&pred, &target, t.respix_l1, t.respix_l2)?
            }
        };
        let total_loss = (&mim_loss + enhancer_loss.affine(t.loss_weight(), 0.0)?)?;
        Ok(StepOutputs { mim_loss, enhancer_loss, total_loss, masks, flags })
    }

    /// One optimizer step on the batch for the current step index.
    pub fn joint_step(&mut self, data: &LabeledDataset) -> Result<StepMetrics> {
        let images = self.batch_images(data, self.step)?;
        self.joint_step_on(&images)
    }

    /// One optimizer step on explicit images.
    pub fn joint_step_on(&mut self, images: &[ImageTensor]) -> Result<StepMetrics> {
        let step = self.step;
        let out = self.forward(images, step)?;
        let mim = nn::scalar(&out.mim_loss)?;
        let enh = nn::scalar(&out.enhancer_loss)?;
        let total = nn::scalar(&out.total_loss)?;
        if !total.is_finite() {
            return Err(CimError::Divergence {
                step,
                reason: format!("non-finite loss (mim {mim}, enhancer {enh})"),
            });
        }
        let grads = out.total_loss.backward()?;
        let norm = self.opt.grad_norm(&grads)?;
        if !norm.is_finite() {
            return Err(CimError::Divergence { step, reason: "non-finite gradient norm".into() });
        }
        let scale = clip_scale(norm, self.cfg.train.gradient_clipping);
        let lr = self.schedule.lr_at(step as usize);
        self.opt.step(&grads, lr, scale)?;

        let initial = *self.initial_loss.get_or_insert(total);
        if total > self.cfg.train.divergence_factor * initial {
            self.over_count += 1;
        } else {
            self.over_count = 0;
        }
        let flag_count: usize = out.flags.iter().map(|f| f.count()).sum();
        let positions: usize = out.flags.iter().map(|f| f.flags.len()).sum();
        let metrics = StepMetrics {
            step,
            lr,
            mim_loss: mim,
            enhancer_loss: enh,
            flag_fraction: flag_count as f64 / positions.max(1) as f64,
        };
        self.history.push(metrics.clone());
        self.step += 1;
        if self.over_count >= self.cfg.train.divergence_patience {
            return Err(CimError::Divergence {
                step,
                reason: format!(
                    "loss above {}x its initial value for {} consecutive steps",
                    self.cfg.train.divergence_factor, self.over_count
                ),
            });
        }
        Ok(metrics)
    }

    /// Parameters that belong to the generator alone (not shared with the enhancer).
    pub fn generator_only_params(&self) -> Vec<NamedParam> {
        let enh: std::collections::HashSet<_> = self.enhancer.params("").iter().map(|p| p.id()).collect();
        self.generator
            .params("generator")
            .into_iter()
            .filter(|p| !enh.contains(&p.id()))
            .collect()
    }

    /// Largest absolute gradient that the enhancer loss alone puts on
    /// generator-only parameters for the batch at the current step.
    pub fn enhancer_gradient_leak(&self, images: &[ImageTensor]) -> Result<f64> {
        let out = self.forward(images, self.step)?;
        let grads = out.enhancer_loss.backward()?;
        let mut worst = 0.0f64;
        for p in self.generator_only_params() {
            if let Some(g) = grads.get(p.var.as_tensor()) {
                worst = worst.max(nn::scalar(&g.abs()?.max_all()?)?);
            }
        }
        Ok(worst)
    }

    /// Runs until `until` steps (or the configured total), appending metrics to
    /// `out/metrics.csv` and writing periodic checkpoints when `out` is given.
    pub fn run(&mut self, data: &LabeledDataset, until: Option<usize>, out: Option<&Path>) -> Result<()> {
        let end = until.unwrap_or(self.schedule.total_steps).min(self.schedule.total_steps) as u64;
        let csv = out.map(|o| o.join("metrics.csv"));
        while self.step < end {
            let snapshot_step = self.step;
            let result = self.joint_step(data);
            let m = match result {
                Ok(m) => m,
                Err(e @ CimError::Divergence { .. }) => {
                    if let Some(o) = out {
                        let dump = o.join("diverged.ckpt");
                        warn!("diverged at step {snapshot_step}; dumping state to {}", dump.display());
                        self.save_checkpoint(&dump)?;
                        if let Some(p) = &csv {
                            append_metrics(p, &self.history[self.history.len().saturating_sub(1)..])?;
                        }
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(p) = &csv {
                append_metrics(p, std::slice::from_ref(&m))?;
            }
            if m.step % 50 == 0 {
                info!(
                    "step {} lr {:.3e} mim {:.4} enhancer {:.4} flags {:.3}",
                    m.step, m.lr, m.mim_loss, m.enhancer_loss, m.flag_fraction
                );
            }
            if let (Some(o), Some(every)) = (out, self.cfg.train.checkpoint_every) {
                if every > 0 && self.step % every as u64 == 0 {
                    self.save_checkpoint(&o.join("checkpoint.ckpt"))?;
                }
            }
        }
        Ok(())
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "version": PRETRAIN_VERSION,
            "config": self.cfg,
            "step": self.step,
            "initial_loss": self.initial_loss,
            "over_count": self.over_count,
            "history": self.history,
            "tokenizer": {
                "downsample": self.tokenizer.downsample(),
                "vocab_size": self.tokenizer.vocab_size(),
            },
        })
    }

    /// Full training state: parameters, optimizer moments and counters.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(PRETRAIN_KIND, self.meta());
        for p in &self.params {
            c.push(format!("param/{}", p.name), p.var.as_tensor());
        }
        let (opt_step, moments) = self.opt.moments();
        c.meta["opt_step"] = opt_step.into();
        for (name, m, v) in moments {
            c.push(format!("m/{name}"), &m);
            c.push(format!("v/{name}"), &v);
        }
        c.save(path)
    }

    /// Rebuilds a trainer from a checkpoint written by [`Pretrainer::save_checkpoint`].
    pub fn load_checkpoint(
        path: &Path,
        tokenizer: TokenizerState,
        dataset_len: usize,
        device: &Device,
    ) -> Result<Self> {
        let c = Container::load_kind(path, PRETRAIN_KIND)?;
        let incompatible = |reason: String| CimError::IncompatibleCheckpoint { path: path.to_path_buf(), reason };
        if c.meta["version"] != PRETRAIN_VERSION {
            return Err(incompatible(format!("pre-training version {}", c.meta["version"])));
        }
        let tok = &c.meta["tokenizer"];
        if tok["downsample"] != tokenizer.downsample() || tok["vocab_size"] != tokenizer.vocab_size() {
            return Err(incompatible("tokenizer grid or vocabulary differs".into()));
        }
        let cfg: PretrainConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut t = Self::new(&cfg, tokenizer, dataset_len, device)?;
        for p in &t.params {
            let v = c.require(&format!("param/{}", p.name))?;
            if v.dims() != p.var.as_tensor().dims() {
                return Err(incompatible(format!("parameter {} has shape {:?}", p.name, v.dims())));
            }
            p.var.set(&v.to_dtype(p.var.dtype())?.to_device(device)?)?;
        }
        let entries = t
            .params
            .iter()
            .map(|p| {
                let m = c.require(&format!("m/{}", p.name))?.to_device(device)?;
                let v = c.require(&format!("v/{}", p.name))?.to_device(device)?;
                Ok((p.name.clone(), m, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_step = c.meta["opt_step"].as_u64().unwrap_or(0);
        t.opt.restore_moments(opt_step, &entries)?;
        t.step = c.meta["step"].as_u64().unwrap_or(0);
        t.initial_loss = c.meta["initial_loss"].as_f64();
        t.over_count = c.meta["over_count"].as_u64().unwrap_or(0) as usize;
        t.history = serde_json::from_value(c.meta["history"].clone())?;
        Ok(t)
    }

    /// The enhancer alone, as kept after pre-training.
    pub fn save_enhancer(&self, path: &Path) -> Result<()> {
        save_enhancer(&self.enhancer, path)
    }

    pub fn save_generator(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "version": GENERATOR_VERSION,
            "spec": self.generator.spec,
            "tokenizer": {
                "downsample": self.tokenizer.downsample(),
                "vocab_size": self.tokenizer.vocab_size(),
            },
        });
        let mut c = Container::new(GENERATOR_KIND, meta);
        for p in self.generator.params("") {
            c.push(p.name, p.var.as_tensor());
        }
        c.save(path)
    }
}

pub fn save_enhancer(enhancer: &Enhancer, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "version": ENHANCER_VERSION, "config": enhancer.config() });
    let mut c = Container::new(ENHANCER_KIND, meta);
    for p in enhancer.params("") {
        c.push(p.name, p.var.as_tensor());
    }
    c.save(path)
}

fn fill_params(c: &Container, params: &[NamedParam], path: &Path, device: &Device) -> Result<()> {
    for p in params {
        let v = c.require(&p.name)?;
        if v.dims() != p.var.as_tensor().dims() {
            return Err(CimError::IncompatibleCheckpoint {
                path: path.to_path_buf(),
                reason: format!("parameter {} has shape {:?}", p.name, v.dims()),
            });
        }
        p.var.set(&v.to_dtype(p.var.dtype())?.to_device(device)?)?;
    }
    Ok(())
}

pub fn load_enhancer(path: &Path, device: &Device, dtype: DType) -> Result<Enhancer> {
    let c = Container::load_kind(path, ENHANCER_KIND)?;
    if c.meta["version"] != ENHANCER_VERSION {
        return Err(CimError::IncompatibleCheckpoint {
            path: path.to_path_buf(),
            reason: format!("enhancer version {}", c.meta["version"]),
        });
    }
    let cfg: EnhancerConfig = serde_json::from_value(c.meta["config"].clone())?;
    let mut rng = seeding::rng_for(0, &[]);
    let mut init = Init::new(&mut rng, device, dtype);
    let enhancer = Enhancer::new(&mut init, &cfg, None)?;
    fill_params(&c, &enhancer.params(""), path, device)?;
    Ok(enhancer)
}

/// Loads a generator and checks it against the tokenizer it will be paired with.
pub fn load_generator(path: &Path, tokenizer: &TokenizerState, device: &Device) -> Result<Generator> {
    let c = Container::load_kind(path, GENERATOR_KIND)?;
    let incompatible = |reason: String| CimError::IncompatibleCheckpoint { path: path.to_path_buf(), reason };
    if c.meta["version"] != GENERATOR_VERSION {
        return Err(incompatible(format!("generator version {}", c.meta["version"])));
    }
    let spec: GeneratorSpec = serde_json::from_value(c.meta["spec"].clone())?;
    if spec.vocab_size != tokenizer.vocab_size() || spec.vit.patch != tokenizer.downsample() {
        return Err(incompatible(format!(
            "generator expects vocabulary {} and grid factor {}, tokenizer has {} and {}",
            spec.vocab_size,
            spec.vit.patch,
            tokenizer.vocab_size(),
            tokenizer.downsample()
        )));
    }
    let dtype = c.tensors.first().map(|(_, t)| t.dtype()).unwrap_or(DType::F32);
    let mut rng = seeding::rng_for(0, &[]);
    let mut init = Init::new(&mut rng, device, dtype);
    let gen = Generator::new(&mut init, &spec, None)?;
    fill_params(&c, &gen.params(""), path, device)?;
    Ok(gen)
}

/// Outcome of a complete pre-training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: u64,
    pub history: Vec<StepMetrics>,
    pub diverged: Option<String>,
}

/// Trains from scratch for the configured schedule. With `out`, writes
/// `metrics.csv`, `enhancer.ckpt`, `generator.ckpt` and `checkpoint.ckpt`.
/// Divergence is reported in the returned report, not as an error.
pub fn pretrain(
    cfg: &PretrainConfig,
    data: &LabeledDataset,
    tokenizer: TokenizerState,
    device: &Device,
    out: Option<&Path>,
) -> Result<(Pretrainer, PretrainReport)> {
    let mut trainer = Pretrainer::new(cfg, tokenizer, data.len(), device)?;
    let diverged = match trainer.run(data, None, out) {
        Ok(()) => None,
        Err(CimError::Divergence { step, reason }) => Some(format!("step {step}: {reason}")),
        Err(e) => return Err(e),
    };
    if let Some(o) = out {
        trainer.save_enhancer(&o.join("enhancer.ckpt"))?;
        trainer.save_generator(&o.join("generator.ckpt"))?;
        trainer.save_checkpoint(&o.join("checkpoint.ckpt"))?;
    }
    let report = PretrainReport { steps: trainer.step, history: trainer.history.clone(), diverged };
    Ok((trainer, report))
}

/// Mean of the first and last `fraction` of a series.
pub fn head_tail_means(values: &[f64], fraction: f64) -> Option<(f64, f64)> {
    let k = ((values.len() as f64 * fraction).round() as usize).max(1);
    if values.len() < 2 * k {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}

/// Trailing moving average with window `w`.
pub fn moving_average(values: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    values
        .windows(w.min(values.len()).max(1))
        .map(|s| s.iter().sum::<f64>() / s.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests;
