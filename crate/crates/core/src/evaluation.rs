//! Representation quality: linear probe, fine-tuning with layer-wise rate
//! decay, and replaced-token detection metrics.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::{mask_tensor, DetectHead, Enhancer, Generator, Pooling};
use crate::corruption::{corrupt_tokens_from_logits, replacement_flags, CorruptionConfig};
use crate::data::{augment, images_to_tensor, AugmentConfig, ImageTensor, LabeledDataset};
use crate::error::{CimError, Result};
use crate::nn::{self, params_checksum, AdamW, AdamWConfig, Init, Linear, OptimParam};
use crate::seeding::{self, tag};
use crate::tokenizer::TokenizerState;
use crate::training::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub train_top1: f64,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub pooling: Pooling,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { seed: 0, steps: 300, learning_rate: 1e-2, weight_decay: 1e-4, pooling: Pooling::Mean }
    }
}

fn check_splits(train: &LabeledDataset, val: &LabeledDataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(CimError::InvalidEvaluation("probe needs non-empty train and validation sets".into()));
    }
    if train.fingerprint() == val.fingerprint() {
        return Err(CimError::InvalidEvaluation(
            "train and validation sets are identical; accuracy would measure memorization".into(),
        ));
    }
    if train.num_classes() != val.num_classes() {
        return Err(CimError::InvalidEvaluation(format!(
            "train has {} classes, validation has {}",
            train.num_classes(),
            val.num_classes()
        )));
    }
    Ok(())
}

fn param_dtype(enhancer: &Enhancer) -> DType {
    enhancer.params("").first().map(|p| p.var.dtype()).unwrap_or(DType::F32)
}

fn param_device(enhancer: &Enhancer) -> Device {
    enhancer
        .params("")
        .first()
        .map(|p| p.var.device().clone())
        .unwrap_or(Device::Cpu)
}

/// Pooled features `(N, D)` as f64, computed without gradient tracking.
pub fn extract_features(enhancer: &Enhancer, images: &[ImageTensor], pooling: Pooling) -> Result<Vec<Vec<f64>>> {
    let (device, dtype) = (param_device(enhancer), param_dtype(enhancer));
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let x = images_to_tensor(chunk, &device, dtype)?;
        let f = enhancer.pooled(&x, pooling)?.detach().to_dtype(DType::F64)?;
        out.extend(f.to_vec2::<f64>()?);
    }
    Ok(out)
}

fn standardize(train: &mut [Vec<f64>], val: &mut [Vec<f64>]) {
    let d = train.first().map(|r| r.len()).unwrap_or(0);
    let n = train.len() as f64;
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt() + 1e-6;
        for r in train.iter_mut().chain(val.iter_mut()) {
            r[j] = (r[j] - mean) / std;
        }
    }
}

fn accuracy(pred: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        seen[y] += 1;
        hit[y] += usize::from(p == y);
    }
    let top1 = hit.iter().sum::<usize>() as f64 / labels.len().max(1) as f64;
    let per = hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.0 } else { h as f64 / s as f64 })
        .collect();
    (top1, per)
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits
        .argmax(1)?
        .to_dtype(DType::U32)?
        .to_vec1::<u32>()?
        .into_iter()
        .map(|i| i as usize)
        .collect())
}

fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let y: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    let y = Tensor::from_vec(y, (labels.len(), 1), logits.device())?;
    Ok(nn::log_softmax_last(logits)?.gather(&y, 1)?.mean_all()?.neg()?)
}

/// Softmax regression on frozen, standardized pooled features, trained
/// full-batch with AdamW.
pub fn linear_probe(
    enhancer: &Enhancer,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    check_splits(train, val)?;
    let before = params_checksum(&enhancer.params(""))?;
    let mut xtr = extract_features(enhancer, &train.images, cfg.pooling)?;
    let mut xva = extract_features(enhancer, &val.images, cfg.pooling)?;
    let d = enhancer.dim();
    if xtr.first().map(|r| r.len()) != Some(d) {
        return Err(CimError::shape("feature dimension differs from the encoder width"));
    }
    standardize(&mut xtr, &mut xva);
    let classes = train.num_classes();
    let device = Device::Cpu;
    let to_t = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (rows.len(), d), &device)?)
    };
    let (ttr, tva) = (to_t(&xtr)?, to_t(&xva)?);
    let mut rng = seeding::rng_for(cfg.seed, &[tag("probe")]);
    let mut init = Init::new(&mut rng, &device, DType::F64);
    let head = Linear::new(&mut init, d, classes)?;
    let mut opt = AdamW::with_defaults(
        &head.params("probe"),
        AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() },
    )?;
    for s in 0..cfg.steps {
        let loss = cross_entropy(&head.forward(&ttr)?, &train.labels)?;
        let grads = loss.backward()?;
        let lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / cfg.steps as f64).cos());
        opt.step(&grads, lr, 1.0)?;
    }
    let (train_top1, _) = accuracy(&argmax_rows(&head.forward(&ttr)?)?, &train.labels, classes);
    let (top1, per_class) = accuracy(&argmax_rows(&head.forward(&tva)?)?, &val.labels, classes);
    if params_checksum(&enhancer.params(""))? != before {
        return Err(CimError::validation("linear probe modified the encoder"));
    }
    Ok(ProbeResult { top1, per_class, train_top1, seed: cfg.seed, config: serde_json::to_value(cfg)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_learning_rate: f64,
    pub min_learning_rate: f64,
    pub warmup_epochs: f64,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub pooling: Pooling,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 32,
            peak_learning_rate: 1e-3,
            min_learning_rate: 1e-6,
            warmup_epochs: 1.0,
            layer_decay: 0.8,
            weight_decay: 0.05,
            augment: true,
            pooling: Pooling::Mean,
        }
    }
}

/// Multiplier `decay^(L − layer)` for every enhancer parameter, where `L` is the
/// number of blocks (ViT) or stages (CNN).
pub fn layer_lr_scales(enhancer: &Enhancer, decay: f64) -> Vec<(String, f64)> {
    let top = enhancer.num_layers();
    enhancer
        .params("")
        .into_iter()
        .map(|p| {
            let id = enhancer.layer_id(&p.name);
            (p.name, decay.powi((top - id.min(top)) as i32))
        })
        .collect()
}

/// Independent copy of an enhancer with fresh storage.
pub fn deep_copy(enhancer: &Enhancer) -> Result<Enhancer> {
    let (device, dtype) = (param_device(enhancer), param_dtype(enhancer));
    let mut rng = seeding::rng_for(0, &[]);
    let mut init = Init::new(&mut rng, &device, dtype);
    let copy = Enhancer::new(&mut init, &enhancer.config(), None)?;
    for (dst, src) in copy.params("").iter().zip(enhancer.params("")) {
        dst.var.set(&src.var.as_tensor().copy()?)?;
    }
    Ok(copy)
}

/// End-to-end supervised training of a copy of `enhancer` plus a linear head,
/// with layer-wise learning-rate decay. The input encoder is left untouched.
pub fn finetune(
    enhancer: &Enhancer,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &FinetuneConfig,
) -> Result<(Enhancer, ProbeResult)> {
    check_splits(train, val)?;
    if !(cfg.layer_decay > 0.0 && cfg.layer_decay <= 1.0) {
        return Err(CimError::config(format!("layer_decay must be in (0, 1], got {}", cfg.layer_decay)));
    }
    let model = deep_copy(enhancer)?;
    let (device, dtype) = (param_device(&model), param_dtype(&model));
    let classes = train.num_classes();
    let mut rng = seeding::rng_for(cfg.seed, &[tag("finetune-init")]);
    let mut init = Init::new(&mut rng, &device, dtype);
    let head = Linear::new(&mut init, model.dim(), classes)?;
    let scales = layer_lr_scales(&model, cfg.layer_decay);
    let mut params: Vec<OptimParam> = model
        .params("")
        .into_iter()
        .zip(&scales)
        .map(|(p, (_, s))| OptimParam {
            decay: nn::default_decay(&p.name, p.var.as_tensor().rank()),
            param: p,
            lr_scale: *s,
        })
        .collect();
    params.extend(head.params("head").into_iter().map(|p| OptimParam {
        decay: nn::default_decay(&p.name, p.var.as_tensor().rank()),
        param: p,
        lr_scale: 1.0,
    }));
    let mut opt = AdamW::new(params, AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() })?;
    let spe = train.len().div_ceil(cfg.batch_size.max(1));
    let schedule = Schedule {
        peak: cfg.peak_learning_rate,
        floor: cfg.min_learning_rate,
        warmup_steps: (cfg.warmup_epochs * spe as f64).round() as usize,
        total_steps: cfg.epochs * spe,
    };
    let size = train.image_size().map(|(h, _)| h).unwrap_or(32);
    let aug = AugmentConfig { out_size: size, ..AugmentConfig::default() };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs as u64 {
        let batches = crate::data::iterate_batches(train, cfg.batch_size, cfg.seed, epoch)?;
        for batch in batches {
            let mut arng = seeding::rng_for(cfg.seed, &[tag("finetune-aug"), step as u64]);
            let images = if cfg.augment {
                batch.images.iter().map(|i| augment(i, &mut arng, &aug)).collect::<Result<Vec<_>>>()?
            } else {
                batch.images
            };
            let x = images_to_tensor(&images, &device, dtype)?;
            let logits = head.forward(&model.pooled(&x, cfg.pooling)?)?;
            let loss = cross_entropy(&logits, &batch.labels)?;
            let grads = loss.backward()?;
            opt.step(&grads, schedule.lr_at(step), 1.0)?;
            step += 1;
        }
    }
    let predict = |ds: &LabeledDataset| -> Result<Vec<usize>> {
        let mut pred = Vec::with_capacity(ds.len());
        for chunk in ds.images.chunks(64) {
            let x = images_to_tensor(chunk, &device, dtype)?;
            pred.extend(argmax_rows(&head.forward(&model.pooled(&x, cfg.pooling)?)?.detach())?);
        }
        Ok(pred)
    };
    let (train_top1, _) = accuracy(&predict(train)?, &train.labels, classes);
    let (top1, per_class) = accuracy(&predict(val)?, &val.labels, classes);
    let result = ProbeResult { top1, per_class, train_top1, seed: cfg.seed, config: serde_json::to_value(cfg)? };
    Ok((model, result))
}

/// Area under the ROC curve via the rank-sum statistic, ties averaged.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CimError::shape("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CimError::NonFinite("detection scores".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(CimError::InvalidEvaluation("AUC needs both positive and negative positions".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&t| labels[order[t]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevdetMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub flag_fraction: f64,
    pub positions: usize,
}

/// Scores every token position of freshly corrupted `images` and compares the
/// detection logits with the true replacement flags.
#[allow(clippy::too_many_arguments)]
pub fn revdet_metrics(
    enhancer: &Enhancer,
    head: &DetectHead,
    generator: &Generator,
    tokenizer: &TokenizerState,
    images: &[ImageTensor],
    corruption: &CorruptionConfig,
    seed: u64,
) -> Result<RevdetMetrics> {
    if !tokenizer.is_frozen() {
        return Err(CimError::Frozen);
    }
    let (device, dtype) = (param_device(enhancer), param_dtype(enhancer));
    let gen_dtype = generator.mask_embedding.dtype();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (b, chunk) in images.chunks(32).enumerate() {
        let mut mrng = seeding::rng_for(seed, &[tag("eval-mask"), b as u64]);
        let mut srng = seeding::rng_for(seed, &[tag("eval-sample"), b as u64]);
        let x = images_to_tensor(chunk, &device, DType::F32)?;
        let golden = tokenizer.encode_batch(&x)?;
        let (gh, gw) = (golden[0].h, golden[0].w);
        let masks = (0..chunk.len())
            .map(|_| corruption.mask.sample(gh, gw, &mut mrng))
            .collect::<Result<Vec<_>>>()?;
        let m = mask_tensor(&masks, gh * gw, gen_dtype, &device)?;
        let logits = generator.forward(&x.to_dtype(gen_dtype)?, &m)?.detach();
        let corrupted =
            corrupt_tokens_from_logits(&logits, &golden, &masks, corruption.sampling, corruption.temperature, &mut srng)?;
        let xc = tokenizer.decode_batch(&corrupted)?.to_dtype(dtype)?;
        let out = head.forward(&enhancer.token_features(&xc)?)?.detach().to_dtype(DType::F64)?;
        for (row, (g, c)) in out.to_vec2::<f64>()?.into_iter().zip(golden.iter().zip(&corrupted)) {
            let f = replacement_flags(g, c)?;
            scores.extend(row);
            labels.extend(f.flags.iter().map(|&v| v == 1));
        }
    }
    let correct = scores.iter().zip(&labels).filter(|(&s, &l)| (s > 0.0) == l).count();
    let flagged = labels.iter().filter(|&&l| l).count();
    Ok(RevdetMetrics {
        auc: auc(&scores, &labels)?,
        accuracy: correct as f64 / labels.len().max(1) as f64,
        flag_fraction: flagged as f64 / labels.len().max(1) as f64,
        positions: labels.len(),
    })
}

/// Random-init enhancer with the same architecture, for baselines.
pub fn random_enhancer(like: &Enhancer, seed: u64) -> Result<Enhancer> {
    let (device, dtype) = (param_device(like), param_dtype(like));
    let mut rng = seeding::rng_for(seed, &[tag("random-init")]);
    let mut init = Init::new(&mut rng, &device, dtype);
    Enhancer::new(&mut init, &like.config(), None)
}

#[cfg(test)]
mod tests;
