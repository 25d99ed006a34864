//! Discrete image tokenizer: a small vector-quantized autoencoder that is
//! trained once, frozen, and then used to map images to token grids and back.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use log::{info, warn};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::data::{images_to_tensor, ImageTensor, LabeledDataset};
use crate::error::{CimError, Result};
use crate::nn::{self, AdamW, AdamWConfig, Conv2d, Init, NamedParam, Padding};
use crate::seeding::{self, tag};

pub const TOKENIZER_KIND: &str = "tokenizer";
pub const TOKENIZER_VERSION: &str = "cim-tokenizer/1";

/// `h×w` grid of visual-token ids over a vocabulary of size `vocab`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub vocab: usize,
    pub ids: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, vocab: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != h * w {
            return Err(CimError::shape(format!(
                "token grid {h}x{w} needs {} ids, got {}",
                h * w,
                ids.len()
            )));
        }
        if let Some(id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(CimError::validation(format!(
                "token id {id} out of range for vocabulary {vocab}"
            )));
        }
        Ok(Self { h, w, vocab, ids })
    }

    pub fn filled(h: usize, w: usize, vocab: usize, id: u32) -> Result<Self> {
        Self::new(h, w, vocab, vec![id; h * w])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// 8-byte header (`h: u16`, `w: u16`, `vocab: u32`) then row-major `u16` ids,
    /// all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.h > u16::MAX as usize || self.w > u16::MAX as usize || self.vocab > 1 << 16 {
            return Err(CimError::validation(
                "token grid too large for the u16 serialization",
            ));
        }
        let mut out = Vec::with_capacity(8 + 2 * self.ids.len());
        out.extend_from_slice(&(self.h as u16).to_le_bytes());
        out.extend_from_slice(&(self.w as u16).to_le_bytes());
        out.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        for &id in &self.ids {
            out.extend_from_slice(&(id as u16).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CimError::validation("token grid header truncated"));
        }
        let h = u16::from_le_bytes([bytes[0], bytes[1]]) as usize;
        let w = u16::from_le_bytes([bytes[2], bytes[3]]) as usize;
        let vocab = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 2 * h * w {
            return Err(CimError::validation(format!(
                "token grid body has {} bytes, expected {}",
                body.len(),
                2 * h * w
            )));
        }
        let ids = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as u32)
            .collect();
        Self::new(h, w, vocab, ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    /// Spatial downsample factor `f`; one token per `f×f` cell.
    pub downsample: usize,
    pub vocab_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub commitment: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub restart_every: usize,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            downsample: 8,
            vocab_size: 512,
            code_dim: 64,
            hidden: 64,
            commitment: 0.25,
            learning_rate: 2e-3,
            steps: 1500,
            batch_size: 32,
            restart_every: 50,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    fn validate(&self) -> Result<()> {
        if self.downsample < 2 {
            return Err(CimError::config(format!(
                "downsample factor must be >= 2, got {}",
                self.downsample
            )));
        }
        if self.vocab_size < 2 || self.vocab_size > 1 << 16 {
            return Err(CimError::config("vocab_size must be in [2, 65536]"));
        }
        if self.code_dim == 0 || self.hidden < 8 {
            return Err(CimError::config("code_dim must be > 0 and hidden >= 8"));
        }
        Ok(())
    }
}

/// `(B, C, h·f, w·f)` to `(B, C·f·f, h, w)`; each output cell holds one `f×f` patch.
fn space_to_depth(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, c, hh, ww) = x.dims4()?;
    let (h, w) = (hh / f, ww / f);
    Ok(x.reshape((b, c, h, f, w, f))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * f * f, h, w))?)
}

/// Inverse of [`space_to_depth`].
fn depth_to_space(x: &Tensor, f: usize) -> Result<Tensor> {
    let (b, cff, h, w) = x.dims4()?;
    let c = cff / (f * f);
    Ok(x.reshape((b, c, f, f, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, h * f, w * f))?)
}

// Both halves work on the token grid: pixels enter and leave through
// space-to-depth, so no convolution ever runs at full resolution.
#[derive(Debug, Clone)]
struct Encoder {
    f: usize,
    inp: Conv2d,
    mid: Conv2d,
    proj: Conv2d,
}

impl Encoder {
    fn new(init: &mut Init, cfg: &TokenizerConfig) -> Result<Self> {
        let f = cfg.downsample;
        Ok(Self {
            f,
            inp: Conv2d::new(init, 3 * f * f, cfg.hidden, 3, 1, Padding::Replicate, true)?,
            mid: Conv2d::new(init, cfg.hidden, cfg.hidden, 3, 1, Padding::Replicate, true)?,
            proj: Conv2d::new(init, cfg.hidden, cfg.code_dim, 1, 1, Padding::Replicate, true)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = space_to_depth(&x.affine(2.0, -1.0)?, self.f)?;
        let h = self.inp.forward(&x)?.relu()?;
        let h = (self.mid.forward(&h)?.relu()? + h)?;
        self.proj.forward(&h)
    }

    fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.inp.params(&format!("{prefix}.inp"));
        v.extend(self.mid.params(&format!("{prefix}.mid")));
        v.extend(self.proj.params(&format!("{prefix}.proj")));
        v
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    f: usize,
    proj: Conv2d,
    mid: Conv2d,
    refine: Conv2d,
    out: Conv2d,
}

impl Decoder {
    fn new(init: &mut Init, cfg: &TokenizerConfig) -> Result<Self> {
        let f = cfg.downsample;
        Ok(Self {
            f,
            proj: Conv2d::new(init, cfg.code_dim, cfg.hidden, 1, 1, Padding::Replicate, true)?,
            mid: Conv2d::new(init, cfg.hidden, cfg.hidden, 3, 1, Padding::Replicate, true)?,
            refine: Conv2d::new(init, cfg.hidden, cfg.hidden, 3, 1, Padding::Replicate, true)?,
            out: Conv2d::new(init, cfg.hidden, 3 * f * f, 1, 1, Padding::Replicate, true)?,
        })
    }

    fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.proj.forward(z)?.relu()?;
        let h = (self.mid.forward(&h)?.relu()? + h)?;
        let h = (self.refine.forward(&h)?.relu()? + h)?;
        // sigmoid
        let y = self.out.forward(&h)?.neg()?.exp()?.affine(1.0, 1.0)?.recip()?;
        depth_to_space(&y, self.f)
    }

    fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.proj.params(&format!("{prefix}.proj"));
        v.extend(self.mid.params(&format!("{prefix}.mid")));
        v.extend(self.refine.params(&format!("{prefix}.refine")));
        v.extend(self.out.params(&format!("{prefix}.out")));
        v
    }
}

/// Index of the nearest codebook row to `feature`; ties go to the lowest index.
pub fn nearest_code(codebook: &[f32], dim: usize, feature: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (i, entry) in codebook.chunks_exact(dim).enumerate() {
        let d: f32 = entry
            .iter()
            .zip(feature)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Encoder, codebook and decoder. Once frozen, parameter updates are refused.
#[derive(Debug, Clone)]
pub struct TokenizerState {
    cfg: TokenizerConfig,
    encoder: Encoder,
    decoder: Decoder,
    codebook: Var,
    frozen: bool,
}

impl TokenizerState {
    pub fn new(cfg: &TokenizerConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeding::rng_for(cfg.seed, &[tag("tokenizer-init")]);
        let mut init = Init::new(&mut rng, device, DType::F32);
        let encoder = Encoder::new(&mut init, cfg)?;
        let decoder = Decoder::new(&mut init, cfg)?;
        let codebook = init.uniform(&[cfg.vocab_size, cfg.code_dim], 1.0 / cfg.vocab_size as f64)?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            codebook,
            frozen: false,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn downsample(&self) -> usize {
        self.cfg.downsample
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    pub fn code_dim(&self) -> usize {
        self.cfg.code_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Idempotent.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn params(&self) -> Vec<NamedParam> {
        let mut v = self.encoder.params("encoder");
        v.extend(self.decoder.params("decoder"));
        v.push(NamedParam::new("codebook", &self.codebook));
        v
    }

    pub fn checksum(&self) -> Result<String> {
        nn::params_checksum(&self.params())
    }

    pub fn codebook(&self) -> Result<Vec<f32>> {
        Ok(self.codebook.as_tensor().flatten_all()?.to_vec1::<f32>()?)
    }

    /// Replaces the codebook rows. Refused once frozen.
    pub fn set_codebook(&mut self, values: &[f32]) -> Result<()> {
        if self.frozen {
            return Err(CimError::Frozen);
        }
        let (v, d) = (self.cfg.vocab_size, self.cfg.code_dim);
        if values.len() != v * d {
            return Err(CimError::shape("codebook size mismatch"));
        }
        let t = Tensor::from_slice(values, (v, d), self.codebook.device())?;
        self.codebook.set(&t)?;
        Ok(())
    }

    /// Applies one optimizer step to the tokenizer parameters. Refused once frozen.
    pub fn apply_update(
        &mut self,
        opt: &mut AdamW,
        grads: &candle_core::backprop::GradStore,
        lr: f64,
    ) -> Result<()> {
        if self.frozen {
            return Err(CimError::Frozen);
        }
        opt.step(grads, lr, 1.0)
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.downsample;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(CimError::shape(format!(
                "image {h}x{w} not divisible by downsample factor {f}"
            )));
        }
        Ok(())
    }

    /// Continuous encoder features `(B, code_dim, h, w)` for a `(B, 3, H, W)` batch.
    pub fn encode_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.check_dims(h, w)?;
        self.encoder.forward(x)
    }

    fn quantize(&self, z: &Tensor) -> Result<Vec<TokenGrid>> {
        let (b, d, h, w) = z.dims4()?;
        let flat = z
            .detach()
            .to_dtype(DType::F32)?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let codebook = self.codebook()?;
        let grids = flat
            .chunks_exact(h * w * d)
            .map(|img| {
                let ids = img
                    .chunks_exact(d)
                    .map(|f| nearest_code(&codebook, d, f) as u32)
                    .collect();
                TokenGrid::new(h, w, self.cfg.vocab_size, ids)
            })
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(grids.len(), b);
        Ok(grids)
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<TokenGrid>> {
        let x = x.to_dtype(DType::F32)?;
        let z = self.encode_features(&x)?;
        self.quantize(&z)
    }

    pub fn encode_tokens(&self, img: &ImageTensor) -> Result<TokenGrid> {
        let x = img.to_tensor(self.codebook.device(), DType::F32)?.unsqueeze(0)?;
        Ok(self.encode_batch(&x)?.remove(0))
    }

    fn lookup(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        let first = grids
            .first()
            .ok_or_else(|| CimError::shape("empty token grid batch"))?;
        let (h, w) = (first.h, first.w);
        let mut ids = Vec::with_capacity(grids.len() * h * w);
        for g in grids {
            if g.h != h || g.w != w {
                return Err(CimError::shape("token grids in a batch must share dimensions"));
            }
            if let Some(id) = g.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(CimError::validation(format!(
                    "token id {id} out of range for vocabulary {}",
                    self.cfg.vocab_size
                )));
            }
            ids.extend_from_slice(&g.ids);
        }
        let idx = Tensor::from_vec(ids, grids.len() * h * w, self.codebook.device())?;
        let z = self
            .codebook
            .as_tensor()
            .index_select(&idx, 0)?
            .reshape((grids.len(), h, w, self.cfg.code_dim))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        Ok(z)
    }

    /// Decodes a batch of grids into a detached `(B, 3, H, W)` tensor in `[0, 1]`.
    pub fn decode_batch(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        let z = self.lookup(grids)?;
        Ok(self.decoder.forward(&z)?.clamp(0.0, 1.0)?.detach())
    }

    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<ImageTensor> {
        let t = self.decode_batch(std::slice::from_ref(grid))?;
        ImageTensor::from_tensor(&t.get(0)?)
    }

    /// Mean squared reconstruction error and PSNR (dB) of decode∘encode over `images`.
    pub fn reconstruction_psnr(&self, images: &[ImageTensor]) -> Result<(f64, f64)> {
        let mut se = 0.0;
        let mut n = 0usize;
        for chunk in images.chunks(64) {
            let x = images_to_tensor(chunk, self.codebook.device(), DType::F32)?;
            let grids = self.encode_batch(&x)?;
            let y = self.decode_batch(&grids)?;
            se += nn::scalar(&(y - &x)?.sqr()?.sum_all()?)?;
            n += x.elem_count();
        }
        let mse = se / n.max(1) as f64;
        Ok((mse, 10.0 * (1.0 / mse.max(1e-12)).log10()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "version": TOKENIZER_VERSION,
            "downsample": self.cfg.downsample,
            "vocab_size": self.cfg.vocab_size,
            "code_dim": self.cfg.code_dim,
            "frozen": self.frozen,
            "config": self.cfg,
        });
        let mut c = Container::new(TOKENIZER_KIND, meta);
        for p in self.params() {
            c.push(p.name, p.var.as_tensor());
        }
        c.save(path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let c = Container::load_kind(path, TOKENIZER_KIND)?;
        if c.meta["version"] != TOKENIZER_VERSION {
            return Err(CimError::IncompatibleCheckpoint {
                path: path.to_path_buf(),
                reason: format!("tokenizer version {}", c.meta["version"]),
            });
        }
        let cfg: TokenizerConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut state = Self::new(&cfg, device)?;
        for p in state.params() {
            let t = c.require(&p.name)?;
            if t.dims() != p.var.as_tensor().dims() {
                return Err(CimError::IncompatibleCheckpoint {
                    path: path.to_path_buf(),
                    reason: format!("tensor {} has shape {:?}", p.name, t.dims()),
                });
            }
            p.var.set(&t.to_dtype(DType::F32)?.to_device(device)?)?;
        }
        state.frozen = c.meta["frozen"].as_bool().unwrap_or(false);
        Ok(state)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_recon_mse: f64,
    pub final_recon_mse: f64,
    pub dead_code_fraction: f64,
    pub usage_entropy: f64,
    pub restarts: usize,
    pub warnings: Vec<String>,
}

/// Code usage histogram over `images`.
pub fn code_usage(tok: &TokenizerState, images: &[ImageTensor]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; tok.vocab_size()];
    for chunk in images.chunks(64) {
        let x = images_to_tensor(chunk, tok.codebook.device(), DType::F32)?;
        for g in tok.encode_batch(&x)? {
            for id in g.ids {
                counts[id as usize] += 1;
            }
        }
    }
    Ok(counts)
}

/// Shannon entropy (nats) of a usage histogram.
pub fn usage_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

/// Trains a tokenizer with reconstruction, codebook and commitment losses and a
/// straight-through estimator. Unused codes are periodically re-seeded from
/// encoder outputs. The returned state is not frozen.
pub fn train_tokenizer(
    ds: &LabeledDataset,
    cfg: &TokenizerConfig,
    device: &Device,
) -> Result<(TokenizerState, TokenizerReport)> {
    if ds.is_empty() {
        return Err(CimError::config("cannot train a tokenizer on an empty dataset"));
    }
    let (h, w) = ds.image_size().expect("non-empty");
    let mut tok = TokenizerState::new(cfg, device)?;
    tok.check_dims(h, w)?;

    let batch = cfg.batch_size.max(1).min(ds.len());
    let pick = |step: u64| -> Vec<ImageTensor> {
        let mut rng = seeding::rng_for(cfg.seed, &[tag("tokenizer-batch"), step]);
        (0..batch)
            .map(|_| {
                let img = &ds.images[rng.random_range(0..ds.len())];
                if rng.random::<bool>() {
                    img.flip_horizontal()
                } else {
                    img.clone()
                }
            })
            .collect()
    };

    // Seed the codebook with encoder outputs so every code starts near data.
    {
        let x = images_to_tensor(&pick(u64::MAX), device, DType::F32)?;
        let feats = flat_features(&tok.encode_features(&x)?)?;
        let d = cfg.code_dim;
        let rows = feats.len() / d;
        let mut rng = seeding::rng_for(cfg.seed, &[tag("codebook-init")]);
        let mut cb = Vec::with_capacity(cfg.vocab_size * d);
        for _ in 0..cfg.vocab_size {
            let r = rng.random_range(0..rows);
            cb.extend(feats[r * d..(r + 1) * d].iter().map(|v| v + rng.random_range(-1e-3f32..1e-3)));
        }
        tok.set_codebook(&cb)?;
    }

    let mut opt = AdamW::with_defaults(
        &tok.params(),
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut usage = vec![0usize; cfg.vocab_size];
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut recons = Vec::with_capacity(cfg.steps);
    let mut restarts = 0;
    for step in 0..cfg.steps as u64 {
        let x = images_to_tensor(&pick(step), device, DType::F32)?;
        let z_e = tok.encode_features(&x)?;
        let grids = tok.quantize(&z_e)?;
        for g in &grids {
            for &id in &g.ids {
                usage[id as usize] += 1;
            }
        }
        let z_q = tok.lookup(&grids)?;
        let z_st = (&z_e + (&z_q - &z_e)?.detach())?;
        let recon = tok.decoder.forward(&z_st)?;
        let recon_loss = (recon - &x)?.sqr()?.mean_all()?;
        let codebook_loss = (&z_q - z_e.detach())?.sqr()?.mean_all()?;
        let commit_loss = (&z_e - z_q.detach())?.sqr()?.mean_all()?;
        let loss = ((&recon_loss + codebook_loss)? + (commit_loss * cfg.commitment)?)?;
        let lv = nn::scalar(&loss)?;
        if !lv.is_finite() {
            return Err(CimError::NonFinite(format!("tokenizer loss at step {step}")));
        }
        losses.push(lv);
        recons.push(nn::scalar(&recon_loss)?);
        let grads = loss.backward()?;
        let lr = cosine_lr(cfg.learning_rate, step as usize, cfg.steps);
        tok.apply_update(&mut opt, &grads, lr)?;

        let near_end = step as usize + cfg.restart_every >= cfg.steps;
        if cfg.restart_every > 0 && (step + 1) % cfg.restart_every as u64 == 0 && !near_end {
            let dead: Vec<usize> = (0..cfg.vocab_size).filter(|&i| usage[i] == 0).collect();
            if !dead.is_empty() {
                let feats = flat_features(&z_e)?;
                let d = cfg.code_dim;
                let rows = feats.len() / d;
                let mut cb = tok.codebook()?;
                let mut rng = seeding::rng_for(cfg.seed, &[tag("codebook-restart"), step]);
                for &i in &dead {
                    let r = rng.random_range(0..rows);
                    cb[i * d..(i + 1) * d].copy_from_slice(&feats[r * d..(r + 1) * d]);
                }
                tok.set_codebook(&cb)?;
                restarts += dead.len();
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }

    let counts = code_usage(&tok, &ds.images[..ds.len().min(1024)])?;
    let dead_fraction = counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64;
    let mut warnings = Vec::new();
    if dead_fraction >= 0.5 {
        let msg = format!(
            "codebook collapse: {:.1}% of codes unused at end of training",
            100.0 * dead_fraction
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    let tail = |v: &[f64]| {
        let k = v.len().clamp(1, 10);
        v[v.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    };
    let report = TokenizerReport {
        steps: cfg.steps,
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: if losses.is_empty() { f64::NAN } else { tail(&losses) },
        initial_recon_mse: recons.first().copied().unwrap_or(f64::NAN),
        final_recon_mse: if recons.is_empty() { f64::NAN } else { tail(&recons) },
        dead_code_fraction: dead_fraction,
        usage_entropy: usage_entropy(&counts),
        restarts,
        warnings,
    };
    info!(
        "tokenizer trained: loss {:.4} -> {:.4}, dead codes {:.1}%",
        report.initial_loss,
        report.final_loss,
        100.0 * dead_fraction
    );
    Ok((tok, report))
}

fn flat_features(z: &Tensor) -> Result<Vec<f32>> {
    Ok(z.detach()
        .permute((0, 2, 3, 1))?
        .contiguous()?
        .flatten_all()?
        .to_vec1::<f32>()?)
}

fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    let warm = (total / 20).max(1);
    if step < warm {
        return peak * (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (total - warm).max(1) as f64;
    peak * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
