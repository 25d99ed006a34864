//! Vision transformer enhancer and the small masked-token-prediction generator.

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::corruption::{GeneratorOutput, MaskSet};
use crate::error::{CimError, Result};
use crate::nn::{self, join, Init, LayerNorm, Linear, NamedParam};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    /// Patch side; equal to the tokenizer downsample factor so patches and tokens align.
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 192,
            depth: 8,
            heads: 3,
            mlp_ratio: 4.0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CimError::config("transformer depth must be >= 1"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CimError::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(CimError::config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn block_param_count(&self) -> usize {
        let (d, h) = (self.dim, self.hidden());
        4 * d + Linear::param_count(d, 3 * d) + Linear::param_count(d, d)
            + Linear::param_count(d, h)
            + Linear::param_count(h, d)
    }

    /// Patch embedding, class token, positions, blocks and the final norm.
    pub fn encoder_param_count(&self) -> usize {
        let d = self.dim;
        Linear::param_count(self.patch_dim(), d)
            + d
            + (self.num_patches() + 1) * d
            + self.depth * self.block_param_count()
            + 2 * d
    }
}

/// `(B, 3, H, W)` → `(B, n, p·p·3)`, patches row-major, pixels `(py, px, c)` inside.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(CimError::shape(format!(
            "image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(x.reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Inverse of [`patchify`] for a `gh×gw` grid.
pub fn unpatchify(x: &Tensor, patch: usize, gh: usize, gw: usize) -> Result<Tensor> {
    let (b, n, pd) = x.dims3()?;
    if n != gh * gw || pd != patch * patch * 3 {
        return Err(CimError::shape(format!(
            "cannot unpatchify ({b}, {n}, {pd}) onto a {gh}x{gw} grid of {patch}px patches"
        )));
    }
    Ok(x.reshape((b, gh, gw, patch, patch, 3))?
        .permute((0, 5, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, 3, gh * patch, gw * patch))?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        let att = nn::softmax_last(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer block without dropout, drop-path or layer scale.
#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(init: &mut Init, cfg: &ViTConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(init, d)?,
            attn: Attention {
                qkv: Linear::new(init, d, 3 * d)?,
                proj: Linear::new(init, d, d)?,
                heads: cfg.heads,
            },
            norm2: LayerNorm::new(init, d)?,
            fc1: Linear::new(init, d, cfg.hidden())?,
            fc2: Linear::new(init, cfg.hidden(), d)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.norm1.params(&join(prefix, "norm1"));
        v.extend(self.attn.qkv.params(&join(prefix, "attn.qkv")));
        v.extend(self.attn.proj.params(&join(prefix, "attn.proj")));
        v.extend(self.norm2.params(&join(prefix, "norm2")));
        v.extend(self.fc1.params(&join(prefix, "mlp.fc1")));
        v.extend(self.fc2.params(&join(prefix, "mlp.fc2")));
        v
    }
}

/// Patch embedding plus the first `L` transformer blocks, held by reference in
/// both the generator and a ViT enhancer when weight sharing is on.
#[derive(Debug, Clone)]
pub struct SharedStem {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
}

impl SharedStem {
    pub fn new(init: &mut Init, cfg: &ViTConfig, layers: usize) -> Result<Self> {
        Ok(Self {
            patch_embed: Linear::new(init, cfg.patch_dim(), cfg.dim)?,
            blocks: (0..layers)
                .map(|_| Block::new(init, cfg))
                .collect::<Result<_>>()?,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.patch_embed.params(&join(prefix, "patch_embed"));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.params(&join(prefix, &format!("blocks.{i}"))));
        }
        v
    }

    /// Closed-form element count of an `L`-layer stem.
    pub fn param_count(cfg: &ViTConfig, layers: usize) -> usize {
        Linear::param_count(cfg.patch_dim(), cfg.dim) + layers * cfg.block_param_count()
    }
}

/// Shared trunk of the enhancer ViT and the generator.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub cfg: ViTConfig,
    pub patch_embed: Linear,
    pub cls_token: Var,
    pub pos_embed: Var,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(init: &mut Init, cfg: &ViTConfig, stem: Option<&SharedStem>) -> Result<Self> {
        cfg.validate()?;
        let shared = stem.map_or(0, SharedStem::layers);
        if shared > cfg.depth {
            return Err(CimError::config(format!(
                "cannot share {shared} layers with a depth-{} transformer",
                cfg.depth
            )));
        }
        let patch_embed = match stem {
            Some(s) => {
                if s.patch_embed.in_dim() != cfg.patch_dim() || s.patch_embed.out_dim() != cfg.dim {
                    return Err(CimError::config("shared stem width or patch size mismatch"));
                }
                s.patch_embed.clone()
            }
            None => Linear::new(init, cfg.patch_dim(), cfg.dim)?,
        };
        let mut blocks: Vec<Block> = stem.map(|s| s.blocks.clone()).unwrap_or_default();
        while blocks.len() < cfg.depth {
            blocks.push(Block::new(init, cfg)?);
        }
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            cls_token: init.trunc_normal(&[1, 1, cfg.dim], 0.02)?,
            pos_embed: init.trunc_normal(&[1, cfg.num_patches() + 1, cfg.dim], 0.02)?,
            blocks,
            norm: LayerNorm::new(init, cfg.dim)?,
        })
    }

    pub fn embed_patches(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h != self.cfg.image_size || w != self.cfg.image_size {
            return Err(CimError::shape(format!(
                "transformer built for {0}x{0} images, got {h}x{w}",
                self.cfg.image_size
            )));
        }
        self.patch_embed.forward(&patchify(x, self.cfg.patch)?)
    }

    /// `(B, n, D)` patch tokens → `(B, n + 1, D)` normalized outputs, class token first.
    pub fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        let cls = self.cls_token.as_tensor().broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[&cls, tokens], 1)?.broadcast_add(self.pos_embed.as_tensor())?;
        for blk in &self.blocks {
            x = blk.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.patch_embed.params(&join(prefix, "patch_embed"));
        v.push(NamedParam::new(join(prefix, "cls_token"), &self.cls_token));
        v.push(NamedParam::new(join(prefix, "pos_embed"), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.params(&join(prefix, &format!("blocks.{i}"))));
        }
        v.extend(self.norm.params(&join(prefix, "norm")));
        v
    }
}

/// The enhancer ViT: 1-D learned absolute positions, class token, no dropout.
#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub encoder: TransformerEncoder,
}

impl VisionTransformer {
    pub fn new(init: &mut Init, cfg: &ViTConfig, stem: Option<&SharedStem>) -> Result<Self> {
        Ok(Self {
            encoder: TransformerEncoder::new(init, cfg, stem)?,
        })
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.encoder.cfg
    }

    /// Returns `(cls (B, D), patches (B, n, D))`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.encoder.encode(&self.encoder.embed_patches(x)?)?;
        let n = out.dim(1)? - 1;
        Ok((out.narrow(1, 0, 1)?.squeeze(1)?, out.narrow(1, 1, n)?))
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        self.encoder.params(prefix)
    }

    pub fn param_count(cfg: &ViTConfig) -> usize {
        cfg.encoder_param_count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub depth: usize,
    /// Transformer width; `None` follows the enhancer (ViT) or uses 384 (CNN).
    pub width: Option<usize>,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Patch embedding and first `share_layers` blocks shared with a ViT enhancer.
    pub share_layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: None,
            heads: 3,
            mlp_ratio: 4.0,
            share_layers: 0,
        }
    }
}

/// Fully resolved generator architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub vit: ViTConfig,
    pub vocab_size: usize,
}

impl GeneratorSpec {
    pub fn param_count(&self) -> usize {
        self.vit.encoder_param_count()
            + self.vit.dim
            + Linear::param_count(self.vit.dim, self.vocab_size)
    }
}

/// Small transformer predicting visual tokens at masked positions.
#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub encoder: TransformerEncoder,
    pub mask_embedding: Var,
    pub head: Linear,
}

impl Generator {
    pub fn new(init: &mut Init, spec: &GeneratorSpec, stem: Option<&SharedStem>) -> Result<Self> {
        if spec.vocab_size < 2 {
            return Err(CimError::config("generator vocabulary must have >= 2 entries"));
        }
        Ok(Self {
            spec: spec.clone(),
            encoder: TransformerEncoder::new(init, &spec.vit, stem)?,
            mask_embedding: init.trunc_normal(&[spec.vit.dim], 0.02)?,
            head: Linear::new(init, spec.vit.dim, spec.vocab_size)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn num_positions(&self) -> usize {
        self.spec.vit.num_patches()
    }

    /// Logits `(B, n, V)` at every position given a `(B, n)` 0/1 mask tensor.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let tokens = self.encoder.embed_patches(x)?;
        let masked = apply_mask(&tokens, mask, self.mask_embedding.as_tensor())?;
        let out = self.encoder.encode(&masked)?;
        let n = out.dim(1)? - 1;
        self.head.forward(&out.narrow(1, 1, n)?)
    }

    /// Logits at the masked positions of each image, rows in ascending position order.
    pub fn predict(&self, x: &Tensor, masks: &[MaskSet]) -> Result<Vec<GeneratorOutput>> {
        let n = self.num_positions();
        let m = mask_tensor(masks, n, x.dtype(), x.device())?;
        let logits = self.forward(x, &m)?;
        masks
            .iter()
            .enumerate()
            .map(|(i, mask)| GeneratorOutput::gather(&logits.get(i)?, mask))
            .collect()
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.encoder.params(prefix);
        v.push(NamedParam::new(join(prefix, "mask_embedding"), &self.mask_embedding));
        v.extend(self.head.params(&join(prefix, "head")));
        v
    }
}

/// Rows of `embeddings` (`(B, n, D)` or `(n, D)`) where `mask` is 1 are replaced
/// by `mask_embedding`; other rows pass through unchanged.
pub fn apply_mask(embeddings: &Tensor, mask: &Tensor, mask_embedding: &Tensor) -> Result<Tensor> {
    let cond = mask.unsqueeze(mask.rank())?.to_dtype(DType::U8)?;
    let cond = cond.broadcast_as(embeddings.shape())?;
    let fill = mask_embedding.to_dtype(embeddings.dtype())?.broadcast_as(embeddings.shape())?;
    Ok(cond.where_cond(&fill, embeddings)?)
}

/// `(B, n)` 0/1 tensor from mask sets.
pub fn mask_tensor(
    masks: &[MaskSet],
    n: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let mut m = vec![0f32; masks.len() * n];
    for (i, mask) in masks.iter().enumerate() {
        if mask.n() != n {
            return Err(CimError::shape(format!(
                "mask over {} positions, model has {n}",
                mask.n()
            )));
        }
        for &p in mask.positions() {
            m[i * n + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(m, (masks.len(), n), device)?.to_dtype(dtype)?)
}
