//! Network architectures: the generator, the two enhancer families, the heads,
//! and the optional stem shared between generator and ViT enhancer.

mod heads;
mod resnet;
mod vit;

pub use heads::{DetectHead, PixelHead};
pub use resnet::{MiniResNet, MiniResNetConfig};
pub use vit::{
    apply_mask, mask_tensor, patchify, unpatchify, Attention, Block, Generator, GeneratorConfig,
    GeneratorSpec, SharedStem, TransformerEncoder, ViTConfig, VisionTransformer,
};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::nn::{Init, NamedParam};

/// Width of the generator when the enhancer is a CNN.
pub const CNN_GENERATOR_WIDTH: usize = 384;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnhancerConfig {
    Vit(ViTConfig),
    Resnet(MiniResNetConfig),
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig::Vit(ViTConfig::default())
    }
}

impl EnhancerConfig {
    pub fn is_vit(&self) -> bool {
        matches!(self, EnhancerConfig::Vit(_))
    }

    pub fn dim(&self) -> usize {
        match self {
            EnhancerConfig::Vit(c) => c.dim,
            EnhancerConfig::Resnet(c) => c.out_dim(),
        }
    }

    /// Token-grid cell size in pixels.
    pub fn patch(&self) -> usize {
        match self {
            EnhancerConfig::Vit(c) => c.patch,
            EnhancerConfig::Resnet(c) => c.token_stride,
        }
    }

    /// Makes the enhancer agree with the tokenizer grid and image size.
    pub fn aligned(&self, image_size: usize, downsample: usize) -> Self {
        match self {
            EnhancerConfig::Vit(c) => EnhancerConfig::Vit(ViTConfig {
                image_size,
                patch: downsample,
                ..c.clone()
            }),
            EnhancerConfig::Resnet(c) => EnhancerConfig::Resnet(MiniResNetConfig {
                token_stride: downsample,
                ..c.clone()
            }),
        }
    }
}

impl GeneratorConfig {
    /// Resolves width, heads and grid against the enhancer and tokenizer.
    pub fn resolve(
        &self,
        enhancer: &EnhancerConfig,
        image_size: usize,
        downsample: usize,
        vocab_size: usize,
    ) -> Result<GeneratorSpec> {
        let width = self.width.unwrap_or(match enhancer {
            EnhancerConfig::Vit(c) => c.dim,
            EnhancerConfig::Resnet(_) => CNN_GENERATOR_WIDTH,
        });
        let vit = ViTConfig {
            image_size,
            patch: downsample,
            dim: width,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        };
        vit.validate()?;
        Ok(GeneratorSpec { vit, vocab_size })
    }
}

/// Builds the stem shared by the generator and a ViT enhancer, or `None` when
/// `layers == 0`.
pub fn build_shared_stem(
    init: &mut Init,
    generator: &GeneratorSpec,
    enhancer: &EnhancerConfig,
    layers: usize,
) -> Result<Option<SharedStem>> {
    if layers == 0 {
        return Ok(None);
    }
    let EnhancerConfig::Vit(enh) = enhancer else {
        return Err(CimError::config(
            "weight sharing requires a ViT enhancer; set share_layers = 0 for CNNs",
        ));
    };
    let g = &generator.vit;
    if g.dim != enh.dim || g.patch != enh.patch || g.image_size != enh.image_size {
        return Err(CimError::config(
            "shared stem needs equal width, patch and image size in generator and enhancer",
        ));
    }
    if g.mlp_ratio != enh.mlp_ratio || g.heads != enh.heads {
        return Err(CimError::config(
            "shared blocks need equal heads and mlp ratio in generator and enhancer",
        ));
    }
    if layers > g.depth.min(enh.depth) {
        return Err(CimError::config(format!(
            "cannot share {layers} layers: depths are {} and {}",
            g.depth, enh.depth
        )));
    }
    Ok(Some(SharedStem::new(init, enh, layers)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone)]
pub enum Enhancer {
    Vit(VisionTransformer),
    Resnet(MiniResNet),
}

impl Enhancer {
    pub fn new(init: &mut Init, cfg: &EnhancerConfig, stem: Option<&SharedStem>) -> Result<Self> {
        match cfg {
            EnhancerConfig::Vit(c) => Ok(Enhancer::Vit(VisionTransformer::new(init, c, stem)?)),
            EnhancerConfig::Resnet(c) => {
                if stem.is_some() {
                    return Err(CimError::config("a CNN enhancer cannot take a shared stem"));
                }
                Ok(Enhancer::Resnet(MiniResNet::new(init, c)?))
            }
        }
    }

    pub fn config(&self) -> EnhancerConfig {
        match self {
            Enhancer::Vit(v) => EnhancerConfig::Vit(v.cfg().clone()),
            Enhancer::Resnet(r) => EnhancerConfig::Resnet(r.cfg.clone()),
        }
    }

    pub fn dim(&self) -> usize {
        self.config().dim()
    }

    /// Per-token-cell features `(B, n, D)`, row-major over the token grid.
    pub fn token_features(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Enhancer::Vit(v) => Ok(v.forward(x)?.1),
            Enhancer::Resnet(r) => {
                let f = r.forward(x)?;
                let (b, h, w, c) = f.dims4()?;
                Ok(f.reshape((b, h * w, c))?)
            }
        }
    }

    /// Image-level features `(B, D)`.
    pub fn pooled(&self, x: &Tensor, pooling: Pooling) -> Result<Tensor> {
        match (self, pooling) {
            (Enhancer::Vit(v), Pooling::Cls) => Ok(v.forward(x)?.0),
            (Enhancer::Resnet(_), Pooling::Cls) => Err(CimError::config(
                "class-token pooling is only available for ViT enhancers",
            )),
            (_, Pooling::Mean) => Ok(self.token_features(x)?.mean(1)?),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        match self {
            Enhancer::Vit(v) => v.params(prefix),
            Enhancer::Resnet(r) => r.params(prefix),
        }
    }

    /// Number of depth levels above the input layer (ViT blocks or CNN stages).
    pub fn num_layers(&self) -> usize {
        match self {
            Enhancer::Vit(v) => v.cfg().depth,
            Enhancer::Resnet(r) => r.num_stages(),
        }
    }

    /// Depth level of a parameter (name relative to this module): 0 for the
    /// input embedding or stem, `i + 1` for block or stage `i`, and
    /// [`Enhancer::num_layers`] for everything on top (final norm, heads).
    pub fn layer_id(&self, name: &str) -> usize {
        let top = self.num_layers();
        let level = |key: &str| -> Option<usize> {
            let rest = name.split(key).nth(1)?;
            rest.split('.').next()?.parse::<usize>().ok().map(|i| i + 1)
        };
        match self {
            Enhancer::Vit(_) => {
                if ["patch_embed", "cls_token", "pos_embed"].iter().any(|k| name.contains(k)) {
                    0
                } else {
                    level("blocks.").unwrap_or(top)
                }
            }
            Enhancer::Resnet(_) => {
                if name.contains("stem.") {
                    0
                } else {
                    level("stages.").unwrap_or(top)
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum EnhancerHead {
    Pixel(PixelHead),
    Detect(DetectHead),
}

impl EnhancerHead {
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            EnhancerHead::Pixel(h) => h.forward(features),
            EnhancerHead::Detect(h) => h.forward(features),
        }
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        match self {
            EnhancerHead::Pixel(h) => h.params(prefix),
            EnhancerHead::Detect(h) => h.params(prefix),
        }
    }
}

/// Mean over the last dimension; convenience for pooled probes.
pub fn mean_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?)
}
