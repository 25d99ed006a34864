//! Miniature residual CNN enhancer.
//!
//! Downsampling uses a 2×2 average pool ahead of the first block of each stage
//! (on both the residual and shortcut paths), followed by stride-1 convolutions.
//! Normalization is group norm so that features do not depend on batch composition.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::nn::{join, Conv2d, GroupNorm, Init, NamedParam, Padding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiniResNetConfig {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub groups: usize,
    /// Tokenizer downsample factor; one output feature per token cell.
    pub token_stride: usize,
    /// Average-pool native features onto the token grid when strides differ.
    pub align_pool: bool,
}

impl Default for MiniResNetConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![32, 64, 128],
            blocks_per_stage: 1,
            groups: 8,
            token_stride: 8,
            align_pool: true,
        }
    }
}

impl MiniResNetConfig {
    pub fn native_stride(&self) -> usize {
        1 << self.stage_widths.len().saturating_sub(1)
    }

    pub fn out_dim(&self) -> usize {
        self.stage_widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(CimError::config("resnet needs at least one stage and block"));
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w % self.groups_for(w) != 0) {
            return Err(CimError::config(format!("width {w} incompatible with group norm")));
        }
        let s = self.native_stride();
        if self.token_stride == 0 || self.token_stride % s != 0 {
            return Err(CimError::config(format!(
                "native stride {s} cannot be pooled onto token stride {}",
                self.token_stride
            )));
        }
        if s != self.token_stride && !self.align_pool {
            return Err(CimError::config(format!(
                "native stride {s} differs from token stride {} and alignment pooling is off",
                self.token_stride
            )));
        }
        Ok(())
    }

    fn groups_for(&self, width: usize) -> usize {
        let mut g = self.groups.clamp(1, width);
        while width % g != 0 {
            g -= 1;
        }
        g
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| Conv2d::param_count(i, o, k, false);
        let gn = |c: usize| 2 * c;
        let mut total = conv(3, self.stage_widths[0], 3) + gn(self.stage_widths[0]);
        let mut c_in = self.stage_widths[0];
        for &w in &self.stage_widths {
            for b in 0..self.blocks_per_stage {
                let i = if b == 0 { c_in } else { w };
                total += conv(i, w, 3) + gn(w) + conv(w, w, 3) + gn(w);
                if b == 0 && i != w {
                    total += conv(i, w, 1) + gn(w);
                }
            }
            c_in = w;
        }
        total
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    pool: bool,
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pool { x.avg_pool2d(2)? } else { x.clone() };
        let h = self.gn1.forward(&self.conv1.forward(&x)?)?.relu()?;
        let h = self.gn2.forward(&self.conv2.forward(&h)?)?;
        let sc = match &self.shortcut {
            Some((c, g)) => g.forward(&c.forward(&x)?)?,
            None => x,
        };
        Ok((h + sc)?.relu()?)
    }

    fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.conv1.params(&join(prefix, "conv1"));
        v.extend(self.gn1.params(&join(prefix, "gn1")));
        v.extend(self.conv2.params(&join(prefix, "conv2")));
        v.extend(self.gn2.params(&join(prefix, "gn2")));
        if let Some((c, g)) = &self.shortcut {
            v.extend(c.params(&join(prefix, "shortcut.conv")));
            v.extend(g.params(&join(prefix, "shortcut.gn")));
        }
        v
    }
}

#[derive(Debug, Clone)]
pub struct MiniResNet {
    pub cfg: MiniResNetConfig,
    stem: (Conv2d, GroupNorm),
    stages: Vec<Vec<BasicBlock>>,
}

impl MiniResNet {
    pub fn new(init: &mut Init, cfg: &MiniResNetConfig) -> Result<Self> {
        cfg.validate()?;
        let w0 = cfg.stage_widths[0];
        let stem = (
            Conv2d::new(init, 3, w0, 3, 1, Padding::Zeros, false)?,
            GroupNorm::new(init, cfg.groups_for(w0), w0)?,
        );
        let mut stages = Vec::new();
        let mut c_in = w0;
        for (si, &w) in cfg.stage_widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_stage {
                let i = if b == 0 { c_in } else { w };
                let g = cfg.groups_for(w);
                let shortcut = if b == 0 && i != w {
                    Some((
                        Conv2d::new(init, i, w, 1, 1, Padding::Zeros, false)?,
                        GroupNorm::new(init, g, w)?,
                    ))
                } else {
                    None
                };
                blocks.push(BasicBlock {
                    pool: b == 0 && si > 0,
                    conv1: Conv2d::new(init, i, w, 3, 1, Padding::Zeros, false)?,
                    gn1: GroupNorm::new(init, g, w)?,
                    conv2: Conv2d::new(init, w, w, 3, 1, Padding::Zeros, false)?,
                    gn2: GroupNorm::new(init, g, w)?,
                    shortcut,
                });
            }
            stages.push(blocks);
            c_in = w;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out_dim()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Native-resolution feature map `(B, C, H/s, W/s)`.
    pub fn forward_native(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let s = self.cfg.token_stride;
        if h % s != 0 || w % s != 0 {
            return Err(CimError::shape(format!(
                "image {h}x{w} not divisible by token stride {s}"
            )));
        }
        let mut h = self.stem.1.forward(&self.stem.0.forward(x)?)?.relu()?;
        for stage in &self.stages {
            for blk in stage {
                h = blk.forward(&h)?;
            }
        }
        Ok(h)
    }

    /// One feature vector per token cell: `(B, h, w, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let native = self.forward_native(x)?;
        let k = self.cfg.token_stride / self.cfg.native_stride();
        let pooled = if k > 1 { native.avg_pool2d(k)? } else { native };
        Ok(pooled.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = self.stem.0.params(&join(prefix, "stem.conv"));
        v.extend(self.stem.1.params(&join(prefix, "stem.gn")));
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                v.extend(b.params(&join(prefix, &format!("stages.{si}.{bi}"))));
            }
        }
        v
    }
}
