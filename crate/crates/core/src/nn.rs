//! Parameters, layers and the AdamW optimizer shared by every network in the crate.

use std::collections::HashSet;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, TensorId, Var, D};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CimError, Result};
use crate::seeding::Rng;

/// A trainable tensor and its module path.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub var: Var,
}

impl NamedParam {
    pub fn new(name: impl Into<String>, var: &Var) -> Self {
        Self {
            name: name.into(),
            var: var.clone(),
        }
    }

    pub fn id(&self) -> TensorId {
        self.var.as_tensor().id()
    }

    pub fn elem_count(&self) -> usize {
        self.var.as_tensor().elem_count()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Drops repeated tensors (aliases), keeping the first name seen.
pub fn dedup_params(params: Vec<NamedParam>) -> Vec<NamedParam> {
    let mut seen = HashSet::new();
    params.into_iter().filter(|p| seen.insert(p.id())).collect()
}

pub fn count_elements(params: &[NamedParam]) -> usize {
    params.iter().map(NamedParam::elem_count).sum()
}

/// SHA-256 over names, shapes and little-endian f32 values.
pub fn params_checksum(params: &[NamedParam]) -> Result<String> {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        let t = p.var.as_tensor();
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(crate::data::hex(&h.finalize()))
}

/// Seeded parameter initializer. Candle's own random constructors draw from a
/// thread-local generator, so every initial value goes through here instead.
pub struct Init<'a> {
    pub rng: &'a mut Rng,
    pub device: Device,
    pub dtype: DType,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut Rng, device: &Device, dtype: DType) -> Self {
        Self {
            rng,
            device: device.clone(),
            dtype,
        }
    }

    fn var_from(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// Normal truncated to two standard deviations.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let values = (0..n)
            .map(|_| loop {
                let z: f64 = dist.sample(self.rng);
                if z.abs() <= 2.0 {
                    break z * std;
                }
            })
            .collect();
        self.var_from(values, shape)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Var> {
        use rand::Rng as _;
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.var_from(values, shape)
    }

    pub fn constant(&mut self, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.var_from(vec![value; n], shape)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(init: &mut Init, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.trunc_normal(&[out_dim, in_dim], 0.02)?,
            bias: Some(init.constant(&[out_dim], 0.0)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.as_tensor().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.as_tensor().dims()[0]
    }

    /// Applies the map over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| CimError::shape("scalar input to linear"))?;
        if in_dim != self.in_dim() {
            return Err(CimError::shape(format!(
                "linear expects last dim {}, got {in_dim}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.as_tensor().t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = vec![NamedParam::new(join(prefix, "weight"), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(NamedParam::new(join(prefix, "bias"), b));
        }
        v
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.constant(&[dim], 1.0)?,
            bias: init.constant(&[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        vec![
            NamedParam::new(join(prefix, "weight"), &self.weight),
            NamedParam::new(join(prefix, "bias"), &self.bias),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    /// Border pixels repeated; a constant field stays exactly constant.
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        mode: Padding,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = init.uniform(&[out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt())?;
        let bias = if bias {
            Some(init.constant(&[out_ch], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            mode,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.padding;
        let y = match self.mode {
            Padding::Zeros => x.conv2d(self.weight.as_tensor(), p, self.stride, 1, 1)?,
            Padding::Replicate if p > 0 => x
                .pad_with_same(2, p, p)?
                .pad_with_same(3, p, p)?
                .conv2d(self.weight.as_tensor(), 0, self.stride, 1, 1)?,
            Padding::Replicate => x.conv2d(self.weight.as_tensor(), 0, self.stride, 1, 1)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        let mut v = vec![NamedParam::new(join(prefix, "weight"), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(NamedParam::new(join(prefix, "bias"), b));
        }
        v
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> usize {
        in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 }
    }
}

/// Group normalization over `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub weight: Var,
    pub bias: Var,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(init: &mut Init, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(CimError::config(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            weight: init.constant(&[channels], 1.0)?,
            bias: init.constant(&[channels], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.as_tensor().reshape((1, c, 1, 1))?)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        vec![
            NamedParam::new(join(prefix, "weight"), &self.weight),
            NamedParam::new(join(prefix, "bias"), &self.bias),
        ]
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// A parameter as seen by the optimizer.
#[derive(Debug, Clone)]
pub struct OptimParam {
    pub param: NamedParam,
    pub lr_scale: f64,
    pub decay: bool,
}

/// Weight decay skips biases, norms, embeddings and tokens.
pub fn default_decay(name: &str, rank: usize) -> bool {
    rank >= 2 && !["pos_embed", "cls_token", "mask_embedding", "codebook"]
        .iter()
        .any(|k| name.contains(k))
}

#[derive(Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    params: Vec<OptimParam>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    /// Aliased tensors are optimized once.
    pub fn new(params: Vec<OptimParam>, cfg: AdamWConfig) -> Result<Self> {
        let mut seen = HashSet::new();
        let params: Vec<OptimParam> = params
            .into_iter()
            .filter(|p| seen.insert(p.param.id()))
            .collect();
        let zeros = |p: &OptimParam| p.param.var.as_tensor().zeros_like();
        let m = params.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        let v = params.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn with_defaults(params: &[NamedParam], cfg: AdamWConfig) -> Result<Self> {
        let ps = params
            .iter()
            .map(|p| OptimParam {
                decay: default_decay(&p.name, p.var.as_tensor().rank()),
                param: p.clone(),
                lr_scale: 1.0,
            })
            .collect();
        Self::new(ps, cfg)
    }

    pub fn params(&self) -> &[OptimParam] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// L2 norm over all gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut total = 0.0;
        for p in &self.params {
            if let Some(g) = grads.get(p.param.var.as_tensor()) {
                total += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        Ok(total.sqrt())
    }

    /// One update with every gradient multiplied by `grad_scale` first.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64, grad_scale: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, p) in self.params.iter().enumerate() {
            let theta = p.param.var.as_tensor();
            let Some(g) = grads.get(theta) else { continue };
            // Variable gradients still reference the forward graph; keeping them in
            // the moments would chain every step's graph onto the next.
            let g = g.detach();
            let g = if grad_scale != 1.0 { g.affine(grad_scale, 0.0)? } else { g };
            let m = ((&self.m[i] * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((&self.v[i] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let lr_eff = lr * p.lr_scale;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.cfg.eps)?)?;
            let mut next = theta.detach();
            if p.decay && self.cfg.weight_decay > 0.0 {
                next = (next * (1.0 - lr_eff * self.cfg.weight_decay))?;
            }
            next = (next - (update * lr_eff)?)?;
            p.param.var.set(&next)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    /// `(name, first moment, second moment)` per parameter plus the step counter.
    pub fn moments(&self) -> (u64, Vec<(String, Tensor, Tensor)>) {
        let entries = self
            .params
            .iter()
            .zip(self.m.iter().zip(&self.v))
            .map(|(p, (m, v))| (p.param.name.clone(), m.clone(), v.clone()))
            .collect();
        (self.step, entries)
    }

    pub fn restore_moments(&mut self, step: u64, entries: &[(String, Tensor, Tensor)]) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(CimError::validation(format!(
                "optimizer state has {} entries, expected {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (i, (p, (name, m, v))) in self.params.iter().zip(entries).enumerate() {
            if &p.param.name != name || m.dims() != p.param.var.as_tensor().dims() {
                return Err(CimError::validation(format!(
                    "optimizer entry {name} does not match parameter {}",
                    p.param.name
                )));
            }
            let dtype = p.param.var.dtype();
            self.m[i] = m.to_dtype(dtype)?;
            self.v[i] = v.to_dtype(dtype)?;
        }
        self.step = step;
        Ok(())
    }
}
