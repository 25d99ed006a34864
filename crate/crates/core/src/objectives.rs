//! Enhancer pretext losses and pixel-target normalization.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::corruption::FlagGrid;
use crate::data::ImageTensor;
use crate::error::{CimError, Result};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormScheme {
    None,
    Nonoverlap,
    #[default]
    Sliding,
}

/// Pixel regression target, `H×W×3` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTarget {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub scheme: NormScheme,
    pub window: usize,
    pub eps: f64,
}

impl NormalizedTarget {
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.width + x) * 3 + c]
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CimError::config(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Per-pixel, per-channel standardization over a `window×window` neighbourhood
/// clipped at the borders. For even windows the neighbourhood spans
/// `window/2` pixels before and `window/2 - 1` after. Uses population std.
pub fn sliding_window_normalize(img: &ImageTensor, window: usize, eps: f64) -> Result<NormalizedTarget> {
    if window == 0 {
        return Err(CimError::config("window must be at least 1"));
    }
    check_eps(eps)?;
    let (h, w) = (img.height(), img.width());
    let lo = window / 2;
    let hi = window - 1 - lo;
    let mut values = vec![0.0; h * w * 3];
    // Summed-area tables over values shifted by the first pixel. The shift
    // keeps the sums small and makes constant images exactly zero.
    let stride = w + 1;
    for c in 0..3 {
        let shift = img.get(0, 0, c) as f64;
        let mut s1 = vec![0.0f64; (h + 1) * stride];
        let mut s2 = vec![0.0f64; (h + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                let v = img.get(y, x, c) as f64 - shift;
                let i = (y + 1) * stride + x + 1;
                s1[i] = v + s1[i - 1] + s1[i - stride] - s1[i - stride - 1];
                s2[i] = v * v + s2[i - 1] + s2[i - stride] - s2[i - stride - 1];
            }
        }
        let rect = |s: &[f64], y0: usize, x0: usize, y1: usize, x1: usize| {
            s[y1 * stride + x1] - s[y0 * stride + x1] - s[y1 * stride + x0] + s[y0 * stride + x0]
        };
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(lo), (y + hi + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(lo), (x + hi + 1).min(w));
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let mean = rect(&s1, y0, x0, y1, x1) / count;
                let var = (rect(&s2, y0, x0, y1, x1) / count - mean * mean).max(0.0);
                let v = img.get(y, x, c) as f64 - shift;
                values[(y * w + x) * 3 + c] = (v - mean) / (var.sqrt() + eps);
            }
        }
    }
    Ok(NormalizedTarget { height: h, width: w, values, scheme: NormScheme::Sliding, window, eps })
}

/// Per-channel standardization inside each non-overlapping `patch×patch` block.
pub fn nonoverlap_normalize(img: &ImageTensor, patch: usize, eps: f64) -> Result<NormalizedTarget> {
    check_eps(eps)?;
    let (h, w) = (img.height(), img.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CimError::config(format!("image {h}x{w} is not divisible into {patch}-pixel patches")));
    }
    let mut values = vec![0.0; h * w * 3];
    let cells = (patch * patch) as f64;
    for py in (0..h).step_by(patch) {
        for px in (0..w).step_by(patch) {
            for c in 0..3 {
                let at = |y: usize, x: usize| img.get(py + y, px + x, c) as f64;
                let mut mean = 0.0;
                for y in 0..patch {
                    for x in 0..patch {
                        mean += at(y, x);
                    }
                }
                mean /= cells;
                let mut var = 0.0;
                for y in 0..patch {
                    for x in 0..patch {
                        var += (at(y, x) - mean).powi(2);
                    }
                }
                let std = (var / cells).sqrt();
                for y in 0..patch {
                    for x in 0..patch {
                        values[((py + y) * w + px + x) * 3 + c] = (at(y, x) - mean) / (std + eps);
                    }
                }
            }
        }
    }
    Ok(NormalizedTarget { height: h, width: w, values, scheme: NormScheme::Nonoverlap, window: patch, eps })
}

pub fn raw_target(img: &ImageTensor) -> NormalizedTarget {
    NormalizedTarget {
        height: img.height(),
        width: img.width(),
        values: img.data().iter().map(|&v| v as f64).collect(),
        scheme: NormScheme::None,
        window: 0,
        eps: 0.0,
    }
}

/// Target for `scheme`; `window` is the sliding window or the patch size.
pub fn normalize_target(img: &ImageTensor, scheme: NormScheme, window: usize, eps: f64) -> Result<NormalizedTarget> {
    match scheme {
        NormScheme::None => Ok(raw_target(img)),
        NormScheme::Nonoverlap => nonoverlap_normalize(img, window, eps),
        NormScheme::Sliding => sliding_window_normalize(img, window, eps),
    }
}

/// Stacks targets into a `(B, 3, H, W)` tensor.
pub fn targets_to_tensor(targets: &[NormalizedTarget], device: &Device, dtype: DType) -> Result<Tensor> {
    let ts = targets
        .iter()
        .map(|t| t.to_tensor(device, dtype))
        .collect::<Result<Vec<_>>>()?;
    if ts.is_empty() {
        return Err(CimError::shape("no targets to stack"));
    }
    Ok(Tensor::stack(&ts, 0)?)
}

/// `λ1·mean|pred − target| + λ2·mean (pred − target)²` over every element.
pub fn respix_loss(pred: &Tensor, target: &Tensor, l1: f64, l2: f64) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(CimError::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.dims(),
            target.dims()
        )));
    }
    let d = (pred - target.to_dtype(pred.dtype())?)?;
    let a = d.abs()?.mean_all()?.affine(l1, 0.0)?;
    let b = d.sqr()?.mean_all()?.affine(l2, 0.0)?;
    Ok((a + b)?)
}

/// Mean binary cross-entropy with logits over every position, in the stable
/// form `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
pub fn revdet_loss(logits: &Tensor, flags: &Tensor) -> Result<Tensor> {
    if logits.dims() != flags.dims() {
        return Err(CimError::shape(format!(
            "logits {:?} and flags {:?} differ",
            logits.dims(),
            flags.dims()
        )));
    }
    let y = flags.to_dtype(logits.dtype())?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * y)?)? + soft)?;
    Ok(l.mean_all()?)
}

/// `(B, n)` tensor from flag grids.
pub fn flags_to_tensor(flags: &[FlagGrid], device: &Device, dtype: DType) -> Result<Tensor> {
    let n = flags.first().map(|f| f.flags.len()).unwrap_or(0);
    if flags.iter().any(|f| f.flags.len() != n) {
        return Err(CimError::shape("flag grids in a batch must share dimensions"));
    }
    let v: Vec<f32> = flags.iter().flat_map(|f| f.flags.iter().map(|&b| b as f32)).collect();
    Ok(Tensor::from_vec(v, (flags.len(), n), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests;
