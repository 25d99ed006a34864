//! Linear prediction heads for the two enhancer objectives.

use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Init, Linear, NamedParam};

/// Per-position pixel regression: `D → patch·patch·3`.
#[derive(Debug, Clone)]
pub struct PixelHead {
    pub linear: Linear,
    pub patch: usize,
}

impl PixelHead {
    pub fn new(init: &mut Init, dim: usize, patch: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, dim, patch * patch * 3)?,
            patch,
        })
    }

    /// `(B, n, D)` → `(B, n, patch²·3)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        self.linear.forward(features)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        self.linear.params(prefix)
    }
}

/// Per-position replaced-token logit: `D → 1`.
#[derive(Debug, Clone)]
pub struct DetectHead {
    pub linear: Linear,
}

impl DetectHead {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(init, dim, 1)?,
        })
    }

    /// `(B, n, D)` → `(B, n)`.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.linear.forward(features)?.squeeze(candle_core::D::Minus1)?)
    }

    pub fn params(&self, prefix: &str) -> Vec<NamedParam> {
        self.linear.params(prefix)
    }
}
