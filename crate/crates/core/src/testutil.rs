use candle_core::{DType, Device};
use rand::Rng as _;

use crate::backbones::{Generator, GeneratorSpec, ViTConfig};
use crate::data::ImageTensor;
use crate::nn::Init;
use crate::seeding::{self, Rng};
use crate::tokenizer::{TokenizerConfig, TokenizerState};

pub fn rng(seed: u64) -> Rng {
    seeding::rng_for(seed, &[])
}

pub fn tiny_tokenizer_config() -> TokenizerConfig {
    TokenizerConfig { downsample: 4, vocab_size: 16, code_dim: 8, hidden: 8, steps: 1, batch_size: 4, ..Default::default() }
}

/// Untrained, frozen tokenizer with a 4×4 grid over 16×16 images.
pub fn tiny_tokenizer() -> TokenizerState {
    TokenizerState::new(&tiny_tokenizer_config(), &Device::Cpu).unwrap().freeze()
}

pub fn tiny_vit(dim: usize, depth: usize) -> ViTConfig {
    ViTConfig { image_size: 16, patch: 4, dim, depth, heads: 2, mlp_ratio: 2.0 }
}

pub fn tiny_generator(dtype: DType, seed: u64) -> Generator {
    let spec = GeneratorSpec { vit: tiny_vit(16, 1), vocab_size: 16 };
    let mut r = rng(seed);
    let mut init = Init::new(&mut r, &Device::Cpu, dtype);
    Generator::new(&mut init, &spec, None).unwrap()
}

pub fn random_image(size: usize, rng: &mut Rng) -> ImageTensor {
    let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(size, size, data).unwrap()
}
