//! Benchmark fixtures: random images, an untrained frozen tokenizer and a
//! small ViT pre-training setup at 32px.

use rand::Rng as _;

use cim_core::seeding::rng_for;
use cim_core::*;

pub const SIZE: usize = 32;

pub fn random_images(n: usize, size: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = rng_for(seed, &[]);
    (0..n)
        .map(|_| {
            let data = (0..size * size * 3).map(|_| rng.random::<f32>()).collect();
            ImageTensor::new(size, size, data).expect("valid image")
        })
        .collect()
}

pub fn tokenizer() -> TokenizerState {
    let cfg = TokenizerConfig { downsample: 4, vocab_size: 128, code_dim: 32, hidden: 32, ..Default::default() };
    TokenizerState::new(&cfg, &Device::Cpu).expect("tokenizer").freeze()
}

pub fn pretrain_config(batch: usize) -> PretrainConfig {
    PretrainConfig {
        seed: 0,
        image_size: SIZE,
        train: TrainConfig { epochs: 1, batch_size: batch, ..Default::default() },
        enhancer: EnhancerConfig::Vit(ViTConfig { image_size: SIZE, patch: 4, dim: 64, depth: 4, heads: 2, mlp_ratio: 2.0 }),
        generator: GeneratorConfig { depth: 2, width: Some(32), heads: 2, mlp_ratio: 2.0, share_layers: 0 },
        corruption: CorruptionConfig {
            mask: MaskConfig { strategy: MaskStrategy::Blockwise, ratio_min: 0.5, ratio_max: 0.6 },
            ..Default::default()
        },
    }
}

pub fn trainer(batch: usize) -> Pretrainer {
    Pretrainer::new(&pretrain_config(batch), tokenizer(), 1024, &Device::Cpu).expect("trainer")
}
