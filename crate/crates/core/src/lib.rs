//! Corrupted image modeling: a frozen visual tokenizer, a small masked-token
//! generator that corrupts images by resampling tokens, and an enhancer trained
//! to either restore the original pixels or detect the replaced tokens.

pub mod backbones;
pub mod checkpoint;
pub mod corruption;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod seeding;
pub mod tokenizer;
pub mod training;

pub use backbones::{Enhancer, EnhancerConfig, Generator, GeneratorConfig, MiniResNetConfig, Pooling, ViTConfig};
pub use corruption::{
    compose_corrupted, corrupt, replacement_flags, sample_mask_blockwise, sample_mask_random, sample_replacements,
    CorruptionConfig, CorruptionSample, FlagGrid, MaskConfig, MaskSet, MaskStrategy, SamplingStrategy,
};
pub use data::{generate_shapes, ImageTensor, LabeledDataset, ShapesConfig, Split};
pub use error::{CimError, Result};
pub use evaluation::{auc, finetune, linear_probe, revdet_metrics, FinetuneConfig, ProbeConfig, ProbeResult};
pub use objectives::{nonoverlap_normalize, sliding_window_normalize, NormScheme, NormalizedTarget};
pub use tokenizer::{train_tokenizer, TokenGrid, TokenizerConfig, TokenizerState};
pub use training::{lr_at, pretrain, Objective, PretrainConfig, Pretrainer, StepMetrics, TrainConfig};

pub use candle_core::{DType, Device};

#[cfg(test)]
pub(crate) mod testutil;
