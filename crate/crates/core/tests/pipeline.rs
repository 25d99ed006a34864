//! The public surface wired end to end on a tiny setup.

use cim_core::backbones::EnhancerHead;
use cim_core::corruption::corrupt;
use cim_core::seeding::rng_for;
use cim_core::*;

fn tiny() -> (PretrainConfig, LabeledDataset, TokenizerState) {
    let data = generate_shapes(&ShapesConfig::new(2, 12, 16, 3).downsample(4)).unwrap();
    let tcfg = TokenizerConfig { downsample: 4, vocab_size: 16, code_dim: 8, hidden: 8, steps: 4, batch_size: 4, ..Default::default() };
    let (tok, _) = train_tokenizer(&data, &tcfg, &Device::Cpu).unwrap();
    let cfg = PretrainConfig {
        seed: 1,
        image_size: 16,
        train: TrainConfig { epochs: 1, batch_size: 4, ..Default::default() },
        enhancer: EnhancerConfig::Vit(ViTConfig { image_size: 16, patch: 4, dim: 16, depth: 1, heads: 2, mlp_ratio: 2.0 }),
        generator: GeneratorConfig { depth: 1, heads: 2, mlp_ratio: 2.0, ..Default::default() },
        corruption: CorruptionConfig::default(),
    };
    (cfg, data, tok.freeze())
}

#[test]
fn pretrain_then_corrupt_and_evaluate() {
    let (cfg, data, tok) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let (trainer, report) = pretrain(&cfg, &data, tok, &Device::Cpu, Some(dir.path())).unwrap();
    assert_eq!(report.steps, 3);
    assert!(report.diverged.is_none());
    for f in ["metrics.csv", "enhancer.ckpt", "generator.ckpt", "checkpoint.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let s = corrupt(&trainer.generator, trainer.tokenizer(), &data.images[0], &cfg.corruption, &mut rng_for(0, &[])).unwrap();
    assert!(s.flags.count() <= s.mask.k());
    assert_eq!((s.corrupted_image.height(), s.corrupted_image.width()), (16, 16));

    let EnhancerHead::Detect(head) = &trainer.head else { panic!("revdet is the default objective") };
    let val = generate_shapes(&ShapesConfig::new(2, 8, 16, 3).split(Split::Val).downsample(4)).unwrap();
    let m = revdet_metrics(&trainer.enhancer, head, &trainer.generator, trainer.tokenizer(), &val.images, &cfg.corruption, 0);
    // a tiny run may flag nothing, which makes AUC undefined
    if let Ok(m) = m {
        assert!((0.0..=1.0).contains(&m.auc));
    }
    let p = linear_probe(&trainer.enhancer, &data, &val, &ProbeConfig { steps: 5, ..Default::default() }).unwrap();
    assert!((0.0..=1.0).contains(&p.top1));
}

#[test]
fn tokenizer_checkpoint_round_trip() {
    let (_, data, tok) = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tok.ckpt");
    tok.save(&path).unwrap();
    let back = TokenizerState::load(&path, &Device::Cpu).unwrap();
    let img = &data.images[3];
    assert_eq!(tok.encode_tokens(img).unwrap(), back.encode_tokens(img).unwrap());
    assert_eq!(tok.checksum().unwrap(), back.checksum().unwrap());
}
