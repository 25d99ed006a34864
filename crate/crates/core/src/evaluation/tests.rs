use super::*;
use crate::backbones::{EnhancerConfig, ViTConfig};
use crate::data::{generate_shapes, ShapesConfig, Split};
use crate::testutil::{rng, tiny_generator, tiny_tokenizer};
use proptest::prelude::*;
use rand::Rng as _;

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

#[test]
fn auc_null_and_oracle_models() {
    let mut r = rng(30);
    let labels: Vec<bool> = (0..20_000).map(|_| r.random_bool(0.3)).collect();
    let scores: Vec<f64> = (0..20_000).map(|_| r.random::<f64>()).collect();
    assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
    let oracle: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    assert_eq!(auc(&oracle, &labels).unwrap(), 1.0);
}

#[test]
fn auc_matches_pairwise_count_with_ties() {
    let mut r = rng(31);
    for _ in 0..20 {
        let n = r.random_range(5..60);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..5) as f64).collect();
        assert!((auc(&scores, &labels).unwrap() - pairwise_auc(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn auc_needs_both_classes() {
    assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(CimError::InvalidEvaluation(_))));
}

proptest! {
    #[test]
    fn auc_is_invariant_to_monotone_maps(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 40;
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 5.0).collect();
        prop_assert!((auc(&s, &labels).unwrap() - auc(&t, &labels).unwrap()).abs() < 1e-12);
    }
}

fn small_enhancer(seed: u64) -> Enhancer {
    let mut r = rng(seed);
    let mut init = Init::new(&mut r, &Device::Cpu, DType::F32);
    let cfg = EnhancerConfig::Vit(ViTConfig { image_size: 16, patch: 4, dim: 16, depth: 2, heads: 2, mlp_ratio: 2.0 });
    Enhancer::new(&mut init, &cfg, None).unwrap()
}

fn shapes(split: Split, count: usize) -> LabeledDataset {
    generate_shapes(&ShapesConfig::new(5, count, 16, 3).split(split)).unwrap()
}

#[test]
fn probe_rejects_identical_splits() {
    let e = small_enhancer(0);
    let d = shapes(Split::Train, 12);
    assert!(matches!(linear_probe(&e, &d, &d, &ProbeConfig::default()), Err(CimError::InvalidEvaluation(_))));
}

#[test]
fn random_probe_beats_chance_and_is_deterministic() {
    let e = small_enhancer(1);
    let (tr, va) = (shapes(Split::Train, 120), shapes(Split::Val, 60));
    let cfg = ProbeConfig { steps: 200, ..Default::default() };
    let before = params_checksum(&e.params("")).unwrap();
    let a = linear_probe(&e, &tr, &va, &cfg).unwrap();
    let b = linear_probe(&e, &tr, &va, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.top1 > 1.0 / 3.0, "top1 {} train {}", a.top1, a.train_top1);
    assert_eq!(a.per_class.len(), 3);
    assert_eq!(params_checksum(&e.params("")).unwrap(), before);
}

#[test]
fn layer_decay_closed_form() {
    let mut r = rng(2);
    let mut init = Init::new(&mut r, &Device::Cpu, DType::F32);
    let cfg = EnhancerConfig::Vit(ViTConfig { image_size: 16, patch: 4, dim: 16, depth: 8, heads: 2, mlp_ratio: 2.0 });
    let e = Enhancer::new(&mut init, &cfg, None).unwrap();
    for (name, s) in layer_lr_scales(&e, 0.8) {
        let want = if name.starts_with("blocks.") {
            let i: i32 = name.split('.').nth(1).unwrap().parse().unwrap();
            0.8f64.powi(8 - (i + 1))
        } else if name.starts_with("norm") {
            1.0
        } else {
            0.8f64.powi(8)
        };
        assert!((s - want).abs() < 1e-15, "{name}: {s} vs {want}");
    }
    assert!(layer_lr_scales(&e, 1.0).iter().all(|(_, s)| *s == 1.0));
}

#[test]
fn finetune_leaves_input_encoder_untouched() {
    let e = small_enhancer(3);
    let before = params_checksum(&e.params("")).unwrap();
    let (tr, va) = (shapes(Split::Train, 16), shapes(Split::Val, 8));
    let cfg = FinetuneConfig { epochs: 1, batch_size: 8, ..Default::default() };
    let (tuned, res) = finetune(&e, &tr, &va, &cfg).unwrap();
    assert_eq!(params_checksum(&e.params("")).unwrap(), before);
    assert_ne!(params_checksum(&tuned.params("")).unwrap(), before);
    assert!((0.0..=1.0).contains(&res.top1));
}

#[test]
fn revdet_metrics_are_deterministic() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F32, 4);
    let e = small_enhancer(5);
    let mut r = rng(6);
    let mut init = Init::new(&mut r, &Device::Cpu, DType::F32);
    let head = DetectHead::new(&mut init, 16).unwrap();
    let imgs = shapes(Split::Val, 20).images;
    let cfg = CorruptionConfig::default();
    let a = revdet_metrics(&e, &head, &gen, &tok, &imgs, &cfg, 9).unwrap();
    let b = revdet_metrics(&e, &head, &gen, &tok, &imgs, &cfg, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.positions, 20 * 16);
    assert!(a.flag_fraction <= 0.6);
}
