use super::*;
use crate::testutil::{random_image, rng, tiny_generator, tiny_tokenizer, tiny_tokenizer_config};
use candle_core::Device;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn chi_square_p(counts: &[usize], expected: &[f64]) -> f64 {
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, &e)| (c as f64 - e).powi(2) / e)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).unwrap();
    1.0 - dist.cdf(stat)
}

fn grid(ids: &[u32], vocab: usize) -> TokenGrid {
    TokenGrid::new(1, ids.len(), vocab, ids.to_vec()).unwrap()
}

fn logits_out(rows: Vec<Vec<f64>>) -> GeneratorOutput {
    let k = rows.len();
    let v = rows.first().map(|r| r.len()).unwrap_or(1);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    GeneratorOutput {
        logits: Tensor::from_vec(flat, (k, v), &Device::Cpu).unwrap(),
        positions: (0..k).collect(),
    }
}

#[test]
fn random_mask_rejects_oversized_k() {
    assert!(sample_mask_random(4, 5, &mut rng(0)).is_err());
}

#[test]
fn random_mask_can_be_empty() {
    let m = sample_mask_random(16, 0, &mut rng(0)).unwrap();
    assert_eq!(m.k(), 0);
    assert_eq!(m.n(), 16);
}

#[test]
fn random_mask_fraction_on_196_positions() {
    let cfg = MaskConfig { ratio_min: 100.0 / 196.0, ratio_max: 120.0 / 196.0, ..Default::default() };
    let mut r = rng(1);
    for _ in 0..200 {
        let m = cfg.sample(14, 14, &mut r).unwrap();
        assert!((100..=120).contains(&m.k()));
        assert!(m.ratio() >= 0.51 && m.ratio() <= 0.62);
        assert!(m.positions().windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn random_mask_inclusion_is_uniform() {
    let mut r = rng(2);
    let mut counts = vec![0usize; 8];
    let draws = 10_000;
    for _ in 0..draws {
        for &p in sample_mask_random(8, 4, &mut r).unwrap().positions() {
            counts[p] += 1;
        }
    }
    let p = chi_square_p(&counts, &[draws as f64 * 0.5; 8]);
    assert!(p > 0.001, "p = {p}, counts {counts:?}");
}

#[test]
fn blockwise_ratio_within_slack() {
    let mut r = rng(3);
    for &(h, w) in &[(4usize, 4usize), (8, 8), (14, 14), (6, 10)] {
        for &target in &[0.1, 0.3, 0.4, 0.5, 0.6, 0.75] {
            for _ in 0..20 {
                let m = sample_mask_blockwise(h, w, target, &mut r).unwrap();
                let ratio = m.ratio();
                assert!(
                    ratio >= target - 1e-12 && ratio <= target + 0.05 + 1e-12,
                    "{h}x{w} target {target} got {ratio}"
                );
            }
        }
    }
}

#[test]
fn blockwise_on_14x14_at_half() {
    let mut r = rng(4);
    for _ in 0..100 {
        let k = sample_mask_blockwise(14, 14, 0.5, &mut r).unwrap().k();
        assert!((98..=108).contains(&k), "k = {k}");
    }
}

#[test]
fn blockwise_rejects_bad_inputs() {
    assert!(sample_mask_blockwise(3, 5, 0.5, &mut rng(0)).is_err());
    assert!(sample_mask_blockwise(4, 4, 0.0, &mut rng(0)).is_err());
    assert!(sample_mask_blockwise(4, 4, 1.0, &mut rng(0)).is_err());
}

#[test]
fn mask_set_validates() {
    assert!(MaskSet::new(4, vec![1, 1]).is_err());
    assert!(MaskSet::new(4, vec![4]).is_err());
    assert_eq!(MaskSet::new(4, vec![3, 0]).unwrap().positions(), &[0, 3]);
}

#[test]
fn apply_mask_examples() {
    let dev = Device::Cpu;
    let e = Tensor::from_vec((0..12).map(|v| v as f64 * 0.37).collect::<Vec<_>>(), (3, 4), &dev).unwrap();
    let me = Tensor::from_vec(vec![9.0f64, 8.0, 7.0, 6.0], 4, &dev).unwrap();
    let id = apply_mask(&e, &MaskSet::empty(3), &me).unwrap();
    assert_eq!(id.to_vec2::<f64>().unwrap(), e.to_vec2::<f64>().unwrap());
    let full = apply_mask(&e, &MaskSet::full(3), &me).unwrap().to_vec2::<f64>().unwrap();
    assert!(full.iter().all(|r| r == &vec![9.0, 8.0, 7.0, 6.0]));
    let one = apply_mask(&e, &MaskSet::new(3, vec![1]).unwrap(), &me).unwrap().to_vec2::<f64>().unwrap();
    let orig = e.to_vec2::<f64>().unwrap();
    assert_eq!(one[0], orig[0]);
    assert_eq!(one[2], orig[2]);
    assert_eq!(one[1], vec![9.0, 8.0, 7.0, 6.0]);
    assert!(apply_mask(&e, &MaskSet::empty(4), &me).is_err());
}

#[test]
fn generator_predict_shapes_and_vocab_check() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F32, 0);
    let img = random_image(16, &mut rng(5)).to_tensor(&Device::Cpu, DType::F32).unwrap();
    let mask = MaskSet::new(16, vec![1, 3, 5, 7, 11]).unwrap();
    let out = generator_predict(&gen, &tok, &img, &mask).unwrap();
    assert_eq!(out.logits.dims(), &[5, 16]);
    assert_eq!(out.positions, vec![1, 3, 5, 7, 11]);
    let again = generator_predict(&gen, &tok, &img, &mask).unwrap();
    assert_eq!(out.logits.to_vec2::<f32>().unwrap(), again.logits.to_vec2::<f32>().unwrap());

    let mut cfg = tiny_tokenizer_config();
    cfg.vocab_size = 32;
    let other = TokenizerState::new(&cfg, &Device::Cpu).unwrap().freeze();
    assert!(matches!(generator_predict(&gen, &other, &img, &mask), Err(CimError::Config(_))));
}

#[test]
fn generator_is_not_position_local() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F64, 1);
    let mut r = rng(6);
    let a = random_image(16, &mut r);
    // Change only the pixels of unmasked cell 0.
    let mut data = a.data().to_vec();
    for y in 0..4 {
        for x in 0..4 {
            for c in 0..3 {
                data[(y * 16 + x) * 3 + c] = 1.0 - data[(y * 16 + x) * 3 + c];
            }
        }
    }
    let b = ImageTensor::new(16, 16, data).unwrap();
    let mask = MaskSet::new(16, vec![10]).unwrap();
    let la = generator_predict(&gen, &tok, &a.to_tensor(&Device::Cpu, DType::F64).unwrap(), &mask).unwrap();
    let lb = generator_predict(&gen, &tok, &b.to_tensor(&Device::Cpu, DType::F64).unwrap(), &mask).unwrap();
    let diff = (la.logits - lb.logits).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff > 1e-9);
}

#[test]
fn mim_loss_uniform_logits_is_log_vocab() {
    let out = logits_out(vec![vec![0.25; 512]; 3]);
    let golden = TokenGrid::new(1, 3, 512, vec![0, 100, 511]).unwrap();
    let l = nn::scalar(&mim_loss(&out, &golden, &MaskSet::full(3)).unwrap()).unwrap();
    assert!((l - 512f64.ln()).abs() < 1e-9);
}

#[test]
fn mim_loss_vanishes_with_large_margin() {
    let mut row = vec![0.0; 4];
    row[2] = 60.0;
    let out = logits_out(vec![row]);
    let golden = grid(&[2], 4);
    let l = nn::scalar(&mim_loss(&out, &golden, &MaskSet::full(1)).unwrap()).unwrap();
    assert!(l < 1e-20);
}

fn ce_oracle(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    rows.iter()
        .zip(targets)
        .map(|(r, &t)| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[t].exp() / z).ln()
        })
        .sum::<f64>()
        / rows.len() as f64
}

#[test]
fn mim_loss_hand_case() {
    let rows = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]];
    let golden = TokenGrid::new(1, 4, 3, vec![0, 2, 1, 0]).unwrap();
    let mask = MaskSet::new(4, vec![1, 3]).unwrap();
    let mut out = logits_out(rows.clone());
    out.positions = vec![1, 3];
    let l = nn::scalar(&mim_loss(&out, &golden, &mask).unwrap()).unwrap();
    assert!((l - ce_oracle(&rows, &[2, 0])).abs() < 1e-12);
}

#[test]
fn mim_loss_empty_mask_is_error() {
    let out = GeneratorOutput::gather(&Tensor::zeros((4, 3), DType::F64, &Device::Cpu).unwrap(), &MaskSet::empty(4)).unwrap();
    let golden = TokenGrid::filled(1, 4, 3, 0).unwrap();
    assert!(mim_loss(&out, &golden, &MaskSet::empty(4)).is_err());
}

#[test]
fn mim_loss_gradient_matches_finite_differences() {
    let mut r = rng(7);
    for _ in 0..5 {
        let rows: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let targets = [r.random_range(0..5usize), r.random_range(0..5usize), r.random_range(0..5usize)];
        let golden = TokenGrid::new(1, 3, 5, targets.iter().map(|&t| t as u32).collect()).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let var = candle_core::Var::from_vec(flat.clone(), (3, 5), &Device::Cpu).unwrap();
        let out = GeneratorOutput { logits: var.as_tensor().clone(), positions: vec![0, 1, 2] };
        let loss = mim_loss(&out, &golden, &MaskSet::full(3)).unwrap();
        let g = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..flat.len() {
            let eval = |d: f64| {
                let mut p = flat.clone();
                p[i] += d;
                let rows: Vec<Vec<f64>> = p.chunks(5).map(|c| c.to_vec()).collect();
                ce_oracle(&rows, &targets)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{fd} vs {}", g[i]);
        }
    }
}

#[test]
fn batched_ce_matches_per_image_loss() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F64, 2);
    let mut r = rng(8);
    let imgs: Vec<_> = (0..3).map(|_| random_image(16, &mut r)).collect();
    let x = crate::data::images_to_tensor(&imgs, &Device::Cpu, DType::F64).unwrap();
    let golden = tok.encode_batch(&x).unwrap();
    let masks: Vec<_> = (0..3).map(|_| sample_mask_random(16, 6, &mut r).unwrap()).collect();
    let m = crate::backbones::mask_tensor(&masks, 16, DType::F64, &Device::Cpu).unwrap();
    let batched = nn::scalar(&masked_token_ce(&gen.forward(&x, &m).unwrap(), &golden, &m).unwrap()).unwrap();
    let outs = gen.predict(&x, &masks).unwrap();
    let mean: f64 = outs
        .iter()
        .zip(&golden)
        .zip(&masks)
        .map(|((o, g), mk)| nn::scalar(&mim_loss(o, g, mk).unwrap()).unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((batched - mean).abs() < 1e-10);
}

#[test]
fn softmax_sampling_saturates_on_dominant_logit() {
    let mut row = vec![0.0; 8];
    row[5] = 30.0;
    let out = logits_out(vec![row; 1000]);
    let ids = sample_replacements(&out, SamplingStrategy::Softmax, 1.0, &mut rng(9)).unwrap();
    let hits = ids.iter().filter(|&&i| i == 5).count();
    assert!(hits as f64 / 1000.0 >= 0.999);
}

#[test]
fn argmax_ties_go_to_lowest_id() {
    let out = logits_out(vec![vec![1.0, 3.0, 3.0]]);
    assert_eq!(sample_replacements(&out, SamplingStrategy::Argmax, 1.0, &mut rng(0)).unwrap(), vec![1]);
    // Every placement of a three-way tie among four ids.
    for skip in 0..4 {
        let row: Vec<f64> = (0..4).map(|i| if i == skip { -1.0 } else { 2.0 }).collect();
        let want = (0..4).find(|&i| i != skip).unwrap() as u32;
        let got = sample_replacements(&logits_out(vec![row]), SamplingStrategy::Argmax, 1.0, &mut rng(0)).unwrap();
        assert_eq!(got, vec![want]);
    }
}

#[test]
fn uniform_sampling_ignores_logits() {
    let mut row = vec![0.0; 8];
    row[0] = 50.0;
    let out = logits_out(vec![row; 10_000]);
    let ids = sample_replacements(&out, SamplingStrategy::Uniform, 1.0, &mut rng(10)).unwrap();
    let mut counts = vec![0usize; 8];
    for i in ids {
        counts[i as usize] += 1;
    }
    assert!(chi_square_p(&counts, &[1250.0; 8]) > 0.001, "{counts:?}");
}

#[test]
fn softmax_sampling_matches_probabilities() {
    let row = vec![0.3, -1.2, 2.0, 0.0, 1.1, -0.4, 0.7, -2.5];
    let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
    let expected: Vec<f64> = row.iter().map(|v| v.exp() / z * 10_000.0).collect();
    let ids = sample_replacements(&logits_out(vec![row; 10_000]), SamplingStrategy::Softmax, 1.0, &mut rng(11)).unwrap();
    let mut counts = vec![0usize; 8];
    for i in ids {
        counts[i as usize] += 1;
    }
    assert!(chi_square_p(&counts, &expected) > 0.001, "{counts:?}");
}

#[test]
fn sampling_rejects_bad_inputs() {
    let out = logits_out(vec![vec![0.0, f64::NAN]]);
    assert!(sample_replacements(&out, SamplingStrategy::Softmax, 1.0, &mut rng(0)).is_err());
    let out = logits_out(vec![vec![0.0, 1.0]]);
    assert!(sample_replacements(&out, SamplingStrategy::Softmax, 0.0, &mut rng(0)).is_err());
}

#[test]
fn compose_and_flag_examples() {
    let golden = grid(&[5, 7, 9], 10);
    let mask = MaskSet::new(3, vec![1]).unwrap();
    let c = compose_corrupted(&golden, &mask, &[2]).unwrap();
    assert_eq!(c.ids, vec![5, 2, 9]);
    assert_eq!(replacement_flags(&golden, &c).unwrap().flags, vec![0, 1, 0]);
    assert_eq!(compose_corrupted(&golden, &MaskSet::empty(3), &[]).unwrap(), golden);
    assert_eq!(compose_corrupted(&golden, &MaskSet::full(3), &[1, 2, 3]).unwrap().ids, vec![1, 2, 3]);
    assert!(compose_corrupted(&golden, &mask, &[1, 2]).is_err());
    assert_eq!(replacement_flags(&golden, &golden).unwrap().count(), 0);
    let other = TokenGrid::filled(3, 1, 10, 0).unwrap();
    assert!(replacement_flags(&golden, &other).is_err());
}

proptest! {
    #[test]
    fn corruption_algebra(h in 1usize..=14, w in 1usize..=14, vocab in 2usize..64, seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = h * w;
        let golden = TokenGrid::new(h, w, vocab, (0..n).map(|_| r.random_range(0..vocab as u32)).collect()).unwrap();
        let k = r.random_range(0..=n);
        let mask = sample_mask_random(n, k, &mut r).unwrap();
        let sampled: Vec<u32> = (0..k).map(|_| r.random_range(0..vocab as u32)).collect();
        let c = compose_corrupted(&golden, &mask, &sampled).unwrap();
        let flags = replacement_flags(&golden, &c).unwrap();
        for j in 0..n {
            if !mask.contains(j) {
                prop_assert_eq!(c.ids[j], golden.ids[j]);
                prop_assert_eq!(flags.flags[j], 0);
            }
            prop_assert_eq!(flags.flags[j] == 1, c.ids[j] != golden.ids[j]);
        }
        prop_assert!(flags.count() <= k);
    }
}

#[test]
fn corrupt_records_satisfy_invariants() {
    let tok = tiny_tokenizer();
    let before = tok.checksum().unwrap();
    let gen = tiny_generator(DType::F32, 3);
    let cfg = CorruptionConfig::default();
    let mut r = rng(12);
    let img = random_image(16, &mut r);
    for _ in 0..50 {
        let s = corrupt(&gen, &tok, &img, &cfg, &mut r).unwrap();
        assert_eq!(s.sampled.len(), s.mask.k());
        for j in 0..s.golden.len() {
            if !s.mask.contains(j) {
                assert_eq!(s.corrupted_tokens.ids[j], s.golden.ids[j]);
                assert_eq!(s.flags.flags[j], 0);
            }
            assert_eq!(s.flags.flags[j] == 1, s.corrupted_tokens.ids[j] != s.golden.ids[j]);
        }
        assert_eq!((s.corrupted_image.height(), s.corrupted_image.width()), (16, 16));
    }
    assert_eq!(tok.checksum().unwrap(), before);
}

#[test]
fn corrupt_requires_frozen_tokenizer() {
    let tok = TokenizerState::new(&tiny_tokenizer_config(), &Device::Cpu).unwrap();
    let gen = tiny_generator(DType::F32, 0);
    let img = random_image(16, &mut rng(0));
    assert!(matches!(
        corrupt(&gen, &tok, &img, &CorruptionConfig::default(), &mut rng(0)),
        Err(CimError::Frozen)
    ));
}

#[test]
fn untrained_generator_flag_rate_near_expectation() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F32, 4);
    let cfg = CorruptionConfig { mask: MaskConfig::fixed(0.5), ..Default::default() };
    let mut r = rng(13);
    let mut flagged = 0usize;
    let mut total = 0usize;
    for _ in 0..200 {
        let img = random_image(16, &mut r);
        let s = corrupt(&gen, &tok, &img, &cfg, &mut r).unwrap();
        flagged += s.flags.count();
        total += s.golden.len();
    }
    let expected = 0.5 * (1.0 - 1.0 / 16.0);
    let got = flagged as f64 / total as f64;
    assert!((got - expected).abs() < 0.04, "flag rate {got}, expected {expected}");
}

#[test]
fn same_mask_gives_distinct_variants() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F32, 5);
    let mut r = rng(14);
    let img = random_image(16, &mut r);
    let mask = sample_mask_random(16, 8, &mut r).unwrap();
    let cfg = CorruptionConfig::default();
    let grids: Vec<_> = (0..4)
        .map(|_| corrupt_with_mask(&gen, &tok, &img, mask.clone(), &cfg, &mut r).unwrap().corrupted_tokens)
        .collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(grids[i], grids[j]);
        }
    }
}

#[test]
fn random_erase_examples() {
    let mut r = rng(15);
    let img = random_image(32, &mut r);
    let fill = [0.25, 0.5, 0.75];
    for _ in 0..20 {
        let (out, mask) = corrupt_random_erase(&img, 0.5, fill, 4, &mut r).unwrap();
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        assert!((0.45..=0.55).contains(&frac));
        for (i, &m) in mask.iter().enumerate() {
            let p = out.pixel(i / 32, i % 32);
            if m {
                assert_eq!(p, fill);
            } else {
                assert_eq!(p, img.pixel(i / 32, i % 32));
            }
        }
    }
    let (same, mask) = corrupt_random_erase(&img, 0.001, fill, 4, &mut r).unwrap();
    assert_eq!(same, img);
    assert!(mask.iter().all(|&m| !m));
}

#[test]
fn panels_are_written() {
    let tok = tiny_tokenizer();
    let gen = tiny_generator(DType::F32, 6);
    let mut r = rng(16);
    let img = random_image(16, &mut r);
    let mask = sample_mask_random(16, 8, &mut r).unwrap();
    let samples: Vec<_> = (0..4)
        .map(|_| corrupt_with_mask(&gen, &tok, &img, mask.clone(), &CorruptionConfig::default(), &mut r).unwrap())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    export_panels(dir.path(), &samples, 4).unwrap();
    let panel = image::open(dir.path().join("panel.png")).unwrap();
    assert_eq!(panel.width(), 6 * 16 + 5 * 2);
    assert!(dir.path().join("corrupted_3.png").exists());
}
