use super::*;
use crate::backbones::{MiniResNetConfig, ViTConfig};
use crate::data::{generate_shapes, ShapesConfig};
use crate::testutil::tiny_tokenizer;

fn tiny_config() -> PretrainConfig {
    PretrainConfig {
        seed: 7,
        image_size: 16,
        train: TrainConfig { epochs: 2, batch_size: 4, warmup_epochs: 0.5, ..Default::default() },
        enhancer: EnhancerConfig::Vit(ViTConfig { image_size: 16, patch: 4, dim: 16, depth: 2, heads: 2, mlp_ratio: 2.0 }),
        generator: GeneratorConfig { depth: 1, heads: 2, mlp_ratio: 2.0, ..Default::default() },
        corruption: CorruptionConfig::default(),
    }
}

fn data() -> LabeledDataset {
    generate_shapes(&ShapesConfig::new(3, 10, 16, 3)).unwrap()
}

fn trainer(cfg: &PretrainConfig) -> Pretrainer {
    Pretrainer::new(cfg, tiny_tokenizer(), 10, &Device::Cpu).unwrap()
}

#[test]
fn schedule_closed_form() {
    let cfg = TrainConfig { epochs: 10, warmup_epochs: 1.0, min_learning_rate: 1e-5, ..Default::default() };
    let s = Schedule::new(&cfg, 20);
    assert_eq!(s.lr_at(0), 0.0);
    assert!((s.lr_at(20) - 1.5e-3).abs() < 1e-15);
    assert!((s.lr_at(10) - 0.75e-3).abs() < 1e-15);
    assert!((s.lr_at(200) - 1e-5).abs() < 1e-15);
    let mid = 20 + 90;
    assert!((s.lr_at(mid) - (1e-5 + (1.5e-3 - 1e-5) * 0.5)).abs() < 1e-15);
    assert_eq!(lr_at(&cfg, 20, 20), s.lr_at(20));
}

#[test]
fn linear_batch_scaling_policy() {
    let cfg = TrainConfig { batch_size: 64, lr_reference_batch: Some(256), ..Default::default() };
    assert!((cfg.effective_peak_lr() - 1.5e-3 / 4.0).abs() < 1e-15);
}

#[test]
fn config_validation() {
    assert!(TrainConfig { peak_learning_rate: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { min_learning_rate: 1.0, ..Default::default() }.validate().is_err());
    assert_eq!(TrainConfig::default().loss_weight(), 1.0);
    assert_eq!(TrainConfig { objective: Objective::Respix, ..Default::default() }.loss_weight(), 10.0);
}

#[test]
fn config_toml_round_trip() {
    let cfg = tiny_config();
    let text = toml::to_string(&cfg).unwrap();
    let back: PretrainConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(toml::from_str::<PretrainConfig>("[train]\nno_such_key = 1\n").is_err());
}

#[test]
fn clipping_bounds_the_norm() {
    for norm in [0.1, 2.9, 3.0, 3.1, 100.0, 1e9] {
        assert!(norm * clip_scale(norm, 3.0) <= 3.0 + 1e-9);
    }
    assert_eq!(clip_scale(1.0, 3.0), 1.0);
}

#[test]
fn enhancer_loss_never_reaches_generator() {
    let d = data();
    let t = trainer(&tiny_config());
    let images = t.batch_images(&d, 0).unwrap();
    assert!(!t.generator_only_params().is_empty());
    assert_eq!(t.enhancer_gradient_leak(&images).unwrap(), 0.0);
}

#[test]
fn tokenizer_untouched_by_training() {
    let d = data();
    let mut t = trainer(&tiny_config());
    let before = t.tokenizer().checksum().unwrap();
    for _ in 0..3 {
        let m = t.joint_step(&d).unwrap();
        // at most ceil(0.6 n) of the n = 16 tokens can be masked
        assert!(m.flag_fraction <= 10.0 / 16.0 + 1e-12, "{}", m.flag_fraction);
    }
    assert_eq!(t.tokenizer().checksum().unwrap(), before);
}

#[test]
fn resume_reproduces_trace() {
    let d = data();
    let mut cfg = tiny_config();
    cfg.train.precision = Precision::F64;
    let mut full = trainer(&cfg);
    full.run(&d, None, None).unwrap();
    assert_eq!(full.step() as usize, full.total_steps());

    let dir = tempfile::tempdir().unwrap();
    let mut first = trainer(&cfg);
    first.run(&d, Some(3), None).unwrap();
    first.save_checkpoint(&dir.path().join("c.ckpt")).unwrap();
    let mut resumed = Pretrainer::load_checkpoint(&dir.path().join("c.ckpt"), tiny_tokenizer(), 10, &Device::Cpu).unwrap();
    assert_eq!(resumed.step(), 3);
    resumed.run(&d, None, None).unwrap();
    assert_eq!(resumed.history(), full.history());
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let d = data();
    let mut t = trainer(&tiny_config());
    t.joint_step(&d).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    t.save_checkpoint(&p).unwrap();
    let back = Pretrainer::load_checkpoint(&p, tiny_tokenizer(), 10, &Device::Cpu).unwrap();
    for (a, b) in t.params().iter().zip(back.params()) {
        assert_eq!(a.name, b.name);
        let x = a.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = b.var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y);
    }
    let mut c = Container::load(&p).unwrap();
    c.meta["version"] = "cim-pretrain/0".into();
    c.save(&p).unwrap();
    assert!(matches!(
        Pretrainer::load_checkpoint(&p, tiny_tokenizer(), 10, &Device::Cpu),
        Err(CimError::IncompatibleCheckpoint { .. })
    ));
}

#[test]
fn divergence_is_detected() {
    let d = data();
    let mut cfg = tiny_config();
    cfg.train.divergence_factor = 1e-6;
    cfg.train.divergence_patience = 2;
    let mut t = trainer(&cfg);
    let r = t.run(&d, None, None);
    assert!(matches!(r, Err(CimError::Divergence { .. })), "{r:?}");
}

#[test]
fn respix_and_resnet_variants_step() {
    let d = data();
    let mut cfg = tiny_config();
    cfg.train.objective = Objective::Respix;
    let mut t = trainer(&cfg);
    let m = t.joint_step(&d).unwrap();
    assert!(m.enhancer_loss.is_finite() && m.enhancer_loss > 0.0);

    let mut cfg = tiny_config();
    cfg.enhancer = EnhancerConfig::Resnet(MiniResNetConfig { stage_widths: vec![8, 16], groups: 4, ..Default::default() });
    cfg.generator.width = Some(16);
    let mut t = trainer(&cfg);
    assert_eq!(t.enhancer.dim(), 16);
    t.joint_step(&d).unwrap();
}

#[test]
fn unfrozen_tokenizer_rejected() {
    let tok = TokenizerState::new(&crate::testutil::tiny_tokenizer_config(), &Device::Cpu).unwrap();
    assert!(matches!(Pretrainer::new(&tiny_config(), tok, 10, &Device::Cpu), Err(CimError::Frozen)));
}

#[test]
fn metrics_csv_appends() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    let row = |s| StepMetrics { step: s, lr: 0.1, mim_loss: 1.0, enhancer_loss: 2.0, flag_fraction: 0.25 };
    append_metrics(&p, &[row(0)]).unwrap();
    append_metrics(&p, &[row(1), row(2)]).unwrap();
    let back = read_metrics(&p).unwrap();
    assert_eq!(back, vec![row(0), row(1), row(2)]);
    let text = std::fs::read_to_string(&p).unwrap();
    assert!(text.starts_with("step,lr,mim_loss,enhancer_loss,flag_fraction\n"));
}

#[test]
fn exported_networks_load_back() {
    let t = trainer(&tiny_config());
    let dir = tempfile::tempdir().unwrap();
    t.save_enhancer(&dir.path().join("e.ckpt")).unwrap();
    t.save_generator(&dir.path().join("g.ckpt")).unwrap();
    let e = load_enhancer(&dir.path().join("e.ckpt"), &Device::Cpu, DType::F32).unwrap();
    assert_eq!(crate::nn::params_checksum(&e.params("")).unwrap(), crate::nn::params_checksum(&t.enhancer.params("")).unwrap());
    let g = load_generator(&dir.path().join("g.ckpt"), t.tokenizer(), &Device::Cpu).unwrap();
    assert_eq!(g.vocab_size(), 16);
    let mut cfg = crate::testutil::tiny_tokenizer_config();
    cfg.vocab_size = 32;
    let other = TokenizerState::new(&cfg, &Device::Cpu).unwrap().freeze();
    assert!(matches!(
        load_generator(&dir.path().join("g.ckpt"), &other, &Device::Cpu),
        Err(CimError::IncompatibleCheckpoint { .. })
    ));
}

#[test]
fn moving_average_helpers() {
    let v = [4.0, 3.0, 2.0, 1.0];
    assert_eq!(moving_average(&v, 2), vec![3.5, 2.5, 1.5]);
    assert_eq!(head_tail_means(&v, 0.25), Some((4.0, 1.0)));
}
