//! Subcommand implementations.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cim_core::backbones::{EnhancerHead, Pooling};
use cim_core::corruption::{compose_panel, corrupt_with_mask, save_png, CorruptionConfig, MaskConfig, SamplingStrategy};
use cim_core::data::{ImageTensor, Split};
use cim_core::evaluation::{self, FinetuneConfig, ProbeConfig, ProbeResult, RevdetMetrics};
use cim_core::seeding::{self, tag};
use cim_core::tokenizer::{train_tokenizer, TokenizerConfig, TokenizerState};
use cim_core::training::{self, load_enhancer, load_generator, PretrainConfig, PretrainReport};
use cim_core::{CimError, DType, Device};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::{apply_overrides, config_err, parse, prepare_out, read_table, take, DataConfig, RunManifest};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub sets: Vec<String>,
    pub force: bool,
}

impl Common {
    fn table(&self) -> Result<Table> {
        let mut t = read_table(self.config.as_deref())?;
        apply_overrides(&mut t, &self.sets)?;
        if let Some(s) = self.seed {
            t.insert("seed".into(), Value::Integer(s as i64));
        }
        Ok(t)
    }
}

fn take_path(t: &mut Table, key: &str) -> Result<PathBuf> {
    match t.remove(key) {
        Some(Value::String(s)) => Ok(PathBuf::from(s)),
        Some(_) => Err(config_err(format!("{key} must be a path string"))),
        None => Err(config_err(format!("missing required key {key:?}"))),
    }
}

fn take_seed(t: &mut Table) -> Result<Option<u64>> {
    match t.remove("seed") {
        None => Ok(None),
        Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
        Some(v) => Err(config_err(format!("seed must be a non-negative integer, got {v}"))),
    }
}

fn reject_leftovers(t: &Table) -> Result<()> {
    if let Some(k) = t.keys().next() {
        return Err(config_err(format!("unknown key {k:?}")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_frozen_tokenizer(path: &Path) -> Result<TokenizerState> {
    Ok(TokenizerState::load(path, &Device::Cpu)?.freeze())
}

// ---------------------------------------------------------------- tokenizer

#[derive(Debug, Clone, Serialize)]
struct TokenizerRun {
    data: DataConfig,
    tokenizer: TokenizerConfig,
}

pub fn tokenizer_train(c: &Common) -> Result<()> {
    let mut t = c.table()?;
    let seed = take_seed(&mut t)?;
    let data: DataConfig = take(&mut t, "data")?;
    let mut tokenizer: TokenizerConfig = take(&mut t, "tokenizer")?;
    reject_leftovers(&t)?;
    if let Some(s) = seed {
        tokenizer.seed = s;
    }
    let run = TokenizerRun { data, tokenizer };
    prepare_out(&c.out, c.force)?;
    RunManifest::new("tokenizer-train", c.config.as_deref(), &run, run.tokenizer.seed, &c.out)?.write(&c.out)?;

    let train = run.data.load(Split::Train, run.tokenizer.downsample)?;
    let val = run.data.load(Split::Val, run.tokenizer.downsample)?;
    let (tok, report) = train_tokenizer(&train, &run.tokenizer, &Device::Cpu)?;
    let tok = tok.freeze();
    tok.save(&c.out.join("tokenizer.ckpt"))?;
    let (mse, psnr) = tok.reconstruction_psnr(&val.images)?;
    let summary = serde_json::json!({ "train": report, "val_mse": mse, "val_psnr_db": psnr });
    write_json(&c.out.join("report.json"), &summary)?;
    println!("tokenizer: val PSNR {psnr:.2} dB, dead codes {:.1}%", 100.0 * report.dead_code_fraction);
    Ok(())
}

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Clone, Serialize)]
pub struct PretrainRun {
    pub tokenizer: PathBuf,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
}

pub fn parse_pretrain(mut t: Table) -> Result<PretrainRun> {
    let tokenizer = take_path(&mut t, "tokenizer")?;
    let data: DataConfig = take(&mut t, "data")?;
    if !t.contains_key("image_size") {
        t.insert("image_size".into(), Value::Integer(data.size as i64));
    }
    let pretrain: PretrainConfig = parse(t)?;
    if pretrain.image_size != data.size {
        return Err(config_err(format!(
            "image_size {} differs from data.size {}",
            pretrain.image_size, data.size
        )));
    }
    pretrain.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(PretrainRun { tokenizer, data, pretrain })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub diverged: Option<String>,
    pub final_mim_loss: Option<f64>,
    pub final_enhancer_loss: Option<f64>,
    pub revdet: Option<RevdetMetrics>,
}

fn tail_mean(report: &PretrainReport, f: impl Fn(&training::StepMetrics) -> f64) -> Option<f64> {
    let h = &report.history;
    let k = (h.len() / 10).max(1).min(h.len());
    (k > 0).then(|| h[h.len() - k..].iter().map(&f).sum::<f64>() / k as f64)
}

/// Runs one pre-training job into `out` (which must already exist).
pub fn run_pretrain(run: &PretrainRun, out: &Path) -> Result<PretrainSummary> {
    let tok = load_frozen_tokenizer(&run.tokenizer)?;
    let f = tok.downsample();
    let train = run.data.load(Split::Train, f)?;
    let val = run.data.load(Split::Val, f)?;
    let (trainer, report) = training::pretrain(&run.pretrain, &train, tok, &Device::Cpu, Some(out))?;

    let revdet = match (&trainer.head, report.diverged.is_none()) {
        (EnhancerHead::Detect(head), true) => Some(evaluation::revdet_metrics(
            &trainer.enhancer,
            head,
            &trainer.generator,
            trainer.tokenizer(),
            &val.images,
            &CorruptionConfig { sampling: SamplingStrategy::Softmax, temperature: 1.0, ..run.pretrain.corruption.clone() },
            seeding::derive_seed(run.pretrain.seed, &[tag("heldout")]),
        )?),
        _ => None,
    };
    if report.diverged.is_none() {
        let panels = out.join("panels");
        std::fs::create_dir_all(&panels)?;
        let imgs: Vec<ImageTensor> = val.images.iter().take(2).cloned().collect();
        write_panels(&trainer.generator, trainer.tokenizer(), &imgs, 4, &run.pretrain.corruption, run.pretrain.seed, &panels)?;
    }
    let summary = PretrainSummary {
        steps: report.steps,
        diverged: report.diverged.clone(),
        final_mim_loss: tail_mean(&report, |m| m.mim_loss),
        final_enhancer_loss: tail_mean(&report, |m| m.enhancer_loss),
        revdet,
    };
    write_json(&out.join("report.json"), &summary)?;
    Ok(summary)
}

pub fn pretrain(c: &Common) -> Result<()> {
    let run = parse_pretrain(c.table()?)?;
    prepare_out(&c.out, c.force)?;
    RunManifest::new("pretrain", c.config.as_deref(), &run, run.pretrain.seed, &c.out)?.write(&c.out)?;
    let summary = run_pretrain(&run, &c.out)?;
    if let Some(reason) = &summary.diverged {
        return Err(CimError::Divergence { step: summary.steps, reason: reason.clone() }.into());
    }
    if let Some(r) = &summary.revdet {
        println!("pretrain: {} steps, held-out detection AUC {:.3}", summary.steps, r.auc);
    } else {
        println!("pretrain: {} steps", summary.steps);
    }
    Ok(())
}

// ---------------------------------------------------------------- probe / finetune

#[derive(Debug, Clone, Serialize)]
struct EvalRun<C> {
    enhancer: PathBuf,
    random_init: bool,
    data: DataConfig,
    settings: C,
}

fn parse_eval<C: serde::de::DeserializeOwned + Default>(c: &Common, section: &str) -> Result<(EvalRun<C>, Option<u64>)> {
    let mut t = c.table()?;
    let seed = take_seed(&mut t)?;
    let enhancer = take_path(&mut t, "enhancer")?;
    let random_init = match t.remove("random_init") {
        None => false,
        Some(Value::Boolean(b)) => b,
        Some(_) => return Err(config_err("random_init must be a boolean")),
    };
    let data: DataConfig = take(&mut t, "data")?;
    let settings: C = take(&mut t, section)?;
    reject_leftovers(&t)?;
    Ok((EvalRun { enhancer, random_init, data, settings }, seed))
}

fn eval_encoder(run_enhancer: &Path, random_init: bool, seed: u64) -> Result<cim_core::Enhancer> {
    let e = load_enhancer(run_enhancer, &Device::Cpu, DType::F32)?;
    if random_init {
        Ok(evaluation::random_enhancer(&e, seed)?)
    } else {
        Ok(e)
    }
}

fn write_probe(out: &Path, kind: &str, r: &ProbeResult) -> Result<()> {
    write_json(&out.join("report.json"), r)?;
    let mut w = csv::Writer::from_path(out.join(format!("{kind}.csv")))?;
    w.write_record(["seed", "top1", "train_top1"])?;
    w.write_record([r.seed.to_string(), r.top1.to_string(), r.train_top1.to_string()])?;
    w.flush()?;
    let mut text = format!("{kind} top-1: {:.4} (train {:.4})\n", r.top1, r.train_top1);
    for (i, a) in r.per_class.iter().enumerate() {
        text.push_str(&format!("class {i}: {a:.4}\n"));
    }
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn probe(c: &Common) -> Result<()> {
    let (mut run, seed) = parse_eval::<ProbeConfig>(c, "probe")?;
    if let Some(s) = seed {
        run.settings.seed = s;
    }
    prepare_out(&c.out, c.force)?;
    RunManifest::new("probe", c.config.as_deref(), &run, run.settings.seed, &c.out)?.write(&c.out)?;
    let enc = eval_encoder(&run.enhancer, run.random_init, run.settings.seed)?;
    let f = enc.config().patch();
    let r = evaluation::linear_probe(&enc, &run.data.load(Split::Train, f)?, &run.data.load(Split::Val, f)?, &run.settings)?;
    write_probe(&c.out, "probe", &r)
}

pub fn finetune(c: &Common) -> Result<()> {
    let (mut run, seed) = parse_eval::<FinetuneConfig>(c, "finetune")?;
    if let Some(s) = seed {
        run.settings.seed = s;
    }
    prepare_out(&c.out, c.force)?;
    RunManifest::new("finetune", c.config.as_deref(), &run, run.settings.seed, &c.out)?.write(&c.out)?;
    let enc = eval_encoder(&run.enhancer, run.random_init, run.settings.seed)?;
    let f = enc.config().patch();
    let (tuned, r) = evaluation::finetune(&enc, &run.data.load(Split::Train, f)?, &run.data.load(Split::Val, f)?, &run.settings)?;
    training::save_enhancer(&tuned, &c.out.join("finetuned.ckpt"))?;
    write_probe(&c.out, "finetune", &r)
}

// ---------------------------------------------------------------- visualize

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    pub seed: u64,
    pub tokenizer: PathBuf,
    pub generator: PathBuf,
    pub images: Option<PathBuf>,
    pub count: usize,
    pub variants: usize,
    pub mask: MaskConfig,
    pub temperature: f64,
    pub data: DataConfig,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokenizer: PathBuf::new(),
            generator: PathBuf::new(),
            images: None,
            count: 4,
            variants: 4,
            mask: MaskConfig::default(),
            temperature: 1.0,
            data: DataConfig::default(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn write_panels(
    gen: &cim_core::Generator,
    tok: &TokenizerState,
    images: &[ImageTensor],
    variants: usize,
    corruption: &CorruptionConfig,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    let f = tok.downsample();
    let cfg = CorruptionConfig { sampling: SamplingStrategy::Softmax, ..corruption.clone() };
    for (i, img) in images.iter().enumerate() {
        let mut rng = seeding::rng_for(seed, &[tag("panel"), i as u64]);
        let mask = cfg.mask.sample(img.height() / f, img.width() / f, &mut rng)?;
        let outs = (0..variants)
            .map(|_| corrupt_with_mask(gen, tok, img, mask.clone(), &cfg, &mut rng).map(|s| s.corrupted_image))
            .collect::<cim_core::Result<Vec<_>>>()?;
        save_png(&dir.join(format!("panel_{i:03}.png")), &compose_panel(img, &mask, f, &outs)?)?;
    }
    Ok(())
}

pub fn visualize(c: &Common) -> Result<()> {
    let cfg: VisualizeConfig = parse(c.table()?)?;
    if cfg.tokenizer.as_os_str().is_empty() || cfg.generator.as_os_str().is_empty() {
        return Err(config_err("both tokenizer and generator checkpoints are required"));
    }
    prepare_out(&c.out, c.force)?;
    RunManifest::new("visualize", c.config.as_deref(), &cfg, cfg.seed, &c.out)?.write(&c.out)?;
    let tok = load_frozen_tokenizer(&cfg.tokenizer)?;
    let gen = load_generator(&cfg.generator, &tok, &Device::Cpu)?;
    let size = gen.spec.vit.image_size;
    let images: Vec<ImageTensor> = match &cfg.images {
        Some(dir) => cim_core::data::load_image_folder(dir, size, Split::Val)?.images,
        None => {
            let data = DataConfig { size, val_count: cfg.count, ..cfg.data.clone() };
            data.load(Split::Val, tok.downsample())?.images
        }
    };
    let images: Vec<ImageTensor> = images.into_iter().take(cfg.count).collect();
    let corruption = CorruptionConfig { mask: cfg.mask.clone(), sampling: SamplingStrategy::Softmax, temperature: cfg.temperature };
    write_panels(&gen, &tok, &images, cfg.variants, &corruption, cfg.seed, &c.out)?;
    println!("visualize: wrote {} panels to {}", images.len(), c.out.display());
    Ok(())
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateEval {
    pub probe: bool,
    pub probe_config: ProbeConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub cell: String,
    pub overrides: String,
    pub status: String,
    pub steps: u64,
    pub final_mim_loss: Option<f64>,
    pub final_enhancer_loss: Option<f64>,
    pub auc: Option<f64>,
    pub probe_top1: Option<f64>,
}

fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::new();
        for prefix in &out {
            for v in &axis.values {
                let mut c = prefix.clone();
                c.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        out = next;
    }
    out
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn ablate(c: &Common) -> Result<()> {
    let mut t = c.table()?;
    let seed = take_seed(&mut t)?;
    let mut base = match t.remove("base") {
        Some(Value::Table(b)) => b,
        None => Table::new(),
        Some(_) => return Err(config_err("[base] must be a table")),
    };
    if let Some(s) = seed {
        base.insert("seed".into(), Value::Integer(s as i64));
    }
    let axes: Vec<Axis> = match t.remove("axes") {
        Some(v) => v.try_into().map_err(|e| config_err(format!("[[axes]]: {e}")))?,
        None => Vec::new(),
    };
    let eval: AblateEval = take(&mut t, "evaluate")?;
    reject_leftovers(&t)?;
    prepare_out(&c.out, c.force)?;

    let mut seen = HashSet::new();
    let mut rows = Vec::new();
    for (i, cell) in cells(&axes).into_iter().enumerate() {
        let mut table = base.clone();
        for (k, v) in &cell {
            crate::config::set_key(&mut table, k, v.clone())?;
        }
        let run = parse_pretrain(table)?;
        let manifest_value = serde_json::to_value(&run)?;
        let hash = crate::config::hash_config(&manifest_value)?;
        let overrides = cell.iter().map(|(k, v)| format!("{k}={}", render(v))).collect::<Vec<_>>().join(" ");
        if !seen.insert(hash) {
            println!("ablate: skipping duplicate cell {overrides}");
            continue;
        }
        let name = format!("cell_{i:03}");
        let dir = c.out.join(&name);
        std::fs::create_dir_all(&dir)?;
        RunManifest::new("ablate", c.config.as_deref(), &run, run.pretrain.seed, &dir)?.write(&dir)?;
        info!("ablate: running {name} ({overrides})");
        let summary = run_pretrain(&run, &dir)?;
        let probe_top1 = if eval.probe && summary.diverged.is_none() {
            let enc = load_enhancer(&dir.join("enhancer.ckpt"), &Device::Cpu, DType::F32)?;
            let f = enc.config().patch();
            let mut pc = eval.probe_config.clone();
            pc.pooling = Pooling::Mean;
            Some(evaluation::linear_probe(&enc, &run.data.load(Split::Train, f)?, &run.data.load(Split::Val, f)?, &pc)?.top1)
        } else {
            None
        };
        if let Some(reason) = &summary.diverged {
            warn!("ablate: {name} diverged: {reason}");
        }
        rows.push(AblationRow {
            cell: name,
            overrides,
            status: if summary.diverged.is_some() { "diverged".into() } else { "ok".into() },
            steps: summary.steps,
            final_mim_loss: summary.final_mim_loss,
            final_enhancer_loss: summary.final_enhancer_loss,
            auc: summary.revdet.as_ref().map(|r| r.auc),
            probe_top1,
        });
    }
    let mut w = csv::Writer::from_path(c.out.join("results.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut md = String::from("| cell | overrides | status | mim | enhancer | auc | probe |\n|---|---|---|---|---|---|---|\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in &rows {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.cell,
            r.overrides,
            r.status,
            opt(r.final_mim_loss),
            opt(r.final_enhancer_loss),
            opt(r.auc),
            opt(r.probe_top1)
        ));
    }
    std::fs::write(c.out.join("results.md"), &md)?;
    print!("{md}");
    Ok(())
}
