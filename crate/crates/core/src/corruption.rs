//! Corrupted-image synthesis: mask some token positions, let the generator
//! fill them with sampled tokens, and decode the mixed token grid back to pixels.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbones::Generator;
use crate::data::ImageTensor;
use crate::error::{CimError, Result};
use crate::nn;
use crate::seeding::Rng;
use crate::tokenizer::{TokenGrid, TokenizerState};

/// Set of masked positions over a sequence of length `n`, kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    n: usize,
    positions: Vec<usize>,
}

impl MaskSet {
    pub fn new(n: usize, mut positions: Vec<usize>) -> Result<Self> {
        positions.sort_unstable();
        if positions.windows(2).any(|w| w[0] == w[1]) {
            return Err(CimError::validation("mask positions must be distinct"));
        }
        if let Some(&p) = positions.last() {
            if p >= n {
                return Err(CimError::validation(format!("mask position {p} outside [0, {n})")));
            }
        }
        Ok(Self { n, positions })
    }

    pub fn empty(n: usize) -> Self {
        Self { n, positions: Vec::new() }
    }

    pub fn full(n: usize) -> Self {
        Self { n, positions: (0..n).collect() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn contains(&self, p: usize) -> bool {
        self.positions.binary_search(&p).is_ok()
    }

    pub fn ratio(&self) -> f64 {
        self.k() as f64 / self.n.max(1) as f64
    }
}

/// `k` distinct positions out of `n`, uniform over all `k`-subsets.
pub fn sample_mask_random(n: usize, k: usize, rng: &mut Rng) -> Result<MaskSet> {
    if k > n {
        return Err(CimError::validation(format!("cannot mask {k} of {n} positions")));
    }
    let positions = index::sample(rng, n, k).into_vec();
    MaskSet::new(n, positions)
}

const BLOCK_MIN_CELLS: usize = 4;
const BLOCK_ASPECT: f64 = 0.3;
const BLOCK_MAX_ATTEMPTS: usize = 10_000;

/// Union of random rectangles covering between `target_ratio` and
/// `target_ratio + 0.05` of an `h×w` grid.
///
/// Blocks of at least four cells are placed until the target count is reached,
/// never overshooting the 5% slack. When the remainder gets too small for such
/// blocks to land, the minimum block size is relaxed to one cell.
pub fn sample_mask_blockwise(h: usize, w: usize, target_ratio: f64, rng: &mut Rng) -> Result<MaskSet> {
    let n = h * w;
    if n < 16 {
        return Err(CimError::validation(format!("blockwise masking needs at least 16 cells, got {n}")));
    }
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(CimError::validation(format!("target ratio {target_ratio} outside (0, 1)")));
    }
    let need = (target_ratio * n as f64).ceil() as usize;
    let limit = need.max(((target_ratio + 0.05) * n as f64 + 1e-9).floor() as usize);
    let mut grid = vec![false; n];
    let mut count = 0usize;
    let mut failures = 0usize;
    let log_aspect = (BLOCK_ASPECT.ln(), (1.0 / BLOCK_ASPECT).ln());
    for _ in 0..BLOCK_MAX_ATTEMPTS {
        if count >= need {
            break;
        }
        let min_cells = if failures >= 50 { 1 } else { BLOCK_MIN_CELLS };
        let max_cells = (need - count).max(min_cells);
        let area = rng.random_range(min_cells as f64..=max_cells as f64);
        let aspect = rng.random_range(log_aspect.0..log_aspect.1).exp();
        let bh = ((area * aspect).sqrt().round() as usize).max(1);
        let bw = ((area / aspect).sqrt().round() as usize).max(1);
        if bh > h || bw > w || bh * bw < min_cells {
            failures += 1;
            continue;
        }
        let top = rng.random_range(0..=h - bh);
        let left = rng.random_range(0..=w - bw);
        let fresh = (top..top + bh)
            .flat_map(|y| (left..left + bw).map(move |x| y * w + x))
            .filter(|&i| !grid[i])
            .count();
        if fresh == 0 || count + fresh > limit {
            failures += 1;
            continue;
        }
        for y in top..top + bh {
            for x in left..left + bw {
                grid[y * w + x] = true;
            }
        }
        count += fresh;
    }
    if count < need {
        return Err(CimError::validation(format!(
            "blockwise masking reached {count} of {need} cells"
        )));
    }
    let positions = (0..n).filter(|&i| grid[i]).collect();
    MaskSet::new(n, positions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    #[default]
    Random,
    Blockwise,
}

/// How many positions to mask and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    /// Masked count is drawn uniformly from `[⌈min·n⌉, ⌈max·n⌉]`.
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { strategy: MaskStrategy::Random, ratio_min: 0.5, ratio_max: 0.6 }
    }
}

impl MaskConfig {
    pub fn fixed(ratio: f64) -> Self {
        Self { ratio_min: ratio, ratio_max: ratio, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.ratio_min) || !ok(self.ratio_max) || self.ratio_min > self.ratio_max {
            return Err(CimError::config(format!(
                "mask ratio range [{}, {}] is invalid",
                self.ratio_min, self.ratio_max
            )));
        }
        Ok(())
    }

    pub fn count_range(&self, n: usize) -> (usize, usize) {
        let lo = (self.ratio_min * n as f64).ceil() as usize;
        let hi = (self.ratio_max * n as f64).ceil() as usize;
        (lo.min(n), hi.min(n))
    }

    pub fn sample(&self, h: usize, w: usize, rng: &mut Rng) -> Result<MaskSet> {
        let n = h * w;
        let (lo, hi) = self.count_range(n);
        let k = rng.random_range(lo..=hi);
        match self.strategy {
            MaskStrategy::Random => sample_mask_random(n, k, rng),
            MaskStrategy::Blockwise => {
                if k == 0 {
                    Ok(MaskSet::empty(n))
                } else {
                    sample_mask_blockwise(h, w, k as f64 / n as f64, rng)
                }
            }
        }
    }
}

/// Replaces the masked rows of an `(n, d)` embedding matrix with `mask_embedding`.
pub fn apply_mask(embeddings: &Tensor, mask: &MaskSet, mask_embedding: &Tensor) -> Result<Tensor> {
    let (n, _) = embeddings.dims2()?;
    if mask.n() != n {
        return Err(CimError::shape(format!("mask over {} positions, {n} rows given", mask.n())));
    }
    let m = crate::backbones::mask_tensor(std::slice::from_ref(mask), n, embeddings.dtype(), embeddings.device())?
        .squeeze(0)?;
    crate::backbones::apply_mask(embeddings, &m, mask_embedding)
}

/// Generator logits at the masked positions, one row per position in ascending order.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub logits: Tensor,
    pub positions: Vec<usize>,
}

impl GeneratorOutput {
    /// Picks the masked rows out of full `(n, V)` logits.
    pub fn gather(all: &Tensor, mask: &MaskSet) -> Result<Self> {
        let (n, v) = all.dims2()?;
        if mask.n() != n {
            return Err(CimError::shape(format!("mask over {} positions, logits have {n}", mask.n())));
        }
        let logits = if mask.k() == 0 {
            Tensor::zeros((0, v), all.dtype(), all.device())?
        } else {
            let idx: Vec<u32> = mask.positions().iter().map(|&p| p as u32).collect();
            let idx = Tensor::from_vec(idx, mask.k(), all.device())?;
            all.index_select(&idx, 0)?
        };
        Ok(Self { logits, positions: mask.positions().to_vec() })
    }

    pub fn k(&self) -> usize {
        self.positions.len()
    }

    pub fn vocab_size(&self) -> Result<usize> {
        Ok(self.logits.dim(1)?)
    }

    fn rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.k() == 0 {
            return Ok(Vec::new());
        }
        Ok(self.logits.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

/// Generator prediction for a single image `(3, H, W)`.
pub fn generator_predict(
    gen: &Generator,
    tok: &TokenizerState,
    img: &Tensor,
    mask: &MaskSet,
) -> Result<GeneratorOutput> {
    if gen.vocab_size() != tok.vocab_size() {
        return Err(CimError::config(format!(
            "generator vocabulary {} differs from tokenizer vocabulary {}",
            gen.vocab_size(),
            tok.vocab_size()
        )));
    }
    Ok(gen.predict(&img.unsqueeze(0)?, std::slice::from_ref(mask))?.remove(0))
}

/// Mean cross-entropy of the golden tokens at the masked positions.
pub fn mim_loss(out: &GeneratorOutput, golden: &TokenGrid, mask: &MaskSet) -> Result<Tensor> {
    if mask.k() == 0 {
        return Err(CimError::validation("masked-token loss is undefined for an empty mask"));
    }
    if out.positions != mask.positions() || golden.len() != mask.n() {
        return Err(CimError::shape("generator output, golden grid and mask disagree"));
    }
    let targets: Vec<u32> = mask.positions().iter().map(|&p| golden.ids[p]).collect();
    let targets = Tensor::from_vec(targets, (mask.k(), 1), out.logits.device())?;
    let logp = nn::log_softmax_last(&out.logits)?;
    Ok(logp.gather(&targets, 1)?.mean_all()?.neg()?)
}

/// Batched masked-token cross-entropy: `logits (B, n, V)`, `mask (B, n)` 0/1.
/// Averages over all masked positions in the batch.
pub fn masked_token_ce(logits: &Tensor, golden: &[TokenGrid], mask: &Tensor) -> Result<Tensor> {
    let (b, n, _) = logits.dims3()?;
    if golden.len() != b || golden.iter().any(|g| g.len() != n) {
        return Err(CimError::shape("golden grids do not match the logits"));
    }
    let total = nn::scalar(&mask.sum_all()?)?;
    if total <= 0.0 {
        return Err(CimError::validation("masked-token loss is undefined for an empty mask"));
    }
    let ids: Vec<u32> = golden.iter().flat_map(|g| g.ids.iter().copied()).collect();
    let ids = Tensor::from_vec(ids, (b, n, 1), logits.device())?;
    let nll = nn::log_softmax_last(logits)?.gather(&ids, 2)?.squeeze(2)?.neg()?;
    let m = mask.to_dtype(nll.dtype())?;
    Ok(((nll * m)?.sum_all()? / total)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Categorical draw from `softmax(logits / T)`. Equal in distribution to
    /// Gumbel-max sampling.
    #[default]
    Softmax,
    /// Row-wise argmax, ties to the lowest id.
    Argmax,
    /// Uniform over the vocabulary, ignoring the logits.
    Uniform,
}

fn draw_row(row: &[f64], strategy: SamplingStrategy, temperature: f64, rng: &mut Rng) -> Result<u32> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(CimError::NonFinite("generator logits".into()));
    }
    let id = match strategy {
        SamplingStrategy::Argmax => {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        }
        SamplingStrategy::Uniform => rng.random_range(0..row.len()),
        SamplingStrategy::Softmax => {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row.iter().map(|&v| ((v - max) / temperature).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = row.len() - 1;
            for (i, &wt) in weights.iter().enumerate() {
                if u < wt {
                    pick = i;
                    break;
                }
                u -= wt;
            }
            pick
        }
    };
    Ok(id as u32)
}

fn check_temperature(strategy: SamplingStrategy, temperature: f64) -> Result<()> {
    if strategy == SamplingStrategy::Softmax && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CimError::config(format!("sampling temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// One replacement id per masked position, in ascending position order.
pub fn sample_replacements(
    out: &GeneratorOutput,
    strategy: SamplingStrategy,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    check_temperature(strategy, temperature)?;
    out.rows()?
        .iter()
        .map(|row| draw_row(row, strategy, temperature, rng))
        .collect()
}

/// Golden ids off the mask, sampled ids on it.
pub fn compose_corrupted(golden: &TokenGrid, mask: &MaskSet, sampled: &[u32]) -> Result<TokenGrid> {
    if sampled.len() != mask.k() {
        return Err(CimError::shape(format!(
            "{} sampled ids for {} masked positions",
            sampled.len(),
            mask.k()
        )));
    }
    if mask.n() != golden.len() {
        return Err(CimError::shape("mask and token grid sizes differ"));
    }
    let mut ids = golden.ids.clone();
    for (&p, &id) in mask.positions().iter().zip(sampled) {
        ids[p] = id;
    }
    TokenGrid::new(golden.h, golden.w, golden.vocab, ids)
}

/// Binary `h×w` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagGrid {
    pub h: usize,
    pub w: usize,
    pub flags: Vec<u8>,
}

impl FlagGrid {
    pub fn count(&self) -> usize {
        self.flags.iter().map(|&f| f as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.flags.len().max(1) as f64
    }
}

/// 1 where the corrupted id differs from the golden id.
pub fn replacement_flags(golden: &TokenGrid, corrupted: &TokenGrid) -> Result<FlagGrid> {
    if golden.h != corrupted.h || golden.w != corrupted.w {
        return Err(CimError::shape(format!(
            "grids {}x{} and {}x{} differ in shape",
            golden.h, golden.w, corrupted.h, corrupted.w
        )));
    }
    let flags = golden
        .ids
        .iter()
        .zip(&corrupted.ids)
        .map(|(a, b)| u8::from(a != b))
        .collect();
    Ok(FlagGrid { h: golden.h, w: golden.w, flags })
}

#[derive(Debug, Clone)]
pub struct CorruptionSample {
    pub original: ImageTensor,
    pub mask: MaskSet,
    pub golden: TokenGrid,
    pub sampled: Vec<u32>,
    pub corrupted_tokens: TokenGrid,
    pub corrupted_image: ImageTensor,
    pub flags: FlagGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub mask: MaskConfig,
    pub sampling: SamplingStrategy,
    pub temperature: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self { mask: MaskConfig::default(), sampling: SamplingStrategy::Softmax, temperature: 1.0 }
    }
}

fn require_frozen(tok: &TokenizerState) -> Result<()> {
    if !tok.is_frozen() {
        return Err(CimError::Frozen);
    }
    Ok(())
}

/// Full corruption record for one image with an explicit mask.
pub fn corrupt_with_mask(
    gen: &Generator,
    tok: &TokenizerState,
    img: &ImageTensor,
    mask: MaskSet,
    cfg: &CorruptionConfig,
    rng: &mut Rng,
) -> Result<CorruptionSample> {
    require_frozen(tok)?;
    let golden = tok.encode_tokens(img)?;
    if mask.n() != golden.len() {
        return Err(CimError::shape("mask does not match the token grid"));
    }
    let x = img.to_tensor(gen.mask_embedding.device(), gen.mask_embedding.dtype())?;
    let out = generator_predict(gen, tok, &x, &mask)?;
    let sampled = sample_replacements(&out, cfg.sampling, cfg.temperature, rng)?;
    let corrupted_tokens = compose_corrupted(&golden, &mask, &sampled)?;
    let corrupted_image = tok.decode_tokens(&corrupted_tokens)?;
    let flags = replacement_flags(&golden, &corrupted_tokens)?;
    Ok(CorruptionSample {
        original: img.clone(),
        mask,
        golden,
        sampled,
        corrupted_tokens,
        corrupted_image,
        flags,
    })
}

/// Full corruption record for one image, drawing the mask from `rng` first.
pub fn corrupt(
    gen: &Generator,
    tok: &TokenizerState,
    img: &ImageTensor,
    cfg: &CorruptionConfig,
    rng: &mut Rng,
) -> Result<CorruptionSample> {
    let g = tok.downsample();
    let mask = cfg.mask.sample(img.height() / g, img.width() / g, rng)?;
    corrupt_with_mask(gen, tok, img, mask, cfg, rng)
}

/// Corrupted grids for a batch, sampling from precomputed `(B, n, V)` logits.
pub fn corrupt_tokens_from_logits(
    logits: &Tensor,
    golden: &[TokenGrid],
    masks: &[MaskSet],
    strategy: SamplingStrategy,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Vec<TokenGrid>> {
    check_temperature(strategy, temperature)?;
    let (b, _, _) = logits.dims3()?;
    if golden.len() != b || masks.len() != b {
        return Err(CimError::shape("batch sizes of logits, grids and masks differ"));
    }
    let rows = logits.detach().to_dtype(DType::F64)?.to_vec3::<f64>()?;
    golden
        .iter()
        .zip(masks)
        .zip(&rows)
        .map(|((g, m), r)| {
            let sampled = m
                .positions()
                .iter()
                .map(|&p| draw_row(&r[p], strategy, temperature, rng))
                .collect::<Result<Vec<_>>>()?;
            compose_corrupted(g, m, &sampled)
        })
        .collect()
}

/// Erases whole `block×block` cells until `round(ratio · cells)` are filled
/// with `fill`. Returns the image and a per-pixel erased mask.
pub fn corrupt_random_erase(
    img: &ImageTensor,
    ratio: f64,
    fill: [f32; 3],
    block: usize,
    rng: &mut Rng,
) -> Result<(ImageTensor, Vec<bool>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(CimError::validation(format!("erase ratio {ratio} outside [0, 1)")));
    }
    let (h, w) = (img.height(), img.width());
    let block = block.max(1);
    let (gh, gw) = (h.div_ceil(block), w.div_ceil(block));
    let cells = gh * gw;
    let k = (ratio * cells as f64).round() as usize;
    let chosen = index::sample(rng, cells, k).into_vec();
    let mut erased = vec![false; h * w];
    for c in chosen {
        let (cy, cx) = (c / gw, c % gw);
        for y in cy * block..((cy + 1) * block).min(h) {
            for x in cx * block..((cx + 1) * block).min(w) {
                erased[y * w + x] = true;
            }
        }
    }
    let mut data = img.data().to_vec();
    for (i, &e) in erased.iter().enumerate() {
        if e {
            data[i * 3..i * 3 + 3].copy_from_slice(&fill);
        }
    }
    Ok((ImageTensor::from_clamped(h, w, data)?, erased))
}

/// Original with masked cells blended toward gray.
pub fn masked_overlay(img: &ImageTensor, mask: &MaskSet, cell: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height(), img.width());
    let gw = w / cell.max(1);
    let mut data = img.data().to_vec();
    for &p in mask.positions() {
        let (cy, cx) = (p / gw, p % gw);
        for y in cy * cell..(cy + 1) * cell {
            for x in cx * cell..(cx + 1) * cell {
                for c in 0..3 {
                    let v = &mut data[(y * w + x) * 3 + c];
                    *v = 0.25 * *v + 0.375;
                }
            }
        }
    }
    ImageTensor::from_clamped(h, w, data)
}

/// One row: original, masked overlay, then each corrupted variant.
pub fn compose_panel(
    original: &ImageTensor,
    mask: &MaskSet,
    cell: usize,
    variants: &[ImageTensor],
) -> Result<ImageTensor> {
    let mut row = vec![original.clone(), masked_overlay(original, mask, cell)?];
    row.extend(variants.iter().cloned());
    hstack(&row, 2)
}

/// Writes `original.png`, `masked.png` and `corrupted_{i}.png` into `dir`
/// plus a single side-by-side `panel.png`.
pub fn export_panels(dir: &Path, samples: &[CorruptionSample], cell: usize) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| CimError::validation("no corruption samples to export"))?;
    std::fs::create_dir_all(dir).map_err(|e| CimError::io(dir, e))?;
    save_png(&dir.join("original.png"), &first.original)?;
    save_png(&dir.join("masked.png"), &masked_overlay(&first.original, &first.mask, cell)?)?;
    let variants: Vec<ImageTensor> = samples.iter().map(|s| s.corrupted_image.clone()).collect();
    for (i, v) in variants.iter().enumerate() {
        save_png(&dir.join(format!("corrupted_{i}.png")), v)?;
    }
    save_png(&dir.join("panel.png"), &compose_panel(&first.original, &first.mask, cell, &variants)?)
}

pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    img.to_rgb8().save(path)?;
    Ok(())
}

fn hstack(images: &[ImageTensor], gap: usize) -> Result<ImageTensor> {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w: usize = images.iter().map(|i| i.width()).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut data = vec![1.0f32; h * w * 3];
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                let o = (y * w + x0 + x) * 3;
                data[o..o + 3].copy_from_slice(&img.pixel(y, x));
            }
        }
        x0 += img.width() + gap;
    }
    ImageTensor::new(h, w, data)
}

#[cfg(test)]
mod tests;
