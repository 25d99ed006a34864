//! Images, toy datasets, augmentation and batching.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CimError, Result};
use crate::seeding::{self, Rng};

/// An `H×W×3` image stored row-major with interleaved channels, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * Self::CHANNELS {
            return Err(CimError::shape(format!(
                "image buffer has {} values, expected {}x{}x3",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(CimError::validation(format!(
                "image value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping values into `[0, 1]`. Non-finite values are rejected.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CimError::NonFinite("image data".into()));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.height * self.width).max(1) as f64;
        acc.map(|s| (s / n) as f32)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn crop(&self, rect: CropRect) -> Result<Self> {
        if rect.height == 0
            || rect.width == 0
            || rect.top + rect.height > self.height
            || rect.left + rect.width > self.width
        {
            return Err(CimError::shape(format!("crop {rect:?} outside image")));
        }
        let mut data = Vec::with_capacity(rect.height * rect.width * 3);
        for y in rect.top..rect.top + rect.height {
            let start = (y * self.width + rect.left) * 3;
            data.extend_from_slice(&self.data[start..start + rect.width * 3]);
        }
        Ok(Self {
            height: rect.height,
            width: rect.width,
            data,
        })
    }

    /// Bilinear resize with half-pixel centers. Resizing to the same size is the identity.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Self {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / out_h as f32;
        let sx = self.width as f32 / out_w as f32;
        let mut data = Vec::with_capacity(out_h * out_w * 3);
        for oy in 0..out_h {
            let fy = ((oy as f32 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ((ox as f32 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(self.width - 1);
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    data.push((top * (1.0 - wy) + bot * wy).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// `(3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?;
        Ok(t)
    }

    /// Inverse of [`ImageTensor::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(CimError::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .contiguous()?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_clamped(h, w, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data,
        }
    }
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn images_to_tensor(images: &[ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| CimError::shape("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut buf = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(CimError::shape("images in a batch must share dimensions"));
        }
        buf.extend_from_slice(&img.data);
    }
    let t = Tensor::from_vec(buf, (images.len(), h, w, 3), device)?
        .permute((0, 3, 1, 2))?
        .contiguous()?
        .to_dtype(dtype)?;
    Ok(t)
}

pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let b = t.dim(0)?;
    (0..b).map(|i| ImageTensor::from_tensor(&t.get(i)?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<ImageTensor>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        split: Split,
        seed: u64,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(CimError::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(CimError::validation(format!(
                "label {l} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height, i.width))
    }

    /// First `n` items (or all, if fewer).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
            split: self.split,
            seed: self.seed,
        }
    }

    /// Content fingerprint over pixels and labels.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            for v in &img.data {
                h.update(v.to_le_bytes());
            }
            h.update((l as u64).to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn manifest(&self, source: &str) -> DatasetManifest {
        DatasetManifest {
            source: source.to_string(),
            seed: self.seed,
            size: self.image_size().map(|(h, _)| h).unwrap_or(0),
            split: self.split,
            count: self.len(),
            class_names: self.class_names.clone(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Geometric shape classes of the procedural dataset, in label order.
pub const SHAPE_CLASSES: [&str; 6] = ["circle", "square", "triangle", "cross", "ring", "diamond"];

// Shapes are always lighter than their background so that contrast polarity is
// stable across the colour jitter.
const FOREGROUNDS: [[f32; 3]; 5] = [
    [0.95, 0.45, 0.35],
    [0.45, 0.90, 0.50],
    [0.55, 0.70, 0.98],
    [0.98, 0.92, 0.45],
    [0.95, 0.95, 0.95],
];

const BACKGROUNDS: [[f32; 3]; 4] = [
    [0.10, 0.10, 0.12],
    [0.30, 0.08, 0.10],
    [0.06, 0.22, 0.12],
    [0.10, 0.14, 0.35],
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    pub num_classes: usize,
    pub split: Split,
    /// Tokenizer downsample factor the images must be divisible by.
    pub downsample: usize,
}

impl ShapesConfig {
    pub fn new(seed: u64, count: usize, size: usize, num_classes: usize) -> Self {
        Self {
            seed,
            count,
            size,
            num_classes,
            split: Split::Train,
            downsample: 8,
        }
    }

    pub fn split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn downsample(mut self, f: usize) -> Self {
        self.downsample = f;
        self
    }
}

fn shape_contains(class: usize, u: f32, v: f32) -> bool {
    match class {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => {
            // apex up, base down
            let (ax, ay, bx, by, cx, cy) = (0.0, -0.95, -0.95, 0.8, 0.95, 0.8);
            let e = |x0: f32, y0: f32, x1: f32, y1: f32| (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
            let (d0, d1, d2) = (e(ax, ay, bx, by), e(bx, by, cx, cy), e(cx, cy, ax, ay));
            (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
        }
        3 => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
        4 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render_shape(class: usize, size: usize, rng: &mut Rng) -> ImageTensor {
    let s = size as f32;
    let bg = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let fg = FOREGROUNDS[rng.random_range(0..FOREGROUNDS.len())];
    let radius = s * rng.random_range(0.26f32..0.34);
    let cx = s * rng.random_range(0.35f32..0.65);
    let cy = s * rng.random_range(0.35f32..0.65);
    let grad = [rng.random_range(-0.12f32..0.12), rng.random_range(-0.12f32..0.12)];
    let freq = rng.random_range(0.4f32..0.9);
    let phase = rng.random_range(0.0f32..std::f32::consts::TAU);

    const SS: usize = 3;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0f32;
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                    if shape_contains(class, (px - cx) / radius, (py - cy) / radius) {
                        cover += 1.0;
                    }
                }
            }
            cover /= (SS * SS) as f32;
            let (fx, fy) = (x as f32 / s - 0.5, y as f32 / s - 0.5);
            let shade = grad[0] * fx + grad[1] * fy + 0.03 * (freq * (x + y) as f32 + phase).sin();
            for c in 0..3 {
                let b = bg[c] + shade;
                data.push((b * (1.0 - cover) + fg[c] * cover).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor {
        height: size,
        width: size,
        data,
    }
}

/// Procedural shapes dataset; the label is the shape type. Pure in its arguments.
pub fn generate_shapes(cfg: &ShapesConfig) -> Result<LabeledDataset> {
    if cfg.downsample == 0 || cfg.size == 0 || cfg.size % cfg.downsample != 0 {
        return Err(CimError::config(format!(
            "image size {} not divisible by downsample factor {}",
            cfg.size, cfg.downsample
        )));
    }
    if cfg.num_classes < 2 || cfg.num_classes > SHAPE_CLASSES.len() {
        return Err(CimError::config(format!(
            "num_classes must be in [2, {}], got {}",
            SHAPE_CLASSES.len(),
            cfg.num_classes
        )));
    }
    let split_tag = match cfg.split {
        Split::Train => seeding::tag("train"),
        Split::Val => seeding::tag("val"),
    };
    let mut images = Vec::with_capacity(cfg.count);
    let mut labels = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let mut rng = seeding::rng_for(cfg.seed, &[split_tag, i as u64]);
        let label = rng.random_range(0..cfg.num_classes);
        images.push(render_shape(label, cfg.size, &mut rng));
        labels.push(label);
    }
    let class_names = SHAPE_CLASSES[..cfg.num_classes]
        .iter()
        .map(|s| s.to_string())
        .collect();
    LabeledDataset::new(images, labels, class_names, cfg.split, cfg.seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub out_size: usize,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (0.6, 1.0),
            out_size: 32,
            flip_prob: 0.5,
        }
    }
}

const CROP_ATTEMPTS: usize = 10;
const LOG_RATIO: (f64, f64) = (-0.287_682_072_451_780_9, 0.287_682_072_451_780_9); // ln(3/4), ln(4/3)

/// Samples a random-resized-crop rectangle.
///
/// Rng consumption order: per attempt one `f64` for the area scale and one
/// `f64` for the log aspect ratio; on the first valid attempt, `top` then
/// `left` as uniform integers. After `CROP_ATTEMPTS` rejected attempts the
/// centered crop of the largest in-ratio rectangle is used.
pub fn sample_crop(h: usize, w: usize, scale_range: (f64, f64), rng: &mut Rng) -> CropRect {
    let area = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let s: f64 = rng.random();
        let r: f64 = rng.random();
        let target = area * (scale_range.0 + s * (scale_range.1 - scale_range.0));
        let ratio = (LOG_RATIO.0 + r * (LOG_RATIO.1 - LOG_RATIO.0)).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropRect {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < 0.75 {
        (((w as f64) / 0.75).round() as usize, w)
    } else if in_ratio > 4.0 / 3.0 {
        (h, ((h as f64) * 4.0 / 3.0).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    CropRect {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Random-resized crop followed by a horizontal flip. The flip draw (one `f64`)
/// is always consumed after the crop draws, even when `flip_prob` is zero.
pub fn augment(image: &ImageTensor, rng: &mut Rng, cfg: &AugmentConfig) -> Result<ImageTensor> {
    let (lo, hi) = cfg.scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CimError::config(format!(
            "crop scale range ({lo}, {hi}) must lie in (0, 1]"
        )));
    }
    if cfg.out_size == 0 || cfg.out_size > image.height.min(image.width) {
        return Err(CimError::config(format!(
            "output size {} must be in [1, {}]",
            cfg.out_size,
            image.height.min(image.width)
        )));
    }
    let rect = sample_crop(image.height, image.width, cfg.scale_range, rng);
    let out = image.crop(rect)?.resize_bilinear(cfg.out_size, cfg.out_size);
    let flip: f64 = rng.random();
    Ok(if flip < cfg.flip_prob {
        out.flip_horizontal()
    } else {
        out
    })
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeding::rng_for(shuffle_seed, &[seeding::tag("epoch"), epoch]);
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
}

/// One epoch of shuffled batches; the last partial batch is kept.
pub struct BatchIter<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            images: indices.iter().map(|&i| self.ds.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.ds.labels[i]).collect(),
            indices,
        })
    }
}

pub fn iterate_batches(
    ds: &LabeledDataset,
    batch: usize,
    shuffle_seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch == 0 {
        return Err(CimError::config("batch size must be at least 1"));
    }
    Ok(BatchIter {
        ds,
        order: epoch_permutation(ds.len(), shuffle_seed, epoch),
        batch,
        pos: 0,
    })
}

/// Structured description of a dataset, written next to generated or ingested data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub seed: u64,
    pub size: usize,
    pub split: Split,
    pub count: usize,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| CimError::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| CimError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CimError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CimError::Serde(e.to_string()))
    }
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

/// Loads `root/<class_name>/*.{png,ppm}`; classes are the sorted subdirectory names.
pub fn load_image_folder(root: &Path, size: usize, split: Split) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CimError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(CimError::config(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CimError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        for f in files {
            let rgb = image::open(&f)?.to_rgb8();
            images.push(ImageTensor::from_rgb8(&rgb).resize_bilinear(size, size));
            labels.push(label);
        }
    }
    LabeledDataset::new(images, labels, class_names, split, 0)
}
