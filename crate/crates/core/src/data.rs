//! Image/mask datasets on disk, augmentation, normalization and a synthetic
//! glass-shape generator.
//!
//! Layout: `<root>/<split>/images/*.{png,jpg,jpeg}` paired by file stem with
//! `<root>/<split>/masks/*.png`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::resize_bilinear;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_INPUT_SIZE: usize = 384;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
/// Ground-truth pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub split: Split,
    pub image_dir: String,
    pub mask_dir: String,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>, split: Split) -> Self {
        Self { root: root.into(), split, image_dir: "images".into(), mask_dir: "masks".into() }
    }

    pub fn images(&self) -> PathBuf {
        self.root.join(self.split.as_str()).join(&self.image_dir)
    }

    pub fn masks(&self) -> PathBuf {
        self.root.join(self.split.as_str()).join(&self.mask_dir)
    }
}

/// One image in `[0, 1]` (`[3, H, W]`) with its binary mask (`[1, H, W]`, values 0 or 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.data().iter().map(|&v| v > 0.5).collect()
    }
}

fn stems(dir: &Path, exts: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| exts.contains(&e.as_str())) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Dataset(format!("`{stem}` appears twice: {} and {}", prev.display(), path.display())));
        }
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// `[3, H, W]` in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// `[1, H, W]` of 0/1.
pub fn mask_to_tensor(img: &GrayImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p[0] >= MASK_THRESHOLD { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(&[1, h, w], data)
}

/// Bilinear resize of a `[C, H, W]` image.
pub fn resize_image(image: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = image.shape();
    if s[1] == size && s[2] == size {
        return image.clone();
    }
    let batched = image.clone().reshape(&[1, s[0], s[1], s[2]]);
    resize_bilinear(&batched, size, size).reshape(&[s[0], size, size])
}

/// Nearest-neighbour resize of a `[C, H, W]` mask.
pub fn resize_mask(mask: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = mask.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == size && w == size {
        return mask.clone();
    }
    let src = |o: usize, n: usize| (((o as f64 + 0.5) * n as f64 / size as f64) as usize).min(n - 1);
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let sy = src(y, h);
            for x in 0..size {
                data.push(mask.data()[(ch * h + sy) * w + src(x, w)]);
            }
        }
    }
    Tensor::from_vec(&[c, size, size], data)
}

/// Loads every image/mask pair of a split, sorted by id and resized to
/// `size × size`.
pub fn load_dataset(layout: &DatasetLayout, size: usize) -> Result<Vec<Sample>> {
    let images = stems(&layout.images(), &IMAGE_EXTS)?;
    let masks = stems(&layout.masks(), &["png"])?;
    if let Some(stem) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Dataset(format!("image `{stem}` has no mask in {}", layout.masks().display())));
    }
    if let Some(stem) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Dataset(format!("mask `{stem}` has no image in {}", layout.images().display())));
    }
    if images.is_empty() {
        log::warn!("no samples found under {}", layout.images().display());
    }
    let mut out = Vec::with_capacity(images.len());
    for (id, path) in images {
        let img = read_image(&path)?.to_rgb8();
        let mask_path = &masks[&id];
        let mask = read_image(mask_path)?.to_luma8();
        if img.dimensions() != mask.dimensions() {
            return Err(Error::Dataset(format!(
                "`{id}`: image is {:?} but mask is {:?}",
                img.dimensions(),
                mask.dimensions()
            )));
        }
        out.push(Sample {
            id,
            image: resize_image(&image_to_tensor(&img), size),
            mask: resize_mask(&mask_to_tensor(&mask), size),
        });
    }
    log::info!("loaded {} samples from {}/{}", out.len(), layout.root.display(), layout.split);
    Ok(out)
}

/// Mirrors every channel left-right.
pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(w).take(c * h) {
        row.reverse();
    }
    Tensor::from_vec(&[c, h, w], data)
}

/// Rotates every channel by 90° counter-clockwise `quarter_turns` times.
pub fn rot90(t: &Tensor<f32>, quarter_turns: usize) -> Tensor<f32> {
    let mut cur = t.clone();
    for _ in 0..quarter_turns % 4 {
        let s = cur.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut data = vec![0f32; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // (y, x) moves to (w - 1 - x, y) in a w × h grid.
                    data[(ch * w + (w - 1 - x)) * h + y] = cur.data()[(ch * h + y) * w + x];
                }
            }
        }
        cur = Tensor::from_vec(&[c, w, h], data);
    }
    cur
}

/// Random horizontal flip (p = 0.5) then a rotation by a uniform multiple of 90°.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R) -> Sample {
    let flip = rng.random_bool(0.5);
    let turns = rng.random_range(0..4);
    let tf = |t: &Tensor<f32>| {
        let t = if flip { hflip(t) } else { t.clone() };
        rot90(&t, turns)
    };
    Sample { id: sample.id.clone(), image: tf(&sample.image), mask: tf(&sample.mask) }
}

/// Per-channel standardization with ImageNet statistics.
pub fn normalize<T: Scalar>(image: &Tensor<f32>) -> Tensor<T> {
    let s = image.shape();
    let plane = s[1] * s[2];
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            cast((v as f64 - IMAGENET_MEAN[c]) / IMAGENET_STD[c])
        })
        .collect();
    Tensor::from_vec(s, data)
}

/// Normalized images `[N, 3, H, W]` and masks `[N, 1, H, W]`.
pub fn make_batch<T: Scalar>(samples: &[&Sample]) -> (Tensor<T>, Tensor<T>) {
    let images: Vec<Tensor<T>> = samples.iter().map(|s| normalize(&s.image)).collect();
    let masks: Vec<Tensor<T>> = samples.iter().map(|s| s.mask.cast()).collect();
    (Tensor::stack(&images), Tensor::stack(&masks))
}

/// Epoch order: a seeded permutation of the (already sorted) sample indices.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (image.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    save(path, |p| img.save(p))
}

/// Writes a single-channel map with values in `[0, 1]` as 8-bit grayscale.
pub fn write_gray(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(values[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    save(path, |p| img.save(p))
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    f(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Allowed foreground fraction of a synthetic mask.
pub const SYNTH_MIN_FG: f64 = 0.01;
pub const SYNTH_MAX_FG: f64 = 0.60;

/// A rendered synthetic sample: image `[3, H, W]` and mask `[1, H, W]`.
pub fn synth_sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Tensor<f32>, Tensor<f32>) {
    loop {
        let (image, mask) = render_synth(size, rng);
        let fg = mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / (size * size) as f64;
        if (SYNTH_MIN_FG..=SYNTH_MAX_FG).contains(&fg) {
            return (image, mask);
        }
    }
}

fn render_synth<R: Rng + ?Sized>(size: usize, rng: &mut R) -> (Tensor<f32>, Tensor<f32>) {
    let n = size * size;
    let sz = size as f64;
    let noise = Normal::new(0.0, 0.03).unwrap();

    // Background: a few colored sinusoidal gratings plus pixel noise.
    let waves: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let color = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(1.0..6.0) * std::f64::consts::TAU / sz;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (color, angle, freq, phase)
        })
        .collect();
    let background = |x: f64, y: f64, c: usize| -> f64 {
        let mut v = 0.0;
        for (color, angle, freq, phase) in &waves {
            let t = (x * angle.cos() + y * angle.sin()) * freq + phase;
            v += color[c] * (0.5 + 0.5 * t.sin());
        }
        v / waves.len() as f64
    };

    // Convex shapes: polygons inscribed in random ellipses.
    let shapes = rng.random_range(1..=3);
    let polys: Vec<Vec<(f64, f64)>> = (0..shapes)
        .map(|_| {
            let cx = rng.random_range(0.2..0.8) * sz;
            let cy = rng.random_range(0.2..0.8) * sz;
            let ax = rng.random_range(0.08..0.3) * sz;
            let ay = rng.random_range(0.08..0.3) * sz;
            let rot: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let k = rng.random_range(4..=8);
            let mut angles: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.total_cmp(b));
            angles
                .iter()
                .map(|&a| {
                    let (px, py) = (ax * a.cos(), ay * a.sin());
                    (cx + px * rot.cos() - py * rot.sin(), cy + px * rot.sin() + py * rot.cos())
                })
                .collect()
        })
        .collect();

    let mut hard = vec![0f32; n];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            if polys.iter().any(|poly| inside_convex(poly, p)) {
                hard[y * size + x] = 1.0;
            }
        }
    }
    let soft = box_blur(&box_blur(&hard, size), size);

    let tint = [rng.random_range(0.6..1.0), rng.random_range(0.7..1.0), rng.random_range(0.8..1.0)];
    let alpha = rng.random_range(0.35..0.6);
    let shift = rng.random_range(2.0..6.0);
    let streak_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let streak_offset = rng.random_range(0.3..0.7) * sz;
    let streak_width = rng.random_range(0.02..0.05) * sz;

    let mut image = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let a = soft[y * size + x] as f64;
            let d = fx * streak_angle.cos() + fy * streak_angle.sin() - streak_offset;
            let streak = 0.35 * (-(d * d) / (2.0 * streak_width * streak_width)).exp();
            for c in 0..3 {
                let bg = background(fx, fy, c);
                let seen_through = background(fx + shift, fy + shift, c);
                let glass = (1.0 - alpha) * seen_through + alpha * tint[c] + streak;
                let v = (1.0 - a) * bg + a * glass + noise.sample(rng);
                image[c * n + y * size + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    (Tensor::from_vec(&[3, size, size], image), Tensor::from_vec(&[1, size, size], hard))
}

fn inside_convex(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    let mut sign = 0.0;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn box_blur(src: &[f32], size: usize) -> Vec<f32> {
    let mut out = vec![0f32; src.len()];
    for y in 0..size {
        for x in 0..size {
            let (mut acc, mut cnt) = (0f32, 0f32);
            for yy in y.saturating_sub(1)..(y + 2).min(size) {
                for xx in x.saturating_sub(1)..(x + 2).min(size) {
                    acc += src[yy * size + xx];
                    cnt += 1.0;
                }
            }
            out[y * size + x] = acc / cnt;
        }
    }
    out
}

/// Writes `n` synthetic samples of `size × size` under `<out>/<split>/`.
pub fn synth_generate(n: usize, size: usize, seed: u64, out: &Path, split: Split) -> Result<DatasetLayout> {
    if size < 8 {
        return Err(Error::InvalidInput(format!("synthetic size {size} is too small")));
    }
    let layout = DatasetLayout::new(out, split);
    for dir in [layout.images(), layout.masks()] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let (image, mask) = synth_sample(size, &mut rng);
        let id = format!("synth_{i:05}");
        write_rgb(&layout.images().join(format!("{id}.png")), &image)?;
        write_gray(&layout.masks().join(format!("{id}.png")), mask.data(), size, size)?;
    }
    Ok(layout)
}
