//! Labeled image datasets: a synthetic Gaussian-blob generator and a
//! Tiny-ImageNet-style directory loader, with seeded splitting, batching,
//! normalization and resizing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::RESOLUTIONS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of stored images.
pub const BASE_RESOLUTION: usize = 64;
pub const DEFAULT_VAL_FRACTION: f64 = 0.15;
pub const DEFAULT_BATCH_SIZE: usize = 200;

/// Images stored at the base resolution, `[n, 3, r, r]` row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub resolution: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers `indices` into a `[b, 3, r, r]` tensor and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Invalid(format!("index {i} outside dataset of {}", self.len())));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let r = self.resolution;
        Ok((Tensor::new(vec![indices.len(), 3, r, r], data)?, labels))
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset {
            images: Vec::with_capacity(indices.len() * self.image_len()),
            labels: Vec::with_capacity(indices.len()),
            n_classes: self.n_classes,
            resolution: self.resolution,
        };
        for &i in indices {
            out.images.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// Per-channel normalization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub fn from_dataset(d: &Dataset) -> Self {
        let hw = d.resolution * d.resolution;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for img in d.images.chunks(3 * hw) {
            for c in 0..3 {
                for &v in &img[c * hw..(c + 1) * hw] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (d.len() * hw).max(1) as f64;
        let mut mean = [0.0f32; 3];
        let mut std = [1.0f32; 3];
        for c in 0..3 {
            let m = sum[c] / n;
            mean[c] = m as f32;
            let var = (sq[c] / n - m * m).max(0.0);
            std[c] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, d: &mut Dataset) {
        let hw = d.resolution * d.resolution;
        for img in d.images.chunks_mut(3 * hw) {
            for c in 0..3 {
                for v in &mut img[c * hw..(c + 1) * hw] {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}

/// Synthetic classes: one colored Gaussian blob per image whose position and
/// color identify the class, on a noisy background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    /// Images per class in the pool that is split into train and validation.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Standard deviation of the per-pixel background noise.
    pub noise: f64,
    /// Maximum blob displacement from its class centre, in pixels.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 8,
            train_per_class: 50,
            test_per_class: 25,
            seed: 7,
            noise: 0.15,
            jitter: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// `wnids.txt`, `train/<wnid>/images/*` and `val/val_annotations.txt`
    /// with `val/images/*`. The official validation images serve as the test
    /// split; the validation split is carved out of `train/`.
    TinyImagenet {
        root: PathBuf,
        /// Use only the first classes listed in `wnids.txt`.
        #[serde(default)]
        max_classes: Option<usize>,
        #[serde(default)]
        max_per_class: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Seed of the train/validation split.
    #[serde(default)]
    pub split_seed: u64,
    /// Random crops and horizontal flips on training batches.
    #[serde(default)]
    pub augment: bool,
}

fn default_val_fraction() -> f64 {
    DEFAULT_VAL_FRACTION
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            val_fraction: DEFAULT_VAL_FRACTION,
            split_seed: 0,
            augment: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

fn palette(c: usize, n: usize) -> [f32; 3] {
    // evenly spaced hues at full saturation
    let h = c as f32 / n as f32 * 6.0;
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn blob_image(class: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let r = BASE_RESOLUTION;
    let n = spec.n_classes;
    let angle = class as f32 / n as f32 * std::f32::consts::TAU;
    let centre = r as f32 / 2.0;
    let radius = r as f32 / 4.0;
    let cx = centre + radius * angle.cos() + rng.gen_range(-(spec.jitter as f32)..=spec.jitter as f32);
    let cy = centre + radius * angle.sin() + rng.gen_range(-(spec.jitter as f32)..=spec.jitter as f32);
    let sigma = r as f32 / 10.0;
    let color = palette(class, n);
    let noise = Normal::new(0.0f32, spec.noise.max(0.0) as f32).expect("finite std");
    let mut img = vec![0.0f32; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
            let a = (-d2 / (2.0 * sigma * sigma)).exp();
            for c in 0..3 {
                img[(c * r + y) * r + x] = 0.5 * (1.0 - a) + a * color[c] + noise.sample(rng);
            }
        }
    }
    img
}

/// Generates `per_class` images of every class, classes interleaved.
fn synthetic(spec: &SyntheticSpec, per_class: usize, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut d = Dataset {
        n_classes: spec.n_classes,
        resolution: BASE_RESOLUTION,
        ..Dataset::default()
    };
    for _ in 0..per_class {
        for c in 0..spec.n_classes {
            d.images.extend(blob_image(c, spec, &mut rng));
            d.labels.push(c);
        }
    }
    d
}

/// Seeded `(train, val)` partition of `0..n`; the validation part has
/// `round(n * val_fraction)` items. Both parts are returned sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Invalid(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let n_val = (n as f64 * val_fraction).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = perm[..n_val].to_vec();
    let mut train = perm[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn decode(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path)
        .map_err(|e| dataset_err(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut chw = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            chw[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    if (h, w) == (BASE_RESOLUTION, BASE_RESOLUTION) {
        return Ok(chw);
    }
    let t = Tensor::new(vec![1, 3, h, w], chw)?;
    Ok(bilinear(&t, BASE_RESOLUTION)?.into_data())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| dataset_err(dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

fn tiny_imagenet(root: &Path, max_classes: Option<usize>, max_per_class: Option<usize>) -> Result<(Dataset, Dataset)> {
    let wnids_path = root.join("wnids.txt");
    let text = fs::read_to_string(&wnids_path).map_err(|e| dataset_err(&wnids_path, e.to_string()))?;
    let mut wnids: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if let Some(m) = max_classes {
        wnids.truncate(m);
    }
    if wnids.len() < 2 {
        return Err(dataset_err(&wnids_path, "need at least two classes"));
    }
    let index: BTreeMap<&str, usize> = wnids.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();
    let n_classes = wnids.len();
    let mut train = Dataset {
        n_classes,
        resolution: BASE_RESOLUTION,
        ..Dataset::default()
    };
    for (label, wnid) in wnids.iter().enumerate() {
        let dir = root.join("train").join(wnid).join("images");
        let mut files = image_files(&dir)?;
        if let Some(m) = max_per_class {
            files.truncate(m);
        }
        for f in files {
            train.images.extend(decode(&f)?);
            train.labels.push(label);
        }
    }
    let ann_path = root.join("val").join("val_annotations.txt");
    let ann = fs::read_to_string(&ann_path).map_err(|e| dataset_err(&ann_path, e.to_string()))?;
    let mut test = Dataset {
        n_classes,
        resolution: BASE_RESOLUTION,
        ..Dataset::default()
    };
    for (lineno, line) in ann.lines().enumerate() {
        let mut parts = line.split('\t');
        let (Some(file), Some(wnid)) = (parts.next(), parts.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(dataset_err(&ann_path, format!("line {}: expected <file>\\t<wnid>", lineno + 1)));
        };
        let Some(&label) = index.get(wnid) else {
            continue;
        };
        let f = root.join("val").join("images").join(file);
        test.images.extend(decode(&f)?);
        test.labels.push(label);
    }
    Ok((train, test))
}

/// Loads, splits and normalizes a dataset.
pub fn load_dataset(cfg: &DataConfig) -> Result<Splits> {
    let (pool, mut test) = match &cfg.source {
        DataSource::Synthetic(spec) => {
            if spec.n_classes < 2 || spec.train_per_class == 0 {
                return Err(Error::Invalid("synthetic data needs >= 2 classes and >= 1 image per class".into()));
            }
            (synthetic(spec, spec.train_per_class, 1), synthetic(spec, spec.test_per_class, 2))
        }
        DataSource::TinyImagenet {
            root,
            max_classes,
            max_per_class,
        } => tiny_imagenet(root, *max_classes, *max_per_class)?,
    };
    let (tr, va) = split_indices(pool.len(), cfg.val_fraction, cfg.split_seed)?;
    let mut train = pool.subset(&tr);
    let mut val = pool.subset(&va);
    let normalization = Normalization::from_dataset(&train);
    normalization.apply(&mut train);
    normalization.apply(&mut val);
    normalization.apply(&mut test);
    Ok(Splits {
        train,
        val,
        test,
        normalization,
    })
}

/// Seeded shuffle of `0..n` into batches; the final partial batch is kept.
/// Each epoch draws its own permutation.
pub fn make_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    perm.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Bilinear resize with half-pixel centres and edge clamping; identity
/// when the size does not change.
fn bilinear(batch: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = batch.dims4()?;
    if (h, w) == (r, r) {
        return Ok(batch.clone());
    }
    let axis = |len_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = len_in as f32 / r as f32;
        (0..r)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(len_in - 1);
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(h), axis(w));
    let src = batch.data();
    let mut out = vec![0.0f32; n * c * r * r];
    for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(r * r)) {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                dst[oy * r + ox] = lerp(top, bottom, ty);
            }
        }
    }
    Tensor::new(vec![n, c, r, r], out)
}

/// `a + (b - a) t`: exact when `a == b`, so constant images stay constant.
#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Resizes a batch to one of the supported resolutions.
pub fn resize_batch(batch: &Tensor, r: usize) -> Result<Tensor> {
    if !RESOLUTIONS.contains(&r) {
        return Err(Error::Invalid(format!("resolution {r} not in {RESOLUTIONS:?}")));
    }
    bilinear(batch, r)
}

/// Random 4-pixel-padded crops and horizontal flips, in place.
pub fn augment_batch(batch: &mut Tensor, rng: &mut ChaCha8Rng) -> Result<()> {
    const PAD: i64 = 4;
    let (n, c, h, w) = batch.dims4()?;
    let data = batch.data_mut();
    for img in data.chunks_mut(c * h * w) {
        let dy = rng.gen_range(-PAD..=PAD);
        let dx = rng.gen_range(-PAD..=PAD);
        let flip = rng.gen_bool(0.5);
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                    let sy = y as i64 + dy;
                    let inside = (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx);
                    img[(ch * h + y) * w + x] = if inside {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
    let _ = n;
    Ok(())
}
