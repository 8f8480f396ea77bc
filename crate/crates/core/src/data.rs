//! Dataset ingestion (IDX files, synthetic generator), stratified
//! splitting, augmentation (cutout, random erasing) and deterministic
//! batch streams.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_rng, normal};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set with pixel values in [0,1] and per-channel
/// normalization statistics (computed on the training split only).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub n_classes: usize,
    images: Vec<f64>,
    labels: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        (c, h, w): (usize, usize, usize),
        n_classes: usize,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if images.len() != n * c * h * w {
            return Err(Error::Format(format!(
                "{} pixels for {} images of {}x{}x{}",
                images.len(),
                n,
                c,
                h,
                w
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!("label {bad} out of range for {n_classes} classes")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite pixel value".into()));
        }
        Ok(Dataset {
            name: name.into(),
            n,
            c,
            h,
            w,
            n_classes,
            images,
            labels,
            mean: vec![0.0; c],
            std: vec![1.0; c],
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let sz = self.c * self.h * self.w;
        &self.images[i * sz..(i + 1) * sz]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-channel mean/std over this split's pixels.
    pub fn compute_stats(&mut self) {
        let area = self.h * self.w;
        let count = (self.n * area) as f64;
        let mut mean = vec![0.0; self.c];
        let mut sq = vec![0.0; self.c];
        for i in 0..self.n {
            let img = &self.images[i * self.c * area..(i + 1) * self.c * area];
            for ch in 0..self.c {
                for v in &img[ch * area..(ch + 1) * area] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        for ch in 0..self.c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            self.std[ch] = var.sqrt().max(1e-8);
        }
        self.mean = mean;
    }

    fn subset(&self, idxs: &[usize], name: &str) -> Dataset {
        let sz = self.c * self.h * self.w;
        let mut images = Vec::with_capacity(idxs.len() * sz);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: name.to_string(),
            n: idxs.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            n_classes: self.n_classes,
            images,
            labels,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

// ── IDX files ────────────────────────────────────────────────────

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Parse the big-endian IDX pair (images magic 0x00000803 with dims
/// n,H,W as u8 pixels; labels magic 0x00000801). Pixels scale by 1/255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path.as_ref())?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels)?;

    let mut lr = BufReader::new(File::open(labels_path.as_ref())?);
    let lmagic = read_u32_be(&mut lr)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(Error::Format(format!("count mismatch: {n} images but {ln} labels")));
    }
    let mut raw_labels = vec![0u8; ln];
    lr.read_exact(&mut raw_labels)?;

    let images: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new("idx", (1, h, w), n_classes, images, labels)
}

/// Write a single-channel dataset in the same IDX encoding.
pub fn save_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if ds.c != 1 {
        return Err(Error::contract("IDX encoding stores single-channel images"));
    }
    let mut iw = BufWriter::new(File::create(images_path.as_ref())?);
    iw.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    iw.write_all(&(ds.n as u32).to_be_bytes())?;
    iw.write_all(&(ds.h as u32).to_be_bytes())?;
    iw.write_all(&(ds.w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = ds.images.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    iw.write_all(&bytes)?;
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path.as_ref())?);
    lw.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lw.write_all(&(ds.n as u32).to_be_bytes())?;
    let lbytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    lw.write_all(&lbytes)?;
    lw.flush()?;
    Ok(())
}

// ── synthetic generator ──────────────────────────────────────────

/// Class-conditional images: each class has a characteristic global
/// grating (frequency + orientation) and a Gaussian blob at a
/// class-specific position; per-sample phase and jitter plus mild noise.
/// Deterministic in the seed and linearly separable by construction.
pub fn synthetic_dataset(seed: u64, n: usize, n_classes: usize, size: usize) -> Result<Dataset> {
    if n_classes == 0 || n == 0 || size < 4 {
        return Err(Error::contract("synthetic dataset needs n > 0, classes > 0, size >= 4"));
    }
    if n % n_classes != 0 {
        return Err(Error::contract(format!("n = {n} not divisible by {n_classes} classes")));
    }
    let per_class = n / n_classes;
    let mut rng = derive_rng(seed, "synthetic", 0);
    let mut images = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    let s = size as f64;
    let sigma = s / 6.0;
    for class in 0..n_classes {
        let freq = 1.5 + class as f64;
        let theta = std::f64::consts::PI * class as f64 / n_classes as f64
            + std::f64::consts::FRAC_PI_8;
        let blob_angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
        let bx = s / 2.0 + (s / 4.0) * blob_angle.cos();
        let by = s / 2.0 + (s / 4.0) * blob_angle.sin();
        for _ in 0..per_class {
            let phase: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let jx: f64 = rng.gen_range(-1.0..1.0);
            let jy: f64 = rng.gen_range(-1.0..1.0);
            for y in 0..size {
                for x in 0..size {
                    let proj = (x as f64 * theta.cos() + y as f64 * theta.sin()) / s;
                    let grating = (2.0 * std::f64::consts::PI * freq * proj + phase).sin();
                    let dx = x as f64 - (bx + jx);
                    let dy = y as f64 - (by + jy);
                    let blob = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                    let v = 0.45 + 0.2 * grating + 0.35 * blob + 0.03 * normal(&mut rng);
                    images.push(v.clamp(0.0, 1.0));
                }
            }
            labels.push(class);
        }
    }
    let mut ds = Dataset::new("synthetic", (1, size, size), n_classes, images, labels)?;
    ds.compute_stats();
    Ok(ds)
}

// ── augmentation ─────────────────────────────────────────────────

/// Zero one square of side `length` centered uniformly over the image;
/// parts falling outside the borders are clipped.
pub fn cutout(image: &mut [f64], (c, h, w): (usize, usize, usize), length: usize, rng: &mut ChaCha8Rng) {
    debug_assert!(length > 0);
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let half_lo = length / 2;
    let half_hi = length - half_lo;
    let y0 = cy.saturating_sub(half_lo);
    let y1 = (cy + half_hi).min(h);
    let x0 = cx.saturating_sub(half_lo);
    let x1 = (cx + half_hi).min(w);
    for ch in 0..c {
        for y in y0..y1 {
            let base = (ch * h + y) * w;
            image[base + x0..base + x1].fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErasingConfig {
    pub p: f64,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for ErasingConfig {
    fn default() -> Self {
        ErasingConfig { p: 0.5, area: (0.02, 0.4), aspect: (0.3, 3.33) }
    }
}

/// With probability p, fill one rectangle (sampled area fraction and
/// aspect ratio, up to 100 placement attempts) with uniform noise in
/// [0,1]. The rectangle always lies fully inside the image.
pub fn random_erasing(
    image: &mut [f64],
    (c, h, w): (usize, usize, usize),
    cfg: &ErasingConfig,
    rng: &mut ChaCha8Rng,
) {
    if rng.gen::<f64>() >= cfg.p {
        return;
    }
    for _ in 0..100 {
        let target = rng.gen_range(cfg.area.0..=cfg.area.1) * (h * w) as f64;
        let aspect = rng.gen_range(cfg.aspect.0..=cfg.aspect.1);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.gen_range(0..=h - eh);
        let x0 = rng.gen_range(0..=w - ew);
        for ch in 0..c {
            for y in y0..y0 + eh {
                let base = (ch * h + y) * w;
                for v in &mut image[base + x0..base + x0 + ew] {
                    *v = rng.gen::<f64>();
                }
            }
        }
        return;
    }
}

// ── splitting ────────────────────────────────────────────────────

/// Label-stratified split into (train, val): disjoint, exhaustive,
/// deterministic in the seed. Per-class validation counts follow the
/// largest-remainder rule, so they are proportional within ±1.
pub fn split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction == 0.0 {
        return Err(Error::contract(format!("val_fraction must lie in (0,1), got {val_fraction}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for i in 0..ds.n {
        by_class[ds.label(i)].push(i);
    }
    for (class, idxs) in by_class.iter().enumerate() {
        if idxs.len() < 2 {
            return Err(Error::Validation(format!(
                "stratification error: class {class} has {} samples",
                idxs.len()
            )));
        }
    }
    let target_val = (val_fraction * ds.n as f64).round() as usize;
    let mut quotas: Vec<(usize, f64)> = by_class
        .iter()
        .map(|idxs| {
            let exact = val_fraction * idxs.len() as f64;
            (exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|q| q.0).sum();
    // hand out remaining slots by largest fractional remainder
    let mut order: Vec<usize> = (0..ds.n_classes).collect();
    order.sort_by(|&a, &b| quotas[b].1.partial_cmp(&quotas[a].1).expect("finite"));
    let mut oi = 0;
    while assigned < target_val && oi < order.len() {
        let class = order[oi];
        if quotas[class].0 < by_class[class].len() - 1 {
            quotas[class].0 += 1;
            assigned += 1;
        }
        oi += 1;
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (class, idxs) in by_class.iter().enumerate() {
        let mut shuffled = idxs.clone();
        shuffled.shuffle(&mut derive_rng(seed, "split", class as u64));
        let take = quotas[class].0;
        val_idx.extend_from_slice(&shuffled[..take]);
        train_idx.extend_from_slice(&shuffled[take..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let mut train = ds.subset(&train_idx, &format!("{}-train", ds.name));
    train.compute_stats();
    let mut val = ds.subset(&val_idx, &format!("{}-val", ds.name));
    // normalization statistics come from the training split only
    val.mean = train.mean.clone();
    val.std = train.std.clone();
    Ok((train, val))
}

// ── batching ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Augment {
    pub cutout: Option<usize>,
    pub erasing: Option<ErasingConfig>,
}

/// Materialize one epoch of batches: full shuffle with a per-epoch seed
/// derived from (seed, stream tag, epoch), optional augmentation in
/// pixel space, then per-channel normalization.
pub fn epoch_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    tag: &str,
    epoch: u64,
    augment: Option<&Augment>,
    drop_last: bool,
) -> Vec<Batch> {
    assert!(batch_size > 0);
    let mut order: Vec<usize> = (0..ds.n).collect();
    order.shuffle(&mut derive_rng(seed, tag, epoch));
    let mut aug_rng = derive_rng(seed, &format!("{tag}-aug"), epoch);
    let img_sz = ds.c * ds.h * ds.w;
    let mut out = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let end = (start + batch_size).min(order.len());
        if drop_last && end - start < batch_size {
            break;
        }
        let idxs = &order[start..end];
        let mut data = Vec::with_capacity(idxs.len() * img_sz);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            let mut img = ds.image(i).to_vec();
            if let Some(aug) = augment {
                if let Some(len) = aug.cutout {
                    cutout(&mut img, (ds.c, ds.h, ds.w), len, &mut aug_rng);
                }
                if let Some(cfg) = &aug.erasing {
                    random_erasing(&mut img, (ds.c, ds.h, ds.w), cfg, &mut aug_rng);
                }
            }
            let area = ds.h * ds.w;
            for ch in 0..ds.c {
                for v in &mut img[ch * area..(ch + 1) * area] {
                    *v = normalize(*v, ds.mean[ch], ds.std[ch]);
                }
            }
            data.extend_from_slice(&img);
            labels.push(ds.label(i));
        }
        out.push(Batch {
            images: Tensor::new(vec![idxs.len(), ds.c, ds.h, ds.w], data).expect("sized"),
            labels,
        });
        start = end;
    }
    out
}

pub fn normalize(v: f64, mean: f64, std: f64) -> f64 {
    (v - mean) / std
}

pub fn denormalize(v: f64, mean: f64, std: f64) -> f64 {
    v * std + mean
}
