//! Datasets: IDX (MNIST-format) files and the synthetic benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const VAL_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const VAL_LABELS: &str = "t10k-labels-idx1-ubyte";

/// 8-bit images `[count, channels, height, width]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Per-channel normalisation on the `[0, 1]` scale.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<u8>, channels: usize, height: usize, width: usize) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::CountMismatch {
                images: pixels.len().checked_div(per).unwrap_or(0),
                labels: labels.len(),
            });
        }
        let mut d = Dataset {
            pixels,
            labels,
            channels,
            height,
            width,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        };
        d.fit_normalisation();
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m as usize + 1)
    }

    /// Recompute per-channel mean/std from this dataset's pixels.
    pub fn fit_normalisation(&mut self) {
        let plane = self.height * self.width;
        for c in 0..self.channels {
            let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
            for img in self.pixels.chunks(self.image_len()) {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = f64::from(p) / 255.0;
                    s += v;
                    s2 += v * v;
                    n += 1;
                }
            }
            let mean = if n > 0 { s / n as f64 } else { 0.0 };
            let var = if n > 0 { s2 / n as f64 - mean * mean } else { 1.0 };
            self.mean[c] = mean;
            self.std[c] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
    }

    /// Use another split's normalisation constants.
    pub fn with_normalisation_of(mut self, other: &Dataset) -> Self {
        self.mean = other.mean.clone();
        self.std = other.std.clone();
        self
    }

    /// Normalised float batch `[B, channels, H, W]` and labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            for (k, &p) in self.image(i).iter().enumerate() {
                let c = k / plane;
                data.push((f64::from(p) / 255.0 - self.mean[c]) / self.std[c]);
            }
        }
        let t = Tensor::new([indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape matches data");
        (t, indices.iter().map(|&i| self.labels[i] as usize).collect())
    }

    /// Zero-pad every image to `size × size`, centred.
    pub fn pad_to(&self, size: usize) -> Result<Dataset> {
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        if self.height > size || self.width > size {
            return Err(Error::Config(format!(
                "images are {}×{}, larger than the model's {size}",
                self.height, self.width
            )));
        }
        let (oy, ox) = ((size - self.height) / 2, (size - self.width) / 2);
        let mut pixels = vec![0u8; self.len() * self.channels * size * size];
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..self.channels {
                for y in 0..self.height {
                    let src = &img[(c * self.height + y) * self.width..][..self.width];
                    let dst = ((i * self.channels + c) * size + oy + y) * size + ox;
                    pixels[dst..dst + self.width].copy_from_slice(src);
                }
            }
        }
        Ok(Dataset {
            pixels,
            labels: self.labels.clone(),
            channels: self.channels,
            height: size,
            width: size,
            mean: self.mean.clone(),
            std: self.std.clone(),
        })
    }

    /// Subset in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Dataset {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..self.clone()
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], path: &Path, expected: u32) -> Result<()> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// `(count, rows, cols, pixels)` from an IDX3 image file.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, path, IMAGES_MAGIC)?;
    let count = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((count, rows, cols, bytes[16..expected].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, path, LABELS_MAGIC)?;
    let count = read_u32(&bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Load a single-channel IDX image/label pair.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (count, rows, cols, pixels) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    Dataset::new(pixels, labels, 1, rows, cols)
}

/// Write a single-channel dataset as an IDX image/label pair.
pub fn write_idx_dataset(d: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if d.channels != 1 {
        return Err(Error::Config("IDX output supports single-channel images only".into()));
    }
    let mut img = Vec::with_capacity(16 + d.pixels.len());
    for v in [IMAGES_MAGIC, d.len() as u32, d.height as u32, d.width as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&d.pixels);
    fs::write(images_path, img)?;
    let mut lab = Vec::with_capacity(8 + d.len());
    for v in [LABELS_MAGIC, d.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&d.labels);
    fs::write(labels_path, lab)?;
    Ok(())
}

/// Train and validation splits from a directory of MNIST-named IDX files;
/// validation uses the training normalisation.
pub fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p = |f: &str| -> PathBuf { dir.join(f) };
    let train = load_idx_dataset(&p(TRAIN_IMAGES), &p(TRAIN_LABELS))?;
    let val = load_idx_dataset(&p(VAL_IMAGES), &p(VAL_LABELS))?.with_normalisation_of(&train);
    Ok((train, val))
}

pub fn write_idx_dir(dir: &Path, train: &Dataset, val: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_idx_dataset(train, &dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    write_idx_dataset(val, &dir.join(VAL_IMAGES), &dir.join(VAL_LABELS))
}

/// Knobs of the synthetic benchmark.
///
/// Each class owns a fixed binary glyph of `glyph_tokens × glyph_tokens`
/// patches and a home cell on the token grid. An image shows its class glyph
/// near the home cell (jittered by up to `jitter` tokens) among `distractors`
/// random clutter patterns of the same size and ink density and `decoys`
/// glyphs of other classes placed away from their own homes, over Gaussian
/// pixel noise. Only the few tokens under the glyph sitting at its own home
/// are informative.
///
/// With `scatter > 0` homes are ignored: the class glyph is drawn at
/// `scatter` random cells instead, so the evidence is spread over several
/// noisy copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub glyph_tokens: usize,
    pub jitter: usize,
    pub distractors: usize,
    pub decoys: usize,
    pub scatter: usize,
    pub noise_std: f64,
    pub background: f64,
    pub ink: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            image_size: 32,
            patch_size: 4,
            glyph_tokens: 1,
            jitter: 0,
            distractors: 0,
            decoys: 0,
            scatter: 6,
            noise_std: 60.0,
            background: 80.0,
            ink: 170.0,
        }
    }
}

/// Glyphs are fixed across seeds so that every split shares one task.
const GLYPH_SEED: u64 = 0x5eed_9171;

impl SynthSpec {
    fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) || self.glyph_tokens == 0 {
            return Err(Error::Config("synthetic image size must be a multiple of the patch size".into()));
        }
        let free = self.grid().saturating_sub(self.glyph_tokens) + 1;
        if self.classes == 0 || self.classes > 255 || free * free < self.classes {
            return Err(Error::Config(format!(
                "{} classes do not fit on a {}-token grid",
                self.classes,
                self.grid()
            )));
        }
        Ok(())
    }

    /// Binary glyph per class, `glyph_px × glyph_px`, each distinct and
    /// roughly half inked.
    pub fn glyphs(&self) -> Vec<Vec<bool>> {
        let px = self.glyph_tokens * self.patch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(GLYPH_SEED);
        let mut out: Vec<Vec<bool>> = Vec::new();
        while out.len() < self.classes {
            let g: Vec<bool> = (0..px * px).map(|_| rng.gen_bool(0.5)).collect();
            let distinct = out
                .iter()
                .all(|o| o.iter().zip(&g).filter(|(a, b)| a != b).count() >= px * px / 4);
            if distinct {
                out.push(g);
            }
        }
        out
    }

    /// Home cell (top-left token) of every class, spread over the grid.
    pub fn homes(&self) -> Vec<(usize, usize)> {
        let free = self.grid() - self.glyph_tokens + 1;
        let cells = free * free;
        (0..self.classes)
            .map(|c| {
                let k = c * cells / self.classes + cells / (2 * self.classes);
                (k / free, k % free)
            })
            .collect()
    }

    /// Pixel rectangle `(y, x, side)` of the class glyph in a generated image.
    pub fn glyph_origin(&self, home: (usize, usize), offset: (isize, isize)) -> (usize, usize) {
        let free = (self.grid() - self.glyph_tokens) as isize;
        let y = (home.0 as isize + offset.0).clamp(0, free) as usize;
        let x = (home.1 as isize + offset.1).clamp(0, free) as usize;
        (y, x)
    }
}

/// One synthetic image plus where its class glyph was drawn (token units).
pub struct SynthSample {
    pub pixels: Vec<u8>,
    pub label: u8,
    pub glyph_at: (usize, usize),
}

fn draw_glyph(canvas: &mut [f64], size: usize, glyph: &[bool], px: usize, at: (usize, usize), ink: f64) {
    for y in 0..px {
        for x in 0..px {
            if glyph[y * px + x] {
                canvas[(at.0 + y) * size + at.1 + x] = ink;
            }
        }
    }
}

pub fn synth_sample<R: Rng + ?Sized>(spec: &SynthSpec, glyphs: &[Vec<bool>], homes: &[(usize, usize)], label: usize, rng: &mut R) -> SynthSample {
    let size = spec.image_size;
    let p = spec.patch_size;
    let px = spec.glyph_tokens * p;
    let j = spec.jitter as isize;
    let mut canvas = vec![spec.background; size * size];
    let free = spec.grid() - spec.glyph_tokens;
    let overlaps = |a: (usize, usize), b: (usize, usize)| {
        a.0.abs_diff(b.0) < spec.glyph_tokens && a.1.abs_diff(b.1) < spec.glyph_tokens
    };
    let offset = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
    let mut at = spec.glyph_origin(homes[label], offset);
    let mut placed = Vec::new();
    if spec.scatter > 0 {
        for k in 0..spec.scatter {
            for _attempt in 0..50 {
                let cell = (rng.gen_range(0..=free), rng.gen_range(0..=free));
                if placed.iter().any(|&q| overlaps(q, cell)) {
                    continue;
                }
                if k == 0 {
                    at = cell;
                }
                placed.push(cell);
                break;
            }
        }
    } else {
        placed.push(at);
    }
    let copies = placed.clone();
    for _ in 0..spec.decoys {
        for _attempt in 0..50 {
            let other = rng.gen_range(0..spec.classes);
            let cell = (rng.gen_range(0..=free), rng.gen_range(0..=free));
            let home = homes[other];
            let near_home = cell.0.abs_diff(home.0) <= spec.jitter && cell.1.abs_diff(home.1) <= spec.jitter;
            if other == label || near_home || placed.iter().any(|&q| overlaps(q, cell)) {
                continue;
            }
            draw_glyph(&mut canvas, size, &glyphs[other], px, (cell.0 * p, cell.1 * p), spec.ink);
            placed.push(cell);
            break;
        }
    }
    for _ in 0..spec.distractors {
        for _attempt in 0..50 {
            let cell = (rng.gen_range(0..=free), rng.gen_range(0..=free));
            if placed.iter().any(|&q| overlaps(q, cell)) {
                continue;
            }
            let clutter: Vec<bool> = (0..px * px).map(|_| rng.gen_bool(0.5)).collect();
            draw_glyph(&mut canvas, size, &clutter, px, (cell.0 * p, cell.1 * p), spec.ink);
            placed.push(cell);
            break;
        }
    }
    for &c in &copies {
        draw_glyph(&mut canvas, size, &glyphs[label], px, (c.0 * p, c.1 * p), spec.ink);
    }
    let pixels = canvas
        .iter()
        .map(|&v| {
            let z: f64 = rng.sample(StandardNormal);
            (v + spec.noise_std * z).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    SynthSample {
        pixels,
        label: label as u8,
        glyph_at: at,
    }
}

/// `per_class` images of every class, shuffled, deterministic in `seed`.
pub fn synth_dataset_with(spec: &SynthSpec, per_class: usize, seed: u64) -> Result<(Dataset, Vec<(usize, usize)>)> {
    spec.validate()?;
    let glyphs = spec.glyphs();
    let homes = spec.homes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..spec.classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    order.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(order.len() * spec.image_size * spec.image_size);
    let mut labels = Vec::with_capacity(order.len());
    let mut where_ = Vec::with_capacity(order.len());
    for &c in &order {
        let s = synth_sample(spec, &glyphs, &homes, c, &mut rng);
        pixels.extend_from_slice(&s.pixels);
        labels.push(s.label);
        where_.push(s.glyph_at);
    }
    Ok((Dataset::new(pixels, labels, 1, spec.image_size, spec.image_size)?, where_))
}

/// The default synthetic benchmark.
pub fn synth_dataset(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    let spec = SynthSpec {
        classes,
        ..SynthSpec::default()
    };
    Ok(synth_dataset_with(&spec, per_class, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> Dataset {
        let pixels: Vec<u8> = (0..10 * 5 * 4).map(|i| (i * 13 % 256) as u8).collect();
        Dataset::new(pixels, (0..10).map(|i| (i % 3) as u8).collect(), 1, 5, 4).unwrap()
    }

    fn write_raw(path: &Path, words: &[u32], payload: &[u8]) {
        let mut b: Vec<u8> = words.iter().flat_map(|w| w.to_be_bytes()).collect();
        b.extend_from_slice(payload);
        fs::write(path, b).unwrap();
    }

    #[test]
    fn reads_well_formed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        let pixels: Vec<u8> = (0..10 * 3 * 2).map(|i| i as u8).collect();
        write_raw(&ip, &[IMAGES_MAGIC, 10, 3, 2], &pixels);
        write_raw(&lp, &[LABELS_MAGIC, 10], &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let d = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!((d.len(), d.channels, d.height, d.width), (10, 1, 3, 2));
        assert_eq!(d.image(4), &[24, 25, 26, 27, 28, 29]);
        assert_eq!(d.num_classes(), 10);
    }

    #[test]
    fn distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_raw(&ip, &[IMAGES_MAGIC, 3, 2, 2], &[0; 12]);
        write_raw(&lp, &[LABELS_MAGIC, 4], &[0; 4]);
        match load_idx_dataset(&ip, &lp) {
            Err(e @ Error::CountMismatch { images: 3, labels: 4 }) => {
                let msg = e.to_string();
                assert!(msg.contains('3') && msg.contains('4'), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        write_raw(&ip, &[IMAGES_MAGIC, 3, 2, 2], &[0; 11]);
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Truncated { expected: 28, found: 27, .. })));
        write_raw(&ip, &[LABELS_MAGIC, 3, 2, 2], &[0; 12]);
        assert!(matches!(
            load_idx_dataset(&ip, &lp),
            Err(Error::BadMagic { found: LABELS_MAGIC, expected: IMAGES_MAGIC, .. })
        ));
        fs::write(&ip, [0u8, 0]).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Truncated { .. })));
    }

    #[test]
    fn idx_round_trip() {
        let (d, _) = synth_dataset_with(&SynthSpec::default(), 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_idx_dir(dir.path(), &d, &d).unwrap();
        let (back, val) = load_idx_dir(dir.path()).unwrap();
        assert_eq!(back.pixels, d.pixels);
        assert_eq!(back.labels, d.labels);
        assert_eq!(val.mean, back.mean);
    }

    #[test]
    fn normalisation_and_batch() {
        let d = small_dataset();
        let (x, y) = d.batch(&[0, 3]);
        assert_eq!(x.shape(), &[2, 1, 5, 4]);
        assert_eq!(y, vec![0, 0]);
        let all: Vec<usize> = (0..d.len()).collect();
        let (x, _) = d.batch(&all);
        let n = x.numel() as f64;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn padding_centres() {
        let d = small_dataset();
        let p = d.pad_to(8).unwrap();
        assert_eq!((p.height, p.width), (8, 8));
        let img = p.image(2);
        assert_eq!(&img[8 + 2..8 + 6], &d.image(2)[..4]);
        assert_eq!(img[0], 0);
        assert!(d.pad_to(4).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(10, 5, 42).unwrap();
        let b = synth_dataset(10, 5, 42).unwrap();
        let c = synth_dataset(10, 5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.pixels, c.pixels);
        assert_eq!(a.len(), 50);
        for k in 0..10u8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 5);
        }
    }

    /// Pixels of the glyph drawn at `at` (token units), scaled to `[0, 1]`.
    fn glyph_patch(d: &Dataset, i: usize, at: (usize, usize), spec: &SynthSpec) -> Vec<f64> {
        let px = spec.glyph_tokens * spec.patch_size;
        let (y0, x0) = (at.0 * spec.patch_size, at.1 * spec.patch_size);
        let img = d.image(i);
        let mut v = Vec::with_capacity(px * px + 1);
        for y in 0..px {
            for x in 0..px {
                v.push(f64::from(img[(y0 + y) * d.width + x0 + x]) / 255.0 - 0.5);
            }
        }
        v.push(1.0);
        v
    }

    /// Softmax regression by full-batch gradient descent; returns the
    /// weights `[classes][features]`.
    fn fit_probe(x: &[Vec<f64>], y: &[usize], classes: usize) -> Vec<Vec<f64>> {
        let f = x[0].len();
        let mut w = vec![vec![0.0; f]; classes];
        for _ in 0..300 {
            let mut grad = vec![vec![0.0; f]; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let z: Vec<f64> = w.iter().map(|wc| wc.iter().zip(xi).map(|(a, b)| a * b).sum()).collect();
                let m = z.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..classes {
                    let d = e[c] / s - f64::from(u8::from(c == yi));
                    for (g, xv) in grad[c].iter_mut().zip(xi) {
                        *g += d * xv;
                    }
                }
            }
            for (wc, gc) in w.iter_mut().zip(&grad) {
                for (a, g) in wc.iter_mut().zip(gc) {
                    *a -= 0.5 * g / x.len() as f64;
                }
            }
        }
        w
    }

    fn probe_accuracy(w: &[Vec<f64>], x: &[Vec<f64>], y: &[usize]) -> f64 {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(xi, &yi)| {
                let z: Vec<f64> = w.iter().map(|wc| wc.iter().zip(xi.iter()).map(|(a, b)| a * b).sum()).collect();
                crate::harness::train::argmax(&z) == yi
            })
            .count();
        hits as f64 / x.len() as f64
    }

    #[test]
    fn informative_patch_carries_the_label() {
        let spec = SynthSpec {
            noise_std: 30.0,
            ..SynthSpec::default()
        };
        let (d, at) = synth_dataset_with(&spec, 40, 5).unwrap();
        let x: Vec<Vec<f64>> = (0..d.len()).map(|i| glyph_patch(&d, i, at[i], &spec)).collect();
        let y: Vec<usize> = d.labels.iter().map(|&l| l as usize).collect();
        let w = fit_probe(&x, &y, spec.classes);
        let acc = probe_accuracy(&w, &x, &y);
        assert!(acc > 0.9, "probe train accuracy {acc}");
    }

    #[test]
    fn shuffled_patches_carry_nothing() {
        let spec = SynthSpec::default();
        let (d, at) = synth_dataset_with(&spec, 40, 5).unwrap();
        let mut perm: Vec<usize> = (0..d.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        let x: Vec<Vec<f64>> = perm.iter().map(|&j| glyph_patch(&d, j, at[j], &spec)).collect();
        let y: Vec<usize> = d.labels.iter().map(|&l| l as usize).collect();
        let half = d.len() / 2;
        let w = fit_probe(&x[..half], &y[..half], spec.classes);
        let acc = probe_accuracy(&w, &x[half..], &y[half..]);
        assert!(acc < 0.2, "held-out accuracy after shuffling {acc}");
    }

    #[test]
    fn scatter_draws_every_copy() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let glyphs = spec.glyphs();
        let (d, _) = synth_dataset_with(&spec, 4, 3).unwrap();
        let p = spec.patch_size;
        for i in 0..d.len() {
            let img = d.image(i);
            let label = d.labels[i] as usize;
            let matches = (0..spec.grid() * spec.grid())
                .filter(|&t| {
                    let (ty, tx) = (t / spec.grid() * p, t % spec.grid() * p);
                    (0..p * p).all(|k| {
                        let v = img[(ty + k / p) * d.width + tx + k % p];
                        (v == spec.ink as u8) == glyphs[label][k]
                    })
                })
                .count();
            assert_eq!(matches, spec.scatter, "image {i}");
        }
    }

    #[test]
    fn homes_are_distinct_and_in_range() {
        let spec = SynthSpec::default();
        let homes = spec.homes();
        let free = spec.image_size / spec.patch_size - spec.glyph_tokens;
        for (i, a) in homes.iter().enumerate() {
            assert!(a.0 <= free && a.1 <= free);
            assert!(homes[i + 1..].iter().all(|b| b != a));
        }
    }
}
