//! Datasets: rendered synthetic shapes and IDX files.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Cal,
    Eval,
}

/// Images `[N, C, H, W]` with labels and a split tag per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, splits: Vec<Split>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() || splits.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels and {} split tags for images of shape {:?}",
                labels.len(),
                splits.len(),
                images.shape()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset { images, labels, splits, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Every sample not used for training.
    pub fn held_out(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] != Split::Train).collect()
    }

    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.gather(indices)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Tag half of the samples of every class `Eval` (seeded), the rest `Train`.
    pub fn assign_holdout(&mut self, seed: u64) {
        let mut r = rng::stream(seed, "dataset.holdout");
        for class in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut r);
            let train = members.len().div_ceil(2);
            for (j, &i) in members.iter().enumerate() {
                self.splits[i] = if j < train { Split::Train } else { Split::Eval };
            }
        }
    }

    /// Retag a seeded half of the held-out samples as `Cal`.
    pub fn assign_calibration(&mut self, seed: u64) {
        let held = self.held_out();
        let (cal, eval) = crate::calibration::calibration_split(held.len(), seed);
        for j in cal {
            self.splits[held[j]] = Split::Cal;
        }
        for j in eval {
            self.splits[held[j]] = Split::Eval;
        }
    }
}

/// Standardise in place to zero mean and unit variance over all values.
fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

pub const PRIMITIVES: [&str; 10] =
    ["disc", "ring", "cross", "horizontal bars", "vertical bars", "diagonal cross", "square outline", "triangle", "checkerboard", "diamond"];

/// Whether the point `(u, v)`, in units of the shape radius around its
/// centre, is inked for primitive `class`.
fn inked(class: usize, u: f64, v: f64) -> bool {
    let inside = u.abs() <= 1.0 && v.abs() <= 1.0;
    let band = |t: f64| ((t + 1.0) * 2.0).floor() as i64;
    let r = (u * u + v * v).sqrt();
    match class {
        0 => r <= 1.0,
        1 => (0.55..=1.0).contains(&r),
        2 => inside && (u.abs() <= 0.3 || v.abs() <= 0.3),
        3 => inside && band(v) % 2 == 0,
        4 => inside && band(u) % 2 == 0,
        5 => inside && ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35),
        6 => inside && u.abs().max(v.abs()) >= 0.6,
        7 => v <= 1.0 && u.abs() <= (v + 1.0) / 2.0,
        8 => inside && (band(u) + band(v)) % 2 == 0,
        9 => u.abs() + v.abs() <= 1.0,
        _ => unreachable!("class checked against the primitive set"),
    }
}

/// Rendering controls for [`generate_synthetic`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Largest placement offset, in pixels, along each axis.
    pub max_shift: usize,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, n_per_class: usize, image_size: usize) -> Self {
        SyntheticSpec { num_classes, n_per_class, image_size, channels: 1, noise: 0.3, max_shift: image_size / 8 }
    }

    /// Render the shape of `class` offset by `(dx, dy)` pixels.
    pub fn render(&self, class: usize, dx: i64, dy: i64) -> Vec<f64> {
        let s = self.image_size;
        let radius = 0.3 * s as f64;
        let (cx, cy) = (s as f64 / 2.0 + dx as f64, s as f64 / 2.0 + dy as f64);
        let mut img = vec![0.0; s * s];
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5 - cx) / radius;
                let v = (y as f64 + 0.5 - cy) / radius;
                if inked(class, u, v) {
                    img[y * s + x] = 1.0;
                }
            }
        }
        img
    }

    /// Samples are class-interleaved; the first half (rounded up) of every
    /// class is tagged `Train`, the rest `Eval`.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.num_classes > PRIMITIVES.len() {
            return Err(Error::config(
                "num_classes",
                format!("{} classes requested but only {} primitives exist", self.num_classes, PRIMITIVES.len()),
            ));
        }
        if self.num_classes == 0 || self.n_per_class == 0 || self.image_size == 0 || self.channels == 0 {
            return Err(Error::config("synthetic", "sizes must be positive"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise", format!("must be non-negative, got {}", self.noise)));
        }
        let (k, s, c) = (self.num_classes, self.image_size, self.channels);
        let n = k * self.n_per_class;
        let shift = self.max_shift as i64;
        let mut data = Vec::with_capacity(n * c * s * s);
        let mut labels = Vec::with_capacity(n);
        let mut splits = Vec::with_capacity(n);
        let train = self.n_per_class.div_ceil(2);
        for i in 0..n {
            let class = i % k;
            let mut r = rng::stream(seed, &format!("synthetic.{i}"));
            let dx = r.random_range(-shift..=shift);
            let dy = r.random_range(-shift..=shift);
            let img = self.render(class, dx, dy);
            for _ in 0..c {
                let noise = rng::standard_normal(&mut r, s * s);
                data.extend(img.iter().zip(noise).map(|(p, z)| p + self.noise * z));
            }
            labels.push(class);
            splits.push(if i / k < train { Split::Train } else { Split::Eval });
        }
        standardize(&mut data);
        Dataset::new(Tensor::new(vec![n, c, s, s], data)?, labels, splits, k)
    }
}

/// Single-channel shapes with default noise and placement jitter.
pub fn generate_synthetic(num_classes: usize, n_per_class: usize, image_size: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(num_classes, n_per_class, image_size).generate(seed)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(bytes.len() as u64, format!("file ends inside the header field at byte {offset}")))
}

fn idx_payload<'a>(bytes: &'a [u8], magic: u32, dims: &[usize]) -> Result<&'a [u8]> {
    let header = 4 + 4 * dims.len();
    let len: usize = dims.iter().product();
    bytes.get(header..header + len).ok_or_else(|| {
        Error::format(bytes.len() as u64, format!("magic {magic:#010x}: expected {len} data bytes after byte {header}"))
    })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(Error::format(0, format!("bad magic {magic:#010x}, expected {expected:#010x}")));
    }
    Ok(())
}

/// Parse an unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES)?;
    let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?].map(|d| d as usize);
    let payload = idx_payload(bytes, IDX_IMAGES, &dims)?;
    Ok((dims[0], dims[1], dims[2], payload.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS)?;
    let n = be_u32(bytes, 4)? as usize;
    Ok(idx_payload(bytes, IDX_LABELS, &[n])?.to_vec())
}

/// Pixels scaled to `[0, 1]`, then standardised over the whole file.
/// Every sample is tagged `Train`.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(4, format!("{} labels for {n} images", labels.len())));
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(4, "empty image file"));
    }
    let mut data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    standardize(&mut data);
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(2);
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, vec![Split::Train; n], classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    idx_dataset(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)
}
