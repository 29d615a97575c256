//! Image samples, the CIFAR binary record codec, the synthetic hue/shape
//! dataset, and train-time augmentation.

use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Real, Result, Tensor};

pub const CHANNELS: usize = 3;
pub const SIDE: usize = 32;
pub const PIXELS: usize = CHANNELS * SIDE * SIDE;

/// An 8-bit image in channel-major order (R plane, G plane, B plane).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSample {
    pub pixels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub coarse_label: Option<usize>,
}

impl ImageSample {
    /// Pixels scaled to `[0, 1]`, shape `[3,H,W]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let scale = T::one() / T::from_f64_lossy(255.0);
        Tensor::new(
            &[CHANNELS, self.height, self.width],
            self.pixels.iter().map(|&p| T::from_u8(p).unwrap() * scale).collect(),
        )
        .expect("sample pixel count")
    }

    fn px(&self, c: usize, y: usize, x: usize) -> u8 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + PIXELS,
            CifarVariant::Cifar100 => 2 + PIXELS,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Decodes a whole CIFAR binary file. Nothing is returned unless every record is intact.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<Vec<ImageSample>> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % rec,
            reason: format!(
                "trailing {} bytes do not form a {rec}-byte record",
                bytes.len() % rec
            ),
        });
    }
    let n_classes = variant.n_classes();
    bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, r)| {
            let (label, coarse, px) = match variant {
                CifarVariant::Cifar10 => (r[0] as usize, None, &r[1..]),
                CifarVariant::Cifar100 => (r[1] as usize, Some(r[0] as usize), &r[2..]),
            };
            if label >= n_classes {
                return Err(Error::Format {
                    offset: i * rec,
                    reason: format!("label {label} out of range for {n_classes} classes"),
                });
            }
            Ok(ImageSample {
                pixels: px.to_vec(),
                height: SIDE,
                width: SIDE,
                label,
                coarse_label: coarse,
            })
        })
        .collect()
}

pub fn encode_cifar(samples: &[ImageSample], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * variant.record_len());
    for (i, s) in samples.iter().enumerate() {
        if s.pixels.len() != PIXELS || s.label > 255 {
            return Err(Error::Contract(format!("sample {i} cannot be stored as a CIFAR record")));
        }
        match variant {
            CifarVariant::Cifar10 => out.push(s.label as u8),
            CifarVariant::Cifar100 => {
                out.push(s.coarse_label.unwrap_or(0).min(255) as u8);
                out.push(s.label as u8);
            }
        }
        out.extend_from_slice(&s.pixels);
    }
    Ok(out)
}

/// Fine class layout of the synthetic set: `label = 2·hue + shape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
}

pub const SYNTHETIC_CLASSES: usize = 4;

pub fn synthetic_class(label: usize) -> (usize, Shape) {
    let shape = if label.is_multiple_of(2) { Shape::Square } else { Shape::Disk };
    (label / 2, shape)
}

/// Four classes, {red, green} × {square, disk}, on a noisy gray background.
/// Labels cycle round-robin; the coarse label is the hue family.
pub fn gen_synthetic(n_samples: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n_samples < 8 {
        return Err(Error::Config(format!("synthetic set needs >= 8 samples, got {n_samples}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_samples)
        .map(|i| synthetic_image(i % SYNTHETIC_CLASSES, &mut rng))
        .collect())
}

fn synthetic_image(label: usize, rng: &mut ChaCha8Rng) -> ImageSample {
    let (hue, shape) = synthetic_class(label);
    let base: i32 = rng.random_range(60..=120);
    let mut img = vec![0u8; PIXELS];
    for v in img.iter_mut() {
        *v = (base + rng.random_range(-40..=40)).clamp(0, 255) as u8;
    }
    let size: i32 = rng.random_range(5..=9);
    let cy: i32 = rng.random_range(size + 1..=(SIDE as i32 - size - 2));
    let cx: i32 = rng.random_range(size + 1..=(SIDE as i32 - size - 2));
    let color: [i32; 3] = match hue {
        0 => [rng.random_range(190..=250), rng.random_range(20..=80), rng.random_range(20..=80)],
        _ => [rng.random_range(20..=80), rng.random_range(190..=250), rng.random_range(20..=80)],
    };
    for y in 0..SIDE as i32 {
        for x in 0..SIDE as i32 {
            let (dy, dx) = (y - cy, x - cx);
            let inside = match shape {
                Shape::Square => dy.abs() <= size && dx.abs() <= size,
                Shape::Disk => dy * dy + dx * dx <= size * size,
            };
            if inside {
                for (c, &col) in color.iter().enumerate() {
                    let idx = (c * SIDE + y as usize) * SIDE + x as usize;
                    img[idx] = (col + rng.random_range(-20..=20)).clamp(0, 255) as u8;
                }
            }
        }
    }
    ImageSample {
        pixels: img,
        height: SIDE,
        width: SIDE,
        label,
        coarse_label: Some(hue),
    }
}

/// Per-channel mean and standard deviation of `[0,1]`-scaled pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub n_samples: usize,
}

pub fn channel_stats(samples: &[ImageSample]) -> Result<ChannelStats> {
    if samples.is_empty() {
        return Err(Error::Config("channel statistics of an empty set".into()));
    }
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = [0usize; 3];
    for s in samples {
        let plane = s.height * s.width;
        for c in 0..CHANNELS {
            for &p in &s.pixels[c * plane..(c + 1) * plane] {
                let v = p as f64 / 255.0;
                sum[c] += v;
                sq[c] += v * v;
            }
            count[c] += plane;
        }
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..CHANNELS {
        let n = count[c] as f64;
        mean[c] = sum[c] / n;
        std[c] = Float::sqrt((sq[c] / n - mean[c] * mean[c]).max(0.0));
    }
    Ok(ChannelStats {
        mean,
        std,
        n_samples: samples.len(),
    })
}

/// Geometry and normalization applied to every training image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub pad: usize,
    pub crop: usize,
    pub hflip_prob: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl AugmentPolicy {
    /// Pad 4, random 32×32 crop, flip with probability ½.
    pub fn cifar(stats: &ChannelStats) -> Self {
        AugmentPolicy {
            pad: 4,
            crop: SIDE,
            hflip_prob: 0.5,
            mean: stats.mean,
            std: stats.std,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.crop == 0 || self.crop > height + 2 * self.pad || self.crop > width + 2 * self.pad {
            return Err(Error::Config(format!(
                "crop {} does not fit a {height}x{width} image padded by {}",
                self.crop, self.pad
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("std components must be positive, got {:?}", self.std)));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip_prob {} outside [0,1]", self.hflip_prob)));
        }
        Ok(())
    }

    /// Top-left corner of a random crop in padded coordinates, each uniform over `0..=H+2p−crop`.
    pub fn sample_crop_offset<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> (usize, usize) {
        let max_y = height + 2 * self.pad - self.crop;
        let max_x = width + 2 * self.pad - self.crop;
        (rng.random_range(0..=max_y), rng.random_range(0..=max_x))
    }
}

/// Writes the crop at padded offset `(oy, ox)`, optionally mirrored, normalized, into `out`.
fn render<T: Real>(s: &ImageSample, p: &AugmentPolicy, oy: usize, ox: usize, flip: bool, out: &mut [T]) {
    let crop = p.crop;
    for c in 0..CHANNELS {
        let mean = T::from_f64_lossy(p.mean[c]);
        let inv_std = T::from_f64_lossy(1.0 / p.std[c]);
        let scale = T::from_f64_lossy(1.0 / 255.0);
        for y in 0..crop {
            let sy = (oy + y) as isize - p.pad as isize;
            for x in 0..crop {
                let cx = if flip { crop - 1 - x } else { x };
                let sx = (ox + cx) as isize - p.pad as isize;
                let raw = if sy < 0 || sx < 0 || sy >= s.height as isize || sx >= s.width as isize {
                    T::zero()
                } else {
                    T::from_u8(s.px(c, sy as usize, sx as usize)).unwrap() * scale
                };
                out[(c * crop + y) * crop + x] = (raw - mean) * inv_std;
            }
        }
    }
}

/// Training view: zero-pad, random crop, random horizontal flip, normalize.
pub fn augment<T: Real, R: Rng + ?Sized>(s: &ImageSample, p: &AugmentPolicy, rng: &mut R) -> Tensor<T> {
    let (oy, ox) = p.sample_crop_offset(s.height, s.width, rng);
    let flip = p.hflip_prob > 0.0 && rng.random::<f64>() < p.hflip_prob;
    let mut out = vec![T::zero(); CHANNELS * p.crop * p.crop];
    render(s, p, oy, ox, flip, &mut out);
    Tensor::new(&[CHANNELS, p.crop, p.crop], out).unwrap()
}

/// Evaluation view: centered crop (the whole image when `crop` equals its side), normalized.
pub fn normalize<T: Real>(s: &ImageSample, p: &AugmentPolicy) -> Tensor<T> {
    let oy = (s.height + 2 * p.pad - p.crop) / 2;
    let ox = (s.width + 2 * p.pad - p.crop) / 2;
    let mut out = vec![T::zero(); CHANNELS * p.crop * p.crop];
    render(s, p, oy, ox, false, &mut out);
    Tensor::new(&[CHANNELS, p.crop, p.crop], out).unwrap()
}

/// Stacks the selected samples into `[B,3,crop,crop]` plus their labels.
/// Random augmentation is applied when `rng` is given, normalization only otherwise.
pub fn assemble_batch<T: Real, R: Rng + ?Sized>(
    samples: &[ImageSample],
    indices: &[usize],
    p: &AugmentPolicy,
    mut rng: Option<&mut R>,
) -> (Tensor<T>, Vec<usize>) {
    let per = CHANNELS * p.crop * p.crop;
    let mut data = vec![T::zero(); indices.len() * per];
    let mut labels = Vec::with_capacity(indices.len());
    for (k, &i) in indices.iter().enumerate() {
        let s = &samples[i];
        let slot = &mut data[k * per..(k + 1) * per];
        match rng.as_deref_mut() {
            Some(r) => {
                let (oy, ox) = p.sample_crop_offset(s.height, s.width, r);
                let flip = p.hflip_prob > 0.0 && r.random::<f64>() < p.hflip_prob;
                render(s, p, oy, ox, flip, slot);
            }
            None => {
                let oy = (s.height + 2 * p.pad - p.crop) / 2;
                let ox = (s.width + 2 * p.pad - p.crop) / 2;
                render(s, p, oy, ox, false, slot);
            }
        }
        labels.push(s.label);
    }
    let t = Tensor::new(&[indices.len(), CHANNELS, p.crop, p.crop], data).expect("non-empty batch");
    (t, labels)
}
