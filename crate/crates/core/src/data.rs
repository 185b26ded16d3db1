//! Procedural "toy shapes" classification data and light augmentation.
//!
//! Images are 1-channel, 32x32, with one filled shape (disk, square, cross,
//! triangle) at a random position, scale and rotation plus Gaussian pixel
//! noise. Generation uses ChaCha8 seeded from a `u64`, so a `(seed, size)`
//! pair reproduces the same pixels on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    Cross,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Cross,
        ShapeKind::Triangle,
    ];

    /// Membership test in the shape's unit frame.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            ShapeKind::Cross => {
                (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 1.0)
            }
            ShapeKind::Triangle => {
                let s3 = 3f64.sqrt();
                v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: usize,
    /// Total images before the 80/20 split.
    pub size: usize,
    pub seed: u64,
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            classes: 4,
            size: 4000,
            seed: 0,
            noise: 0.05,
        }
    }
}

/// Images `[n, 1, H, W]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(LabError::shape("labeled_images", images.shape(), &[labels.len()]));
        }
        Ok(LabeledImages { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<LabeledImages> {
        Ok(LabeledImages {
            images: self.images.gather_leading(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub train: LabeledImages,
    pub test: LabeledImages,
    /// Mean and standard deviation subtracted/divided from raw pixels.
    pub norm: (f64, f64),
}

fn render(kind: ShapeKind, rng: &mut ChaCha8Rng, noise: f64) -> Vec<f64> {
    let side = IMAGE_SIDE as f64;
    let cx = rng.random_range(0.32 * side..0.68 * side);
    let cy = rng.random_range(0.32 * side..0.68 * side);
    let radius = rng.random_range(0.2 * side..0.3 * side);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, c) = theta.sin_cos();
    let mut px = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            // 2x2 supersampling for soft edges
            let mut cover = 0.0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let dx = x as f64 + ox - cx;
                let dy = y as f64 + oy - cy;
                let u = (c * dx + s * dy) / radius;
                let v = (-s * dx + c * dy) / radius;
                if kind.contains(u, v) {
                    cover += 0.25;
                }
            }
            px[y * IMAGE_SIDE + x] = cover;
        }
    }
    for p in px.iter_mut() {
        *p += noise * rng.sample::<f64, _>(StandardNormal);
    }
    px
}

impl ToyDataset {
    pub fn generate(config: &ToyConfig) -> Result<Self> {
        if !(1..=4).contains(&config.classes) {
            return Err(LabError::config("data.classes", "must be between 1 and 4"));
        }
        if config.size < 5 * config.classes {
            return Err(LabError::config(
                "data.size",
                format!("need at least {} images", 5 * config.classes),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let npx = IMAGE_SIDE * IMAGE_SIDE;
        let (mut train_px, mut test_px) = (Vec::new(), Vec::new());
        let (mut train_y, mut test_y) = (Vec::new(), Vec::new());
        for i in 0..config.size {
            let label = i % config.classes;
            let px = render(ShapeKind::ALL[label], &mut rng, config.noise);
            // every fifth round of labels goes to the held-out split
            if (i / config.classes) % 5 == 4 {
                test_px.extend(px);
                test_y.push(label);
            } else {
                train_px.extend(px);
                train_y.push(label);
            }
        }
        let n = train_px.len() as f64;
        let mean = train_px.iter().sum::<f64>() / n;
        let std = (train_px.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let normalize = |v: Vec<f64>| v.into_iter().map(|p| (p - mean) / std).collect::<Vec<_>>();
        let train = LabeledImages::new(
            Tensor::new(vec![train_y.len(), 1, IMAGE_SIDE, IMAGE_SIDE], normalize(train_px))?,
            train_y,
        )?;
        let test = LabeledImages::new(
            Tensor::new(vec![test_y.len(), 1, IMAGE_SIDE, IMAGE_SIDE], normalize(test_px))?,
            test_y,
        )?;
        debug_assert_eq!(train.images.numel() / train.len(), npx);
        Ok(ToyDataset {
            config: config.clone(),
            train,
            test,
            norm: (mean, std),
        })
    }
}

/// Random 28x28 crop re-padded (centered) to the full size by replicating
/// the crop's edge pixels, then a horizontal flip with probability 1/2.
/// Applied per image.
///
/// Edge replication rather than a constant fill: in normalized pixel space
/// zero is mid-gray, and a gray frame is a feature the held-out images never
/// show.
pub fn crop_flip<R: Rng + ?Sized>(images: &Tensor, rng: &mut R) -> Tensor {
    let s = images.shape();
    let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let crop = 28.min(h).min(w);
    let (pad_y, pad_x) = ((h - crop) / 2, (w - crop) / 2);
    let mut out = vec![0.0; images.numel()];
    let src = images.data();
    for i in 0..n {
        let oy = rng.random_range(0..=h - crop);
        let ox = rng.random_range(0..=w - crop);
        let flip = rng.random_bool(0.5);
        for c in 0..ch {
            let base = (i * ch + c) * h * w;
            for y in 0..h {
                let cy = y.saturating_sub(pad_y).min(crop - 1);
                for x in 0..w {
                    let cx = x.saturating_sub(pad_x).min(crop - 1);
                    let sx = if flip { crop - 1 - cx } else { cx };
                    out[base + y * w + x] = src[base + (oy + cy) * w + ox + sx];
                }
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}
