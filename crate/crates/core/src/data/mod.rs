//! Synthetic class-conditional images and the sampling protocols built on them.
//!
//! Each class owns a smooth, left-right symmetric prototype; samples are the
//! prototype plus i.i.d. Gaussian pixel noise. Nearest-prototype
//! classification is therefore a closed-form reference for any learned model.

pub mod augment;
pub mod manifest;
pub mod split;
pub mod tokenizer;

pub use augment::{apply_augment, augment, AugmentParams};
pub use split::{base_novel_split, few_shot_sample, unlabeled_pool, ClassSplit, PoolScope, UnlabeledPool};
pub use tokenizer::{TokenSeq, Vocabulary, DEFAULT_TEMPLATE, EOT_TOKEN, PAD_TOKEN};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// A square single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self> {
        if side == 0 || pixels.len() != side * side {
            return Err(Error::Shape(format!(
                "{} pixels do not form a {side}×{side} image",
                pixels.len()
            )));
        }
        Ok(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.side + x]
    }

    pub fn sq_distance(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            images_per_class: 200,
            test_per_class: 50,
            image_side: 16,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 4 {
            return Err(Error::Config(format!(
                "need at least 4 classes for a base/novel split, got {}",
                self.num_classes
            )));
        }
        if self.images_per_class == 0 {
            return Err(Error::Config("images_per_class must be at least 1".into()));
        }
        if self.image_side == 0 {
            return Err(Error::Config("image_side must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub class_names: Vec<String>,
    pub prototypes: Vec<Image>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn class_name(k: usize) -> String {
    format!("class_{k}")
}

fn prototype(side: usize, rng: &mut impl Rng) -> Image {
    const BLOBS: usize = 4;
    let s = side as f64;
    let mut field = vec![0.0f64; side * side];
    for _ in 0..BLOBS {
        let cy = rng.random_range(0.15 * s..0.85 * s);
        let cx = rng.random_range(0.15 * s..0.85 * s);
        let sigma = rng.random_range(0.1 * s..0.22 * s);
        let amp = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.5..1.5);
        for y in 0..side {
            for x in 0..side {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                field[y * side + x] += amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    // Mirror symmetry keeps class identity invariant to horizontal flips.
    let mut sym = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            sym[y * side + x] = 0.5 * (field[y * side + x] + field[y * side + side - 1 - x]);
        }
    }
    let n = sym.len() as f64;
    let mean = sym.iter().sum::<f64>() / n;
    let std = (sym.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    Image {
        side,
        pixels: sym.iter().map(|v| ((v - mean) / std) as f32).collect(),
    }
}

/// Prototype plus N(0, noise_std²) per pixel.
pub fn noisy_copy(proto: &Image, noise_std: f64, rng: &mut impl Rng) -> Image {
    if noise_std == 0.0 {
        return proto.clone();
    }
    let dist = Normal::new(0.0, noise_std).expect("noise_std checked non-negative");
    Image {
        side: proto.side,
        pixels: proto
            .pixels
            .iter()
            .map(|&p| (f64::from(p) + dist.sample(rng)) as f32)
            .collect(),
    }
}

pub fn generate_synthetic_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut proto_rng = rng::stream(spec.seed, "data.prototypes");
    let prototypes: Vec<Image> = (0..spec.num_classes)
        .map(|_| prototype(spec.image_side, &mut proto_rng))
        .collect();
    let draw = |purpose: &str, per_class: usize| {
        let mut r = rng::stream(spec.seed, purpose);
        let mut out = Vec::with_capacity(per_class * spec.num_classes);
        for (label, p) in prototypes.iter().enumerate() {
            for _ in 0..per_class {
                out.push(LabeledSample {
                    image: noisy_copy(p, spec.noise_std, &mut r),
                    label,
                });
            }
        }
        out
    };
    let train = draw("data.train", spec.images_per_class);
    let test = draw("data.test", spec.test_per_class);
    Ok(Dataset {
        spec: spec.clone(),
        class_names: (0..spec.num_classes).map(class_name).collect(),
        prototypes,
        train,
        test,
    })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// SHA-256 over every sample, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (tag, set) in [(0u8, &self.train), (1u8, &self.test)] {
            for s in set {
                h.update([tag]);
                h.update((s.label as u32).to_le_bytes());
                for p in s.image.pixels() {
                    h.update(p.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    /// Index of the closest prototype; lowest index on ties.
    pub fn nearest_prototype(&self, image: &Image) -> usize {
        let d: Vec<f64> = self.prototypes.iter().map(|p| -p.sq_distance(image)).collect();
        crate::math::argmax(&d)
    }
}
