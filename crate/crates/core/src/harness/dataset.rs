//! Toy image classification data: one class-colored shape per image at a
//! random position on a gray, noisy background.
//!
//! Geometry, for image size `S` and shape box `s = max(S/2, 3)` with
//! `m = (s-1)/2` and box-local row/column `(u, v)`:
//!
//! | shape    | pixels inside the box                    |
//! |----------|------------------------------------------|
//! | square   | all                                      |
//! | disk     | `(u-m)² + (v-m)² ≤ (s/2)²`               |
//! | cross    | `|u-m| ≤ s/6` or `|v-m| ≤ s/6`           |
//! | triangle | `v ≤ u`                                  |
//! | bar      | `|u-m| ≤ s/6`                            |
//!
//! Class `c` draws `SHAPES[c % 5]` in `PALETTE[c % 8]`. The background is
//! [`BACKGROUND`] in every channel; i.i.d. `N(0, noise_std²)` noise is added
//! to every pixel without clipping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;

pub const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.80, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.20, 0.20, 0.20],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disk,
    Cross,
    Triangle,
    Bar,
}

pub const SHAPES: [Shape; 5] = [Shape::Square, Shape::Disk, Shape::Cross, Shape::Triangle, Shape::Bar];

/// Largest class count with a unique (shape, color) pair.
pub const MAX_CLASSES: usize = 40;

impl Shape {
    pub fn for_class(c: usize) -> Shape {
        SHAPES[c % SHAPES.len()]
    }

    /// Whether box-local pixel `(u, v)` of an `s×s` box is covered.
    pub fn covers(self, u: usize, v: usize, s: usize) -> bool {
        let m = (s as f64 - 1.0) / 2.0;
        let (du, dv) = (u as f64 - m, v as f64 - m);
        let band = s as f64 / 6.0;
        match self {
            Shape::Square => true,
            Shape::Disk => du * du + dv * dv <= (s as f64 / 2.0).powi(2),
            Shape::Cross => du.abs() <= band || dv.abs() <= band,
            Shape::Triangle => v <= u,
            Shape::Bar => du.abs() <= band,
        }
    }
}

pub fn shape_box(image_size: usize) -> usize {
    (image_size / 2).max(3)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            n_classes: 4,
            samples_per_class: 100,
            image_size: 32,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `3×S×S`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: ToyDatasetSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// SHA-256 over labels and pixel bytes of both splits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in self.train.iter().chain(&self.val) {
            h.update((s.label as u64).to_le_bytes());
            for v in s.image.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Renders one noise-free image of class `label` with the shape box at `(top, left)`.
pub fn render(label: usize, image_size: usize, top: usize, left: usize) -> Tensor {
    let s = shape_box(image_size);
    let shape = Shape::for_class(label);
    let color = PALETTE[label % PALETTE.len()];
    let plane = image_size * image_size;
    let mut data = vec![BACKGROUND; 3 * plane];
    for u in 0..s {
        for v in 0..s {
            if shape.covers(u, v, s) {
                let (y, x) = (top + u, left + v);
                for (ch, &c) in color.iter().enumerate() {
                    data[ch * plane + y * image_size + x] = c;
                }
            }
        }
    }
    Tensor::new(vec![3, image_size, image_size], data).expect("shape matches data")
}

/// Generates the dataset with a stratified 80/20 train/val split.
pub fn make_toy_dataset(spec: &ToyDatasetSpec) -> Result<Dataset> {
    if spec.n_classes == 0 || spec.samples_per_class == 0 {
        return Err(Error::config("dataset needs at least one class and one sample per class"));
    }
    if spec.n_classes > MAX_CLASSES {
        return Err(Error::config(format!("at most {MAX_CLASSES} classes supported")));
    }
    if spec.image_size < 4 {
        return Err(Error::config("image_size must be at least 4"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config(format!("invalid noise_std {}", spec.noise_std)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let span = spec.image_size - shape_box(spec.image_size);
    let n_train = spec.samples_per_class * 4 / 5;

    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in 0..spec.n_classes {
        let mut samples = Vec::with_capacity(spec.samples_per_class);
        for _ in 0..spec.samples_per_class {
            let top = rng.random_range(0..=span);
            let left = rng.random_range(0..=span);
            let mut image = render(label, spec.image_size, top, left);
            if spec.noise_std > 0.0 {
                for v in image.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            samples.push(Sample { image, label });
        }
        samples.shuffle(&mut rng);
        val.extend(samples.split_off(n_train));
        train.extend(samples);
    }
    train.shuffle(&mut rng);
    val.shuffle(&mut rng);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Mirrors a `C×H×W` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = src[row + w - 1 - x];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let d = make_toy_dataset(&ToyDatasetSpec::default()).unwrap();
        assert_eq!((d.train.len(), d.val.len()), (320, 80));
        for c in 0..4 {
            assert_eq!(d.val.iter().filter(|s| s.label == c).count(), 20);
        }
    }

    #[test]
    fn zero_samples_rejected() {
        let spec = ToyDatasetSpec {
            samples_per_class: 0,
            ..Default::default()
        };
        assert!(matches!(make_toy_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn flip_is_involution() {
        let t = render(3, 16, 2, 5);
        assert_ne!(flip_horizontal(&t), t);
        assert_eq!(flip_horizontal(&flip_horizontal(&t)), t);
    }

    #[test]
    fn shapes_at_s8() {
        let count = |sh: Shape| (0..8).flat_map(|u| (0..8).map(move |v| (u, v))).filter(|&(u, v)| sh.covers(u, v, 8)).count();
        assert_eq!(count(Shape::Square), 64);
        assert_eq!(count(Shape::Triangle), 36);
        assert_eq!(count(Shape::Bar), 16);
        assert_eq!(count(Shape::Cross), 28);
    }
}
