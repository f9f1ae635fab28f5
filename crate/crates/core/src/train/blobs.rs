use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ImageBuffer, Normalization};
use crate::tensor::{Shape4, Tensor4};

/// Foreground share of the image allowed for one sample.
pub const AREA_RANGE: (f64, f64) = (0.02, 0.30);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub theta: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(x, y)`; `< 1` strictly inside.
    pub fn radius2(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v
    }

    /// Membership of the pixel whose center is `(px + 0.5, py + 0.5)`.
    pub fn contains_pixel(&self, px: usize, py: usize) -> bool {
        self.radius2(px as f64 + 0.5, py as f64 + 0.5) < 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobSample {
    pub image: ImageBuffer,
    /// One channel, values 0/1.
    pub mask: ImageBuffer,
    pub blobs: Vec<Ellipse>,
}

impl BlobSample {
    pub fn area_fraction(&self) -> f64 {
        let fg = self.mask.samples.iter().filter(|&&v| v == 1).count();
        fg as f64 / self.mask.samples.len() as f64
    }

    /// `1×1×H×W` 0/1 mask tensor.
    pub fn mask_tensor(&self) -> Tensor4<f32> {
        let (w, h) = (self.mask.width, self.mask.height);
        Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| {
            self.mask.samples[y * w + x] as f32
        })
    }

    /// `1×3×H×W` normalized image tensor.
    pub fn image_tensor(&self, norm: &Normalization) -> Tensor4<f32> {
        let (w, h) = (self.image.width, self.image.height);
        Tensor4::from_fn(Shape4::new(1, 3, h, w), |_, c, y, x| {
            let v = self.image.samples[(y * w + x) * 3 + c] as f32 / 255.0;
            (v - norm.mean[c]) / norm.std[c]
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobDataset {
    pub seed: u64,
    pub size: usize,
    pub samples: Vec<BlobSample>,
}

impl BlobDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Hash of every image and mask byte, for reproducibility checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.samples {
            s.image.samples.hash(&mut h);
            s.mask.samples.hash(&mut h);
        }
        h.finish()
    }
}

fn draw_blobs(rng: &mut ChaCha8Rng, size: usize) -> Vec<Ellipse> {
    let n = rng.random_range(1..=3);
    let s = size as f64;
    (0..n)
        .map(|_| {
            let rx = rng.random_range(0.06..0.25) * s;
            let ry = rx * rng.random_range(0.6..1.0);
            Ellipse {
                cx: rng.random_range(0.15..0.85) * s,
                cy: rng.random_range(0.15..0.85) * s,
                rx,
                ry,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            }
        })
        .collect()
}

fn render(rng: &mut ChaCha8Rng, size: usize, blobs: &[Ellipse]) -> (ImageBuffer, ImageBuffer) {
    // background: pinkish base, two low-frequency waves, pixel noise
    let base = [
        rng.random_range(0.55..0.75),
        rng.random_range(0.30..0.45),
        rng.random_range(0.30..0.45),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.05..0.3),
                rng.random_range(0.05..0.3),
                rng.random_range(0.0..6.3),
                rng.random_range(0.04..0.10),
            )
        })
        .collect();
    let fg_shift = [
        rng.random_range(0.15..0.30),
        rng.random_range(0.05..0.20),
        rng.random_range(-0.15..0.0),
    ];
    let mut image = ImageBuffer::filled(size, size, 3, 0);
    let mut mask = ImageBuffer::filled(size, size, 1, 0);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin())
                .sum();
            // soft edge: opacity 1/2 exactly on the boundary
            let alpha = blobs
                .iter()
                .map(|e| 1.0 / (1.0 + ((e.radius2(fx, fy).sqrt() - 1.0) * 12.0).exp()))
                .fold(0.0, f64::max);
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                let v = base[c] + texture + noise + alpha * fg_shift[c];
                image.samples[(y * size + x) * 3 + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            if blobs.iter().any(|e| e.contains_pixel(x, y)) {
                mask.samples[y * size + x] = 1;
            }
        }
    }
    (image, mask)
}

fn sample(seed: u64, index: usize, size: usize) -> BlobSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    loop {
        let blobs = draw_blobs(&mut rng, size);
        let (image, mask) = render(&mut rng, size, &blobs);
        let s = BlobSample { image, mask, blobs };
        let a = s.area_fraction();
        if (AREA_RANGE.0..=AREA_RANGE.1).contains(&a) {
            return s;
        }
    }
}

/// `n` images of `size × size` pixels with 1–3 soft-edged ellipses on a
/// textured background. Sample `i` depends only on `(seed, i)`.
pub fn gen_blobs(seed: u64, n: usize, size: usize) -> Result<BlobDataset> {
    if size < 64 || n < 1 {
        return Err(Error::invalid(
            "gen_blobs",
            format!("need size ≥ 64 and n ≥ 1, got size {size}, n {n}"),
        ));
    }
    let samples = (0..n).into_par_iter().map(|i| sample(seed, i, size)).collect();
    Ok(BlobDataset {
        seed,
        size,
        samples,
    })
}
