use serde::{Deserialize, Serialize};

use super::pnm::ImageBuffer;
use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, Shape4, Tensor4};

/// Per-channel normalization constants applied after scaling samples to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Large-corpus RGB statistics used by most ImageNet-pretrained pipelines.
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// `1×C×H×W` tensor with samples scaled to `[0, 1]`.
pub fn image_to_tensor(img: &ImageBuffer) -> Tensor4<f32> {
    let (w, h, c) = (img.width, img.height, img.channels);
    Tensor4::from_fn(Shape4::new(1, c, h, w), |_, ch, y, x| {
        img.samples[(y * w + x) * c + ch] as f32 / 255.0
    })
}

/// Bilinear resize to `target_h × target_w`, scale to `[0, 1]`, then
/// `(x − mean)/std` per channel. Output layout is NCHW with `n = 1`.
pub fn preprocess(
    img: &ImageBuffer,
    target_h: usize,
    target_w: usize,
    norm: &Normalization,
) -> Result<Tensor4<f32>> {
    if img.channels != 3 {
        return Err(Error::invalid(
            "preprocess",
            format!("expected a 3-channel image, got {}", img.channels),
        ));
    }
    if target_h < 64 || target_w < 64 {
        return Err(Error::invalid(
            "preprocess",
            format!("target size {target_h}x{target_w} is below the 64 px minimum"),
        ));
    }
    let scaled = image_to_tensor(img);
    let mut t = upsample_bilinear(&scaled, target_h, target_w, false)?;
    let plane = target_h * target_w;
    for (c, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (norm.mean[c], norm.std[c]);
        for v in chunk {
            *v = (*v - m) / s;
        }
    }
    Ok(t)
}

/// Binary ground-truth mask (any nonzero sample is foreground) as a `1×1×H×W` 0/1 tensor.
pub fn mask_to_tensor(mask: &ImageBuffer) -> Tensor4<f32> {
    let (w, h, c) = (mask.width, mask.height, mask.channels);
    Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| {
        if mask.samples[(y * w + x) * c] > 0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Single-channel probability map as 8-bit gray (`round(p·255)`).
pub fn prob_to_image(prob: &Tensor4<f32>) -> ImageBuffer {
    let s = prob.shape();
    ImageBuffer {
        width: s.w,
        height: s.h,
        channels: 1,
        samples: prob
            .plane(0, 0)
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    }
}

/// Gray image back to probabilities `sample / 255`.
pub fn image_to_prob(img: &ImageBuffer) -> Tensor4<f32> {
    let (w, h, c) = (img.width, img.height, img.channels);
    Tensor4::from_fn(Shape4::new(1, 1, h, w), |_, _, y, x| {
        img.samples[(y * w + x) * c] as f32 / 255.0
    })
}

/// Binary tensor (values 0/1) to a 0/255 mask image.
pub fn binary_to_mask(bin: &Tensor4<f32>) -> ImageBuffer {
    let s = bin.shape();
    ImageBuffer {
        width: s.w,
        height: s.h,
        channels: 1,
        samples: bin
            .plane(0, 0)
            .iter()
            .map(|&v| if v > 0.5 { 255 } else { 0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> ImageBuffer {
        let samples = (0..w * h * 3).map(|i| (i * 7 % 256) as u8).collect();
        ImageBuffer::new(w, h, 3, samples).unwrap()
    }

    #[test]
    fn identity_norm_at_target_size_is_exact_scaling() {
        let img = gradient_image(64, 64);
        let t = preprocess(&img, 64, 64, &Normalization::IDENTITY).unwrap();
        assert_eq!(t.shape(), Shape4::new(1, 3, 64, 64));
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    let s = img.samples[(y * 64 + x) * 3 + c];
                    assert_eq!(t.at(0, c, y, x), s as f32 / 255.0);
                }
            }
        }
    }

    #[test]
    fn constant_gray_maps_to_closed_form() {
        let img = ImageBuffer::filled(80, 50, 3, 128);
        let norm = Normalization::IMAGENET;
        let t = preprocess(&img, 64, 96, &norm).unwrap();
        for c in 0..3 {
            let expect = (128.0f32 / 255.0 - norm.mean[c]) / norm.std[c];
            assert!(t.plane(0, c).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn aligned_crop_commutes_with_normalization() {
        let img = gradient_image(64, 64);
        let full = preprocess(&img, 64, 64, &Normalization::IMAGENET).unwrap();
        let mut crop = ImageBuffer::filled(64, 64, 3, 0);
        // crop the top-left 32x32 block, placed in a 64x64 canvas for the size floor
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    crop.samples[(y * 64 + x) * 3 + c] = img.samples[(y * 64 + x) * 3 + c];
                }
            }
        }
        let part = preprocess(&crop, 64, 64, &Normalization::IMAGENET).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    assert_eq!(part.at(0, c, y, x), full.at(0, c, y, x));
                }
            }
        }
    }

    #[test]
    fn rejects_small_targets() {
        let img = gradient_image(8, 8);
        assert!(preprocess(&img, 32, 64, &Normalization::IMAGENET).is_err());
    }
}
