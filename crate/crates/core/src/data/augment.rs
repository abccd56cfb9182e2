use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};

/// Which geometric transform precedes the final resize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentPolicy {
    /// Random-resized crop plus horizontal flip.
    Train,
    /// Largest centred square, no randomness.
    Eval,
    /// Plain resize of the whole image.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub policy: AugmentPolicy,
    pub size: u32,
    /// Crop area as a fraction of the image area.
    pub scale: (f64, f64),
    pub flip_p: f64,
}

impl Augment {
    pub fn train(size: u32) -> Self {
        Augment {
            policy: AugmentPolicy::Train,
            size,
            scale: (0.5, 1.0),
            flip_p: 0.5,
        }
    }

    pub fn eval(size: u32) -> Self {
        Augment {
            policy: AugmentPolicy::Eval,
            size,
            scale: (1.0, 1.0),
            flip_p: 0.0,
        }
    }

    pub fn none(size: u32) -> Self {
        Augment {
            policy: AugmentPolicy::None,
            ..Augment::eval(size)
        }
    }

    /// One random draw, to be applied identically to every image of a pair.
    pub fn draw<R: Rng + ?Sized>(&self, width: u32, height: u32, rng: &mut R) -> AugmentDraw {
        let full = AugmentDraw {
            x: 0,
            y: 0,
            w: width,
            h: height,
            flip: false,
        };
        match self.policy {
            AugmentPolicy::None => full,
            AugmentPolicy::Eval => {
                let side = width.min(height);
                AugmentDraw {
                    x: (width - side) / 2,
                    y: (height - side) / 2,
                    w: side,
                    h: side,
                    flip: false,
                }
            }
            AugmentPolicy::Train => {
                let flip = rng.random_bool(self.flip_p.clamp(0.0, 1.0));
                let area = (width * height) as f64;
                let (lo, hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
                for _ in 0..10 {
                    let target = area * rng.random_range(self.scale.0..=self.scale.1);
                    let ratio = rng.random_range(lo..=hi).exp();
                    let w = (target * ratio).sqrt().round() as u32;
                    let h = (target / ratio).sqrt().round() as u32;
                    if w >= 1 && h >= 1 && w <= width && h <= height {
                        return AugmentDraw {
                            x: rng.random_range(0..=width - w),
                            y: rng.random_range(0..=height - h),
                            w,
                            h,
                            flip,
                        };
                    }
                }
                AugmentDraw { flip, ..full }
            }
        }
    }

    pub fn apply(&self, draw: &AugmentDraw, img: &RgbImage) -> RgbImage {
        let crop = imageops::crop_imm(img, draw.x, draw.y, draw.w, draw.h).to_image();
        let mut out = if crop.dimensions() == (self.size, self.size) {
            crop
        } else {
            imageops::resize(&crop, self.size, self.size, FilterType::Triangle)
        };
        if draw.flip {
            imageops::flip_horizontal_in_place(&mut out);
        }
        out
    }
}

/// Crop window in source pixels plus a flip bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub flip: bool,
}

/// Applies one shared draw to a raw image and its prior.
pub fn paired_augment<R: Rng + ?Sized>(
    raw: &RgbImage,
    prior: &RgbImage,
    aug: &Augment,
    rng: &mut R,
) -> Result<(RgbImage, RgbImage)> {
    if raw.dimensions() != prior.dimensions() {
        return Err(RsadError::input(format!(
            "raw image {:?} and prior {:?} differ in size",
            raw.dimensions(),
            prior.dimensions()
        )));
    }
    let draw = aug.draw(raw.width(), raw.height(), rng);
    Ok((aug.apply(&draw, raw), aug.apply(&draw, prior)))
}
