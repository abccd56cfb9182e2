//! Background-confounded synthetic fine-grained dataset.
//!
//! Each class is a striped ellipse with its own two-colour palette, stripe
//! frequency and stripe angle. Backgrounds come from a small pool shared by
//! all classes and are textured with the same kind of striped patches, so a
//! model that looks at the whole image sees strong, class-independent
//! distractors. The background index is drawn independently of the label.

use std::f64::consts::PI;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::fsutil::{encode_png_gray, encode_png_rgb, write_atomic};

/// Smallest image side for which the stripes on the smallest object stay
/// resolvable.
pub const MIN_IMAGE_SIZE: u32 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: u32,
    /// Number of distinct backgrounds shared across classes.
    pub background_pool: usize,
    /// Standard deviation of additive pixel noise on the `[0, 1]` scale.
    pub noise: f64,
    /// Object semi-axes as a fraction of the image side.
    pub radius: (f64, f64),
    /// Fraction of the hue circle spanned by class foreground hues; small
    /// values make classes differ mainly in stripe frequency and angle.
    pub hue_range: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n_classes: usize, images_per_class: usize, image_size: u32, seed: u64) -> Self {
        SynthSpec {
            n_classes,
            images_per_class,
            image_size,
            background_pool: 6,
            noise: 0.05,
            radius: (0.2, 0.3),
            hue_range: 0.15,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(RsadError::config("classes", "need at least 2 classes"));
        }
        if self.images_per_class == 0 {
            return Err(RsadError::config("per_class", "need at least one image per class"));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(RsadError::config(
                "size",
                format!("{} px is below the {MIN_IMAGE_SIZE} px minimum for the shape family", self.image_size),
            ));
        }
        if !(self.hue_range > 0.0 && self.hue_range <= 1.0) {
            return Err(RsadError::config("hue_range", format!("{} is outside (0, 1]", self.hue_range)));
        }
        if self.background_pool == 0 {
            return Err(RsadError::config("background_pool", "need at least one background"));
        }
        let (lo, hi) = self.radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.45) {
            return Err(RsadError::config("radius", format!("invalid object radius range {lo}..{hi}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthItem {
    pub class: String,
    /// `<class>/<stem>`.
    pub id: String,
    pub label: usize,
    pub background: usize,
    pub image: RgbImage,
    /// Ground-truth foreground, 255 inside the object and 0 elsewhere.
    pub mask: GrayImage,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub classes: Vec<String>,
    pub items: Vec<SynthItem>,
}

#[derive(Clone, Copy, Debug)]
struct Palette {
    a: [f64; 3],
    b: [f64; 3],
    freq: f64,
    angle: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const GOLDEN: f64 = 0.618_033_988_749_895;

fn class_palette(c: usize, hue_range: f64, rng: &mut ChaCha8Rng) -> Palette {
    let hue = ((c as f64 * GOLDEN).rem_euclid(1.0) * hue_range + rng.random_range(0.0..0.05)).rem_euclid(1.0);
    Palette {
        a: hsv(hue, 0.85, 0.95),
        b: hsv(hue + rng.random_range(0.25..0.45), 0.7, rng.random_range(0.35..0.6)),
        freq: [1.5, 2.25, 3.0][c % 3],
        angle: (c as f64 * GOLDEN * 2.0 + 0.3).rem_euclid(1.0) * PI,
    }
}

fn stripe(p: &Palette, u: f64, v: f64, scale: f64, phase: f64) -> [f64; 3] {
    let along = u * p.angle.cos() + v * p.angle.sin();
    let s = (2.0 * PI * p.freq * along / scale + phase).sin();
    let t = 0.5 + 0.5 * (3.0 * s).tanh();
    [0, 1, 2].map(|k| p.a[k] * t + p.b[k] * (1.0 - t))
}

fn background(size: u32, palettes: &[Palette], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = size as usize;
    let base = hsv(rng.random(), 0.3, rng.random_range(0.25..0.5));
    let mut px = vec![base; n * n];
    let s = size as f64;
    for _ in 0..7 {
        let p = palettes[rng.random_range(0..palettes.len())];
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (rx, ry) = (rng.random_range(0.12..0.3) * s, rng.random_range(0.12..0.3) * s);
        let rot: f64 = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    px[y * n + x] = stripe(&p, u, v, rx, phase);
                }
            }
        }
    }
    px
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Generates the dataset in memory. Identical specs give identical pixels.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let palettes: Vec<Palette> = (0..spec.n_classes).map(|c| class_palette(c, spec.hue_range, &mut rng)).collect();
    let pool: Vec<Vec<[f64; 3]>> = (0..spec.background_pool)
        .map(|_| background(spec.image_size, &palettes, &mut rng))
        .collect();
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let width = (spec.n_classes.max(2) - 1).to_string().len().max(2);
    let classes: Vec<String> = (0..spec.n_classes).map(|c| format!("c{c:0width$}")).collect();
    let n = spec.image_size as usize;
    let s = spec.image_size as f64;
    let mut items = Vec::with_capacity(spec.n_classes * spec.images_per_class);
    for (label, class) in classes.iter().enumerate() {
        let p = palettes[label];
        for i in 0..spec.images_per_class {
            let bg = rng.random_range(0..spec.background_pool);
            let (rx, ry) = (
                rng.random_range(spec.radius.0..=spec.radius.1) * s,
                rng.random_range(spec.radius.0..=spec.radius.1) * s,
            );
            let margin = rx.max(ry) + 1.0;
            let cx = rng.random_range(margin.min(s / 2.0)..=(s - margin).max(s / 2.0));
            let cy = rng.random_range(margin.min(s / 2.0)..=(s - margin).max(s / 2.0));
            let rot: f64 = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = rng.random_range(0.9..1.1);
            let mut image = RgbImage::new(spec.image_size, spec.image_size);
            let mut mask = GrayImage::new(spec.image_size, spec.image_size);
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let (u, v) = (dx * rot.cos() + dy * rot.sin(), -dx * rot.sin() + dy * rot.cos());
                    let inside = (u / rx).powi(2) + (v / ry).powi(2) <= 1.0;
                    let rgb = if inside {
                        stripe(&p, u, v, rx.min(ry), phase).map(|c| c * gain)
                    } else {
                        pool[bg][y * n + x]
                    };
                    let px = rgb.map(|c| to_u8(c + noise.sample(&mut rng)));
                    image.put_pixel(x as u32, y as u32, Rgb(px));
                    mask.put_pixel(x as u32, y as u32, Luma([if inside { 255 } else { 0 }]));
                }
            }
            items.push(SynthItem {
                class: class.clone(),
                id: format!("{class}/{i:04}"),
                label,
                background: bg,
                image,
                mask,
            });
        }
    }
    Ok(SynthData {
        spec: spec.clone(),
        classes,
        items,
    })
}

/// Writes `images/<id>.png` and `masks/<id>.png` under `out`. The `masks`
/// directory doubles as the saliency-oracle provider for the prior cache.
pub fn write_synthetic(data: &SynthData, out: &Path) -> Result<()> {
    for item in &data.items {
        write_atomic(&out.join("images").join(format!("{}.png", item.id)), &encode_png_rgb(&item.image))?;
        write_atomic(&out.join("masks").join(format!("{}.png", item.id)), &encode_png_gray(&item.mask))?;
    }
    let spec = serde_json::to_string_pretty(&data.spec).expect("spec serializes");
    write_atomic(&out.join("synth_spec.json"), spec.as_bytes())
}
