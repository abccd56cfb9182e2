//! Foreground prior images: threshold saliency maps, OR them across
//! detectors and zero every pixel outside the resulting mask.
//!
//! The cache produced by [`build_prior_cache`] lives at
//! `<out>/priors/<image_id>.png` with an ndjson manifest at
//! `<out>/manifest.ndjson`. The first manifest line is a header carrying the
//! threshold and provider list; every later line is a prior or an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::fsutil::{self, find_by_id, list_image_tree, read_gray, read_rgb, sha256_hex, write_atomic};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-pixel foreground confidence in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
    pub source_id: String,
}

impl SaliencyMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>, source_id: impl Into<String>) -> Result<Self> {
        if values.len() != (width * height) as usize {
            return Err(RsadError::input(format!(
                "{} saliency values for a {width}x{height} map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(RsadError::input(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(SaliencyMap {
            width,
            height,
            values,
            source_id: source_id.into(),
        })
    }

    /// Reads an 8-bit grayscale map (value / 255), bilinearly resized to
    /// `size` when the file's dimensions differ.
    pub fn load(path: &Path, source_id: &str, size: (u32, u32)) -> Result<Self> {
        let gray = read_gray(path)?;
        let as_float: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_fn(gray.width(), gray.height(), |x, y| Luma([gray.get_pixel(x, y)[0] as f32 / 255.0]));
        let resized = if gray.dimensions() == size {
            as_float
        } else {
            resize(&as_float, size.0, size.1, FilterType::Triangle)
        };
        let values = resized.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        SaliencyMap::new(size.0, size.1, values, source_id)
    }
}

/// Row-major mask with bits in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Who produced a prior image and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub detectors: Vec<String>,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorImage {
    pub pixels: RgbImage,
    pub provenance: Provenance,
}

pub fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(RsadError::config("threshold", format!("must lie in (0, 1), got {t}")))
    }
}

/// Bit is 1 exactly where the map value is `>= t`.
pub fn binarize_map(map: &SaliencyMap, t: f64) -> Result<BinaryMask> {
    check_threshold(t)?;
    let t = t as f32;
    Ok(BinaryMask {
        width: map.width,
        height: map.height,
        bits: map.values.iter().map(|&v| u8::from(v >= t)).collect(),
    })
}

/// Elementwise logical OR of a non-empty list of equally sized masks.
pub fn or_masks(masks: &[BinaryMask]) -> Result<BinaryMask> {
    let first = masks.first().ok_or_else(|| RsadError::input("or_masks needs at least one mask"))?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(RsadError::input(format!(
                "mask sizes differ: {}x{} vs {}x{}",
                m.width, m.height, first.width, first.height
            )));
        }
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Hadamard product of `image` with `mask` broadcast over channels.
pub fn compose_prior(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if image.dimensions() != (mask.width, mask.height) {
        return Err(RsadError::input(format!(
            "image is {:?} but mask is {}x{}",
            image.dimensions(),
            mask.width,
            mask.height
        )));
    }
    let mut out = image.clone();
    for (px, &b) in out.pixels_mut().zip(&mask.bits) {
        if b == 0 {
            px.0 = [0, 0, 0];
        }
    }
    Ok(out)
}

/// Full single-image pipeline: threshold every map, OR them, mask the image.
pub fn prior_from_maps(image: &RgbImage, maps: &[SaliencyMap], t: f64, image_id: &str) -> Result<PriorImage> {
    let masks = maps.iter().map(|m| binarize_map(m, t)).collect::<Result<Vec<_>>>()?;
    Ok(PriorImage {
        pixels: compose_prior(image, &or_masks(&masks)?)?,
        provenance: Provenance {
            image_id: image_id.to_string(),
            detectors: maps.iter().map(|m| m.source_id.clone()).collect(),
            threshold: t,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEntry {
    pub image_id: String,
    /// Path relative to the cache root.
    pub prior: String,
    pub detectors: Vec<String>,
    pub threshold: f64,
    /// SHA-256 of the written prior file.
    pub hash: String,
    /// SHA-256 over the source image, every map and the threshold.
    pub source_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorError {
    pub image_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestRecord {
    Header { threshold: f64, providers: Vec<String> },
    Prior(PriorEntry),
    Error(PriorError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheManifest {
    pub threshold: f64,
    pub providers: Vec<String>,
    pub entries: Vec<PriorEntry>,
    pub errors: Vec<PriorError>,
}

pub const MANIFEST_FILE: &str = "manifest.ndjson";

impl CacheManifest {
    pub fn to_ndjson(&self) -> String {
        let mut records = vec![ManifestRecord::Header {
            threshold: self.threshold,
            providers: self.providers.clone(),
        }];
        records.extend(self.entries.iter().cloned().map(ManifestRecord::Prior));
        records.extend(self.errors.iter().cloned().map(ManifestRecord::Error));
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("manifest record serializes") + "\n")
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RsadError::io(path, e))?;
        let mut header = None;
        let (mut entries, mut errors) = (Vec::new(), Vec::new());
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| RsadError::corrupt(path, format!("line {}: {e}", n + 1)))?;
            match record {
                ManifestRecord::Header { threshold, providers } => header = Some((threshold, providers)),
                ManifestRecord::Prior(p) => entries.push(p),
                ManifestRecord::Error(e) => errors.push(e),
            }
        }
        let (threshold, providers) = header.ok_or_else(|| RsadError::corrupt(path, "missing header record"))?;
        Ok(CacheManifest {
            threshold,
            providers,
            entries,
            errors,
        })
    }

    pub fn by_id(&self) -> BTreeMap<&str, &PriorEntry> {
        self.entries.iter().map(|e| (e.image_id.as_str(), e)).collect()
    }
}

fn provider_id(dir: &Path) -> String {
    dir.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .unwrap_or_else(|| dir.display().to_string())
}

/// Builds (or refreshes) the prior cache for every image under `images`.
///
/// Entries whose inputs hash to the recorded `source_hash` and whose prior
/// file still matches `hash` are left untouched.
pub fn build_prior_cache(providers: &[PathBuf], images: &Path, t: f64, out: &Path) -> Result<CacheManifest> {
    check_threshold(t)?;
    if providers.is_empty() {
        return Err(RsadError::config("maps", "at least one saliency-map directory is required"));
    }
    let manifest_path = out.join(MANIFEST_FILE);
    let previous = if manifest_path.is_file() {
        Some(CacheManifest::load(&manifest_path)?)
    } else {
        None
    };
    let previous_by_id = previous.as_ref().map(|m| m.by_id()).unwrap_or_default();
    let names: Vec<String> = providers.iter().map(|p| provider_id(p)).collect();
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for item in list_image_tree(images)? {
        let map_paths: Vec<Option<PathBuf>> = providers.iter().map(|p| find_by_id(p, &item.id)).collect();
        if let Some(missing) = map_paths.iter().position(Option::is_none) {
            errors.push(PriorError {
                image_id: item.id.clone(),
                reason: format!("no saliency map from provider `{}`", names[missing]),
            });
            continue;
        }
        let map_paths: Vec<PathBuf> = map_paths.into_iter().flatten().collect();
        let image_bytes = fs::read(&item.path).map_err(|e| RsadError::io(&item.path, e))?;
        let mut hasher_input = image_bytes.clone();
        for p in &map_paths {
            hasher_input.extend(fs::read(p).map_err(|e| RsadError::io(p, e))?);
        }
        hasher_input.extend(t.to_le_bytes());
        let source_hash = sha256_hex(&hasher_input);
        let rel = format!("priors/{}.png", item.id);
        let target = out.join(&rel);
        if let Some(prev) = previous_by_id.get(item.id.as_str()) {
            let unchanged = prev.source_hash == source_hash
                && fs::read(&target).map(|b| sha256_hex(&b) == prev.hash).unwrap_or(false);
            if unchanged {
                entries.push((*prev).clone());
                continue;
            }
        }
        let rgb = read_rgb(&item.path)?;
        let maps = map_paths
            .iter()
            .zip(&names)
            .map(|(p, name)| SaliencyMap::load(p, name, rgb.dimensions()))
            .collect::<Result<Vec<_>>>()?;
        let prior = prior_from_maps(&rgb, &maps, t, &item.id)?;
        let bytes = fsutil::encode_png_rgb(&prior.pixels);
        write_atomic(&target, &bytes)?;
        entries.push(PriorEntry {
            image_id: item.id,
            prior: rel,
            detectors: prior.provenance.detectors,
            threshold: t,
            hash: sha256_hex(&bytes),
            source_hash,
        });
    }
    let manifest = CacheManifest {
        threshold: t,
        providers: names,
        entries,
        errors,
    };
    write_atomic(&manifest_path, manifest.to_ndjson().as_bytes())?;
    Ok(manifest)
}
