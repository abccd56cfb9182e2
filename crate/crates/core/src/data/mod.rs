//! Class splits, in-memory datasets, episode sampling and batch assembly.

pub mod augment;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::fsutil::{list_image_tree, read_gray, read_rgb, write_atomic};
use crate::nn::{Real, Tensor};
use crate::saliency_prior::{self, CacheManifest, SaliencyMap, DEFAULT_THRESHOLD};

pub use augment::{paired_augment, Augment, AugmentDraw, AugmentPolicy};
pub use synth::{generate_synthetic, write_synthetic, SynthData, SynthItem, SynthSpec};

/// A benchmark with a fixed class count and conventional split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetInfo {
    pub id: &'static str,
    pub aliases: &'static [&'static str],
    pub classes: usize,
    pub counts: (usize, usize, usize),
}

pub const REGISTRY: [DatasetInfo; 3] = [
    DatasetInfo {
        id: "cub",
        aliases: &["cub200", "cub2002011", "cub_200_2011"],
        classes: 200,
        counts: (100, 50, 50),
    },
    DatasetInfo {
        id: "dogs",
        aliases: &["stanforddogs", "stanford_dogs"],
        classes: 120,
        counts: (70, 20, 30),
    },
    DatasetInfo {
        id: "cars",
        aliases: &["stanfordcars", "stanford_cars"],
        classes: 196,
        counts: (130, 17, 49),
    },
];

pub fn lookup_dataset(id: &str) -> Option<&'static DatasetInfo> {
    let key = id.to_ascii_lowercase().replace('-', "");
    REGISTRY
        .iter()
        .find(|d| d.id == key || d.aliases.iter().any(|a| a.replace('_', "") == key.replace('_', "")))
}

/// Placeholder class names `000, 001, ...` for a registry dataset whose
/// image tree is not at hand.
pub fn indexed_class_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{i:03}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Base,
    Val,
    Novel,
}

impl FromStr for Section {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" | "train" => Ok(Section::Base),
            "val" | "validation" => Ok(Section::Val),
            "novel" | "test" => Ok(Section::Novel),
            other => Err(RsadError::config("split", format!("unknown section `{other}`"))),
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Base => "base",
            Section::Val => "val",
            Section::Novel => "novel",
        })
    }
}

/// Per-channel statistics on the `[0, 1]` pixel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Result<Self> {
        let (mut s, mut ss, mut n) = ([0f64; 3], [0f64; 3], 0u64);
        for img in images {
            for px in img.pixels() {
                for k in 0..3 {
                    let v = px[k] as f64 / 255.0;
                    s[k] += v;
                    ss[k] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(RsadError::input("normalization statistics need at least one pixel"));
        }
        let n = n as f64;
        let mean = s.map(|v| v / n);
        let std = [0, 1, 2].map(|k| (ss[k] / n - mean[k] * mean[k]).max(1e-12).sqrt() as f32);
        Ok(NormStats {
            mean: mean.map(|v| v as f32),
            std,
        })
    }
}

/// Disjoint base / val / novel class lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub dataset_id: String,
    pub seed: u64,
    pub base: Vec<String>,
    pub val: Vec<String>,
    pub novel: Vec<String>,
    pub norm: Option<NormStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum SplitRecord {
    Split { dataset: String, seed: u64 },
    Section { name: Section, classes: Vec<String> },
    Norm(NormStats),
}

impl SplitSpec {
    pub fn section(&self, s: Section) -> &[String] {
        match s {
            Section::Base => &self.base,
            Section::Val => &self.val,
            Section::Novel => &self.novel,
        }
    }

    pub fn to_ndjson(&self) -> String {
        let mut records = vec![SplitRecord::Split {
            dataset: self.dataset_id.clone(),
            seed: self.seed,
        }];
        for s in [Section::Base, Section::Val, Section::Novel] {
            records.push(SplitRecord::Section {
                name: s,
                classes: self.section(s).to_vec(),
            });
        }
        records.extend(self.norm.map(SplitRecord::Norm));
        records
            .iter()
            .map(|r| serde_json::to_string(r).expect("split record serializes") + "\n")
            .collect()
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let mut out = SplitSpec {
            dataset_id: String::new(),
            seed: 0,
            base: Vec::new(),
            val: Vec::new(),
            novel: Vec::new(),
            norm: None,
        };
        let mut saw_header = false;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: SplitRecord = serde_json::from_str(line)
                .map_err(|e| RsadError::input(format!("split file line {}: {e}", n + 1)))?;
            match record {
                SplitRecord::Split { dataset, seed } => {
                    out.dataset_id = dataset;
                    out.seed = seed;
                    saw_header = true;
                }
                SplitRecord::Section { name, classes } => match name {
                    Section::Base => out.base = classes,
                    Section::Val => out.val = classes,
                    Section::Novel => out.novel = classes,
                },
                SplitRecord::Norm(stats) => out.norm = Some(stats),
            }
        }
        if !saw_header {
            return Err(RsadError::input("split file lacks its header record"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_ndjson().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RsadError::io(path, e))?;
        SplitSpec::from_ndjson(&text).map_err(|e| match e {
            RsadError::Input(reason) => RsadError::corrupt(path, reason),
            other => other,
        })
    }
}

/// Shuffles `classes` with `seed` and cuts it into base / val / novel.
pub fn make_split(dataset_id: &str, classes: &[String], counts: (usize, usize, usize), seed: u64) -> Result<SplitSpec> {
    let (nb, nv, nn) = counts;
    if let Some(info) = lookup_dataset(dataset_id) {
        if classes.len() != info.classes {
            return Err(RsadError::config(
                "dataset",
                format!("{} has {} classes, got {}", info.id, info.classes, classes.len()),
            ));
        }
    }
    if nb + nv + nn != classes.len() {
        return Err(RsadError::config(
            "counts",
            format!("{nb}+{nv}+{nn} does not sum to the {} available classes", classes.len()),
        ));
    }
    let mut sorted = classes.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(RsadError::input("class names must be unique"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let mut take = |n: usize| {
        let mut part: Vec<String> = sorted.drain(..n).collect();
        part.sort();
        part
    };
    let base = take(nb);
    let val = take(nv);
    let novel = take(nn);
    Ok(SplitSpec {
        dataset_id: dataset_id.to_string(),
        seed,
        base,
        val,
        novel,
        norm: None,
    })
}

/// One image and its optional foreground prior.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub class: String,
    pub raw: RgbImage,
    pub prior: Option<RgbImage>,
}

/// Decoded images grouped by class.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    by_class: BTreeMap<String, Vec<usize>>,
}

fn shrink(img: RgbImage, max_short_side: Option<u32>) -> RgbImage {
    match max_short_side {
        Some(m) if img.width().min(img.height()) > m => {
            let k = m as f64 / img.width().min(img.height()) as f64;
            let (w, h) = (
                ((img.width() as f64 * k).round() as u32).max(1),
                ((img.height() as f64 * k).round() as u32).max(1),
            );
            imageops::resize(&img, w, h, FilterType::Triangle)
        }
        _ => img,
    }
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let mut by_class: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.class.clone()).or_default().push(i);
        }
        Dataset { samples, by_class }
    }

    /// Synthetic data with oracle priors: each ground-truth mask is used as the
    /// saliency map of a single detector.
    pub fn from_synthetic(data: &SynthData) -> Result<Self> {
        let samples = data
            .items
            .iter()
            .map(|item| {
                let map = SaliencyMap::new(
                    item.mask.width(),
                    item.mask.height(),
                    item.mask.pixels().map(|p| p[0] as f32 / 255.0).collect(),
                    "oracle",
                )?;
                let prior = saliency_prior::prior_from_maps(&item.image, &[map], DEFAULT_THRESHOLD, &item.id)?;
                Ok(Sample {
                    id: item.id.clone(),
                    class: item.class.clone(),
                    raw: item.image.clone(),
                    prior: Some(prior.pixels),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::from_samples(samples))
    }

    /// Reads `images/<class>/*` restricted to `classes`, attaching priors from
    /// a prior cache when given. Images listed as errors in the cache manifest
    /// are skipped. Images whose shorter side exceeds `max_short_side` are
    /// downscaled on load, together with their prior.
    pub fn load(
        images: &Path,
        prior_cache: Option<&Path>,
        classes: Option<&[String]>,
        max_short_side: Option<u32>,
    ) -> Result<Self> {
        let manifest = prior_cache
            .map(|dir| CacheManifest::load(&dir.join(saliency_prior::MANIFEST_FILE)))
            .transpose()?;
        let priors = manifest.as_ref().map(|m| m.by_id());
        let mut samples = Vec::new();
        for entry in list_image_tree(images)? {
            if classes.is_some_and(|c| !c.contains(&entry.class)) {
                continue;
            }
            let prior = match (&priors, prior_cache) {
                (Some(p), Some(root)) => match p.get(entry.id.as_str()) {
                    Some(rec) => Some(read_rgb(&root.join(&rec.prior))?),
                    None => continue,
                },
                _ => None,
            };
            let raw = read_rgb(&entry.path)?;
            if let Some(p) = &prior {
                if p.dimensions() != raw.dimensions() {
                    return Err(RsadError::input(format!("prior for {} differs in size from its image", entry.id)));
                }
            }
            samples.push(Sample {
                id: entry.id,
                class: entry.class,
                raw: shrink(raw, max_short_side),
                prior: prior.map(|p| shrink(p, max_short_side)),
            });
        }
        Ok(Dataset::from_samples(samples))
    }

    /// Raw images paired with ground-truth masks from a `masks/` tree, for
    /// generated data written by [`write_synthetic`].
    pub fn load_with_masks(root: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        for entry in list_image_tree(&root.join("images"))? {
            let raw = read_rgb(&entry.path)?;
            let mask_path = root.join("masks").join(format!("{}.png", entry.id));
            let mask = read_gray(&mask_path)?;
            let map = SaliencyMap::new(
                mask.width(),
                mask.height(),
                mask.pixels().map(|p| p[0] as f32 / 255.0).collect(),
                "oracle",
            )?;
            let prior = saliency_prior::prior_from_maps(&raw, &[map], DEFAULT_THRESHOLD, &entry.id)?;
            samples.push(Sample {
                id: entry.id,
                class: entry.class,
                raw,
                prior: Some(prior.pixels),
            });
        }
        Ok(Dataset::from_samples(samples))
    }

    pub fn classes(&self) -> Vec<String> {
        self.by_class.keys().cloned().collect()
    }

    pub fn has_priors(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.prior.is_some())
    }

    /// Sample indices for each of `classes`, in the given order.
    pub fn section(&self, classes: &[String]) -> Result<SectionView> {
        let members = classes
            .iter()
            .map(|c| {
                self.by_class
                    .get(c)
                    .cloned()
                    .ok_or_else(|| RsadError::input(format!("class `{c}` has no images in the dataset")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SectionView {
            classes: classes.to_vec(),
            members,
        })
    }
}

/// Classes of one split section and the dataset indices of their samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SectionView {
    pub classes: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into [`Dataset::samples`].
    pub sample: usize,
    /// Episode label in `0..way`.
    pub label: usize,
}

/// One N-way K-shot task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// Episode label to class name.
    pub class_map: Vec<String>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.label).collect()
    }
}

/// Draws `way` classes, then `shot + query` distinct samples per class, all
/// uniformly without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    section: &SectionView,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 || shot == 0 || query == 0 {
        return Err(RsadError::Sampling(format!(
            "way, shot and query must be positive (got {way}, {shot}, {query})"
        )));
    }
    if section.classes.len() < way {
        return Err(RsadError::Sampling(format!(
            "{way}-way episode needs {way} classes, section has {}",
            section.classes.len()
        )));
    }
    let picked = index::sample(rng, section.classes.len(), way).into_vec();
    let mut support = Vec::with_capacity(way * shot);
    let mut queries = Vec::with_capacity(way * query);
    let mut class_map = Vec::with_capacity(way);
    for (label, &c) in picked.iter().enumerate() {
        let members = &section.members[c];
        if members.len() < shot + query {
            return Err(RsadError::Sampling(format!(
                "class `{}` has {} images, needs shot + query = {}",
                section.classes[c],
                members.len(),
                shot + query
            )));
        }
        let chosen = index::sample(rng, members.len(), shot + query).into_vec();
        for (i, &m) in chosen.iter().enumerate() {
            let item = EpisodeItem {
                sample: members[m],
                label,
            };
            if i < shot {
                support.push(item);
            } else {
                queries.push(item);
            }
        }
        class_map.push(section.classes[c].clone());
    }
    Ok(Episode {
        way,
        shot,
        query_per_class: query,
        support,
        query: queries,
        class_map,
    })
}

/// Converts an RGB image to a normalized CHW buffer.
pub fn to_chw<T: Real>(img: &RgbImage, norm: &NormStats) -> Vec<T> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![T::zero(); 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for k in 0..3 {
            out[k * plane + i] = T::c(((px[k] as f32 / 255.0 - norm.mean[k]) / norm.std[k]) as f64);
        }
    }
    out
}

/// Network inputs for a list of episode items: `[n, 3, s, s]` raw and prior
/// tensors, the prior present only when requested.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub raw: Tensor<T>,
    pub prior: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

pub fn assemble<T: Real, R: Rng + ?Sized>(
    data: &Dataset,
    items: &[EpisodeItem],
    aug: &Augment,
    norm: &NormStats,
    with_prior: bool,
    rng: &mut R,
) -> Result<Batch<T>> {
    let s = aug.size as usize;
    let mut raw = Vec::with_capacity(items.len() * 3 * s * s);
    let mut prior = Vec::with_capacity(if with_prior { raw.capacity() } else { 0 });
    for item in items {
        let sample = &data.samples[item.sample];
        if with_prior {
            let p = sample
                .prior
                .as_ref()
                .ok_or_else(|| RsadError::config("priors", format!("no prior image for {}", sample.id)))?;
            let (a, b) = paired_augment(&sample.raw, p, aug, rng)?;
            raw.extend(to_chw::<T>(&a, norm));
            prior.extend(to_chw::<T>(&b, norm));
        } else {
            let draw = aug.draw(sample.raw.width(), sample.raw.height(), rng);
            raw.extend(to_chw::<T>(&aug.apply(&draw, &sample.raw), norm));
        }
    }
    let shape = [items.len(), 3, s, s];
    Ok(Batch {
        raw: Tensor::from_vec(&shape, raw),
        prior: with_prior.then(|| Tensor::from_vec(&shape, prior)),
        labels: items.iter().map(|i| i.label).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        indexed_class_names(n)
    }

    #[test]
    fn registry_splits_partition_the_classes() {
        for info in REGISTRY {
            let s = make_split(info.id, &names(info.classes), info.counts, 1).unwrap();
            assert_eq!((s.base.len(), s.val.len(), s.novel.len()), info.counts);
            let mut all: Vec<_> = [s.base.clone(), s.val.clone(), s.novel.clone()].concat();
            all.sort();
            assert_eq!(all, names(info.classes));
            assert_eq!(make_split(info.id, &names(info.classes), info.counts, 1).unwrap(), s);
        }
        assert!(matches!(
            make_split("cub", &names(200), (100, 50, 49), 1),
            Err(RsadError::Config { .. })
        ));
        assert!(lookup_dataset("CUB-200-2011").is_some());
    }

    #[test]
    fn split_file_round_trips() {
        let mut s = make_split("synthetic", &names(15), (10, 0, 5), 3).unwrap();
        s.norm = Some(NormStats {
            mean: [0.1, 0.2, 0.3],
            std: [0.5, 0.25, 0.125],
        });
        assert_eq!(SplitSpec::from_ndjson(&s.to_ndjson()).unwrap(), s);
    }

    fn section(classes: usize, per: usize) -> SectionView {
        SectionView {
            classes: names(classes),
            members: (0..classes).map(|c| (c * per..(c + 1) * per).collect()).collect(),
        }
    }

    #[test]
    fn episode_shapes_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&section(20, 30), 15, 5, 15, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (75, 225));
        let e = sample_episode(&section(5, 16), 5, 1, 15, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
        assert!(matches!(sample_episode(&section(4, 16), 5, 1, 15, &mut rng), Err(RsadError::Sampling(_))));
        assert!(matches!(sample_episode(&section(5, 15), 5, 1, 15, &mut rng), Err(RsadError::Sampling(_))));
        let a = sample_episode(&section(10, 20), 5, 1, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_episode(&section(10, 20), 5, 1, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn episodes_are_disjoint_and_balanced(seed in any::<u64>(), way in 2usize..6, shot in 1usize..4, q in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = sample_episode(&section(8, 10), way, shot, q, &mut rng).unwrap();
            let support: std::collections::HashSet<_> = e.support.iter().map(|i| i.sample).collect();
            prop_assert!(e.query.iter().all(|i| !support.contains(&i.sample)));
            for label in 0..way {
                prop_assert_eq!(e.support.iter().filter(|i| i.label == label).count(), shot);
                prop_assert_eq!(e.query.iter().filter(|i| i.label == label).count(), q);
            }
        }
    }
}
