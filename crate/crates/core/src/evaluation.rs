//! Episodic accuracy, Davies-Bouldin index, ablation registry and parameter
//! counting.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, to_chw, Augment, Dataset, Episode, SectionView};
use crate::error::{Result, RsadError};
use crate::nn::{Module, Real, Tensor};
use crate::rhs::{summarize, RhsMode};
use crate::training::{Model, Variant};

/// Images per encoder call when caching features.
const FEATURE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeShape {
    pub fn new(way: usize, shot: usize, query: usize) -> Self {
        EpisodeShape { way, shot, query }
    }
}

impl fmt::Display for EpisodeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-way {}-shot ({} queries/class)", self.way, self.shot, self.query)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub section: String,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    /// Percent.
    pub mean: f64,
    /// Half-width of the 95% interval, percent.
    pub ci95: f64,
    pub seed: u64,
    pub model_id: String,
}

impl EvalReport {
    pub fn line(&self) -> String {
        format!(
            "{} {} {}-way {}-shot: {:.2} +- {:.2} ({} episodes, seed {})",
            self.dataset, self.section, self.way, self.shot, self.mean, self.ci95, self.episodes, self.seed
        )
    }
}

/// Mean and normal-approximation 95% half-width of per-episode accuracies
/// (fractions in `[0, 1]`), both in percent.
pub fn mean_ci95(accuracies: &[f64]) -> (f64, f64) {
    let n = accuracies.len();
    assert!(n > 0, "at least one episode");
    let mean = neumaier_sum(accuracies.iter().copied()) / n as f64;
    if n == 1 {
        return (100.0 * mean, 0.0);
    }
    let var = neumaier_sum(accuracies.iter().map(|a| (a - mean) * (a - mean))) / (n - 1) as f64;
    (100.0 * mean, 100.0 * 1.96 * var.sqrt() / (n as f64).sqrt())
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Inference feature maps for a set of samples, keyed by dataset index.
#[derive(Clone, Debug)]
pub struct FeatureCache<T> {
    maps: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> FeatureCache<T> {
    /// Encodes every member of `section` once under the evaluation transform.
    pub fn build(model: &Model<T>, data: &Dataset, section: &SectionView) -> Result<Self> {
        let size = model.meta.backbone.input_size;
        let aug = Augment::eval(size as u32);
        let mut ids: Vec<usize> = section.members.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut maps = BTreeMap::new();
        for chunk in ids.chunks(FEATURE_BATCH) {
            let mut buf = Vec::with_capacity(chunk.len() * 3 * size * size);
            for &i in chunk {
                let raw = &data.samples[i].raw;
                let draw = aug.draw(raw.width(), raw.height(), &mut rng);
                buf.extend(to_chw::<T>(&aug.apply(&draw, raw), &model.meta.norm));
            }
            let x = Tensor::from_vec(&[chunk.len(), 3, size, size], buf);
            let feats = model.branch.encoder.encode(&x)?;
            for (k, &i) in chunk.iter().enumerate() {
                let one = feats.slice_lead(k, k + 1);
                let inner = one.shape()[1..].to_vec();
                maps.insert(i, one.reshape(&inner));
            }
        }
        Ok(FeatureCache { maps })
    }

    fn gather(&self, ids: impl Iterator<Item = usize>) -> Tensor<T> {
        let items: Vec<&Tensor<T>> = ids.map(|i| &self.maps[&i]).collect();
        Tensor::stack(&items)
    }

    /// Logits `[nq, way]` of one episode.
    pub fn episode_logits(&self, model: &Model<T>, ep: &Episode) -> Result<Tensor<T>> {
        let support = self.gather(ep.support.iter().map(|i| i.sample));
        let query = self.gather(ep.query.iter().map(|i| i.sample));
        model
            .branch
            .logits_from_features(&support, &ep.support_labels(), ep.way, &query, model.meta.tau)
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Fraction of queries whose argmax logit is the true label.
pub fn episode_accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let way = logits.shape()[1];
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(q, &y)| argmax(&logits.data()[q * way..(q + 1) * way]) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Episode `e` of an evaluation run draws from its own stream of the seed.
pub fn episode_rng(seed: u64, e: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(e as u64);
    rng
}

/// Per-episode accuracies of `model` on `episodes` episodes of `section`.
pub fn episode_accuracies<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    section: &SectionView,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(RsadError::config("episodes", "must be positive"));
    }
    let draws = (0..episodes)
        .map(|e| sample_episode(section, shape.way, shape.shot, shape.query, &mut episode_rng(seed, e)))
        .collect::<Result<Vec<_>>>()?;
    let cache = FeatureCache::build(model, data, section)?;
    draws
        .iter()
        .map(|ep| Ok(episode_accuracy(&cache.episode_logits(model, ep)?, &ep.query_labels())))
        .collect()
}

/// Identifies what is being evaluated in the report.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalContext {
    pub dataset: String,
    pub section: String,
    pub model_id: String,
}

/// Mean accuracy with a 95% interval over `episodes` seeded episodes.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    section: &SectionView,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
    ctx: &EvalContext,
) -> Result<EvalReport> {
    let acc = episode_accuracies(model, data, section, shape, episodes, seed)?;
    let (mean, ci95) = mean_ci95(&acc);
    Ok(EvalReport {
        dataset: ctx.dataset.clone(),
        section: ctx.section.clone(),
        way: shape.way,
        shot: shape.shot,
        query: shape.query,
        episodes,
        mean,
        ci95,
        seed,
        model_id: ctx.model_id.clone(),
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Davies-Bouldin index with arithmetic-mean centroids and mean
/// point-to-centroid scatter.
pub fn dbi(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(RsadError::input(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let dim = embeddings.first().map_or(0, Vec::len);
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(RsadError::input("embeddings differ in dimension"));
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (e, &l) in embeddings.iter().zip(labels) {
        groups.entry(l).or_default().push(e);
    }
    if groups.len() < 2 {
        return Err(RsadError::input("DBI needs at least two clusters"));
    }
    let ids: Vec<usize> = groups.keys().copied().collect();
    let mut centroids = Vec::with_capacity(ids.len());
    let mut scatter = Vec::with_capacity(ids.len());
    for pts in groups.values() {
        let n = pts.len() as f64;
        let c: Vec<f64> = (0..dim).map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n).collect();
        scatter.push(pts.iter().map(|p| euclid(p, &c)).sum::<f64>() / n);
        centroids.push(c);
    }
    let k = ids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let d = euclid(&centroids[i], &centroids[j]);
            if d == 0.0 {
                return Err(RsadError::DegenerateCentroids(ids[i.min(j)], ids[i.max(j)]));
            }
            worst = worst.max((scatter[i] + scatter[j]) / d);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Summarized query embeddings of the main branch pooled over `episodes`
/// episodes, labelled by section class index.
pub fn query_embeddings<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    section: &SectionView,
    shape: EpisodeShape,
    episodes: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let cache = FeatureCache::build(model, data, section)?;
    let class_of: BTreeMap<&str, usize> = section.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let (mut embs, mut labels) = (Vec::new(), Vec::new());
    for e in 0..episodes {
        let ep = sample_episode(section, shape.way, shape.shot, shape.query, &mut episode_rng(seed, e))?;
        for item in &ep.query {
            let emb = summarize(&cache.maps[&item.sample]);
            embs.push(emb.iter().map(|v| v.to_f64().expect("finite")).collect());
            labels.push(class_of[ep.class_map[item.label].as_str()]);
        }
    }
    Ok((embs, labels))
}

/// Parameter count in millions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Complexity {
    pub params: usize,
    pub params_m: f64,
}

impl fmt::Display for Complexity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}M params", self.params_m)
    }
}

pub fn report_complexity<T: Real>(module: &dyn Module<T>) -> Complexity {
    let params = module.num_params();
    Complexity {
        params,
        params_m: (params as f64 / 1e4).round() / 100.0,
    }
}

/// One ablation row: which components are active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub sag: bool,
    pub rhs: RhsMode,
    pub alpha: f64,
    pub variant: Variant,
}

impl AblationSpec {
    pub fn new(name: &str, sag: bool, rhs: RhsMode, alpha: f64) -> Self {
        AblationSpec {
            name: name.to_string(),
            sag,
            rhs,
            alpha,
            variant: Variant::Mutual,
        }
    }
}

/// Named groups of ablation rows. `alpha` is the distillation weight used by
/// rows that do not sweep it.
pub fn ablation_preset(name: &str, alpha: f64) -> Result<Vec<AblationSpec>> {
    let rows = match name {
        "components" => vec![
            AblationSpec::new("baseline", false, RhsMode::Off, 0.0),
            AblationSpec::new("sag", true, RhsMode::Off, alpha),
            AblationSpec::new("rhs", false, RhsMode::Highlight, 0.0),
            AblationSpec::new("sag+rhs", true, RhsMode::Highlight, alpha),
        ],
        "sag" => vec![
            AblationSpec::new("sag-off", false, RhsMode::Highlight, 0.0),
            AblationSpec::new("sag-on", true, RhsMode::Highlight, alpha),
        ],
        "cross_attention" => vec![
            AblationSpec::new("highlight", true, RhsMode::Highlight, alpha),
            AblationSpec::new("cross-attention", true, RhsMode::CrossAttention, alpha),
        ],
        "alpha" => [0.1, 1.0, 5.0, 10.0]
            .iter()
            .map(|&a| AblationSpec::new(&format!("alpha={a}"), true, RhsMode::Highlight, a))
            .collect(),
        "distillation" => vec![
            AblationSpec::new("mutual", true, RhsMode::Highlight, alpha),
            AblationSpec {
                variant: Variant::UdKd,
                ..AblationSpec::new("ud-kd", true, RhsMode::Highlight, alpha)
            },
            AblationSpec {
                variant: Variant::UdKdp,
                ..AblationSpec::new("ud-kdp", true, RhsMode::Highlight, alpha)
            },
        ],
        other => {
            return Err(RsadError::config(
                "preset",
                format!("unknown ablation preset `{other}` (components, sag, cross_attention, alpha, distillation)"),
            ))
        }
    };
    Ok(rows)
}

/// Fixed-width comparison table of ablation results.
pub fn ablation_table(rows: &[(AblationSpec, EvalReport)]) -> String {
    let mut out = format!("{:<18} {:>5} {:>16} {:>7} {:>8}  {}\n", "row", "sag", "rhs", "alpha", "variant", "accuracy");
    for (spec, r) in rows {
        out += &format!(
            "{:<18} {:>5} {:>16} {:>7} {:>8}  {:.2} +- {:.2}\n",
            spec.name,
            if spec.sag { "on" } else { "off" },
            spec.rhs.to_string(),
            spec.alpha,
            spec.variant.to_string(),
            r.mean,
            r.ci95
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dbi_hand_cases() {
        let pts = vec![vec![-1.0], vec![1.0], vec![9.0], vec![11.0]];
        assert!((dbi(&pts, &[0, 0, 1, 1]).unwrap() - 0.2).abs() < 1e-12);
        let tight = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(dbi(&tight, &[0, 0, 1]).unwrap(), 0.0);
        assert!(matches!(dbi(&tight, &[0, 0, 0]), Err(RsadError::Input(_))));
        let same = vec![vec![-1.0], vec![1.0], vec![0.0]];
        assert!(matches!(dbi(&same, &[0, 0, 1]), Err(RsadError::DegenerateCentroids(0, 1))));
    }

    #[test]
    fn ci_of_constant_accuracy_is_zero() {
        assert_eq!(mean_ci95(&[1.0; 600]), (100.0, 0.0));
        let (m, h) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 50.0);
        assert!((h - 100.0 * 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn complexity_rounds_to_two_decimals() {
        struct Fake;
        impl Module<f32> for Fake {
            fn visit(&self, _: &str, f: &mut dyn FnMut(&str, crate::nn::Entry<'_, f32>)) {
                let p = crate::nn::Param::new(Tensor::zeros(&[8_521_088]));
                f("w", crate::nn::Entry::Param(&p));
            }
            fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, crate::nn::EntryMut<'_, f32>)) {}
        }
        let c = report_complexity(&Fake);
        assert_eq!(c.params_m, 8.52);
        assert_eq!(c.to_string(), "8.52M params");
    }

    #[test]
    fn presets_have_expected_rows() {
        assert_eq!(ablation_preset("alpha", 1.0).unwrap().len(), 4);
        let c = ablation_preset("components", 5.0).unwrap();
        assert_eq!((c[0].sag, c[0].rhs), (false, RhsMode::Off));
        assert!(ablation_preset("cross_attention", 1.0).unwrap().iter().any(|r| r.rhs == RhsMode::CrossAttention));
        assert!(ablation_preset("nope", 1.0).is_err());
    }

    fn translate(points: &[Vec<f64>], shift: &[f64], scale: f64) -> Vec<Vec<f64>> {
        points
            .iter()
            .map(|p| p.iter().zip(shift).map(|(x, s)| x * scale + s).collect())
            .collect()
    }

    proptest! {
        #[test]
        fn dbi_is_translation_and_scale_invariant(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 9),
            shift in prop::collection::vec(-10.0f64..10.0, 3),
            scale in 0.1f64..10.0,
        ) {
            let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
            let base = dbi(&pts, &labels).unwrap();
            let moved = dbi(&translate(&pts, &shift, 1.0), &labels).unwrap();
            let scaled = dbi(&translate(&pts, &shift, scale), &labels).unwrap();
            prop_assert!((base - moved).abs() < 1e-9 * base.max(1.0));
            prop_assert!((base - scaled).abs() < 1e-9 * base.max(1.0));
        }

        #[test]
        fn argmax_accuracy_ignores_monotone_transforms(logits in prop::collection::vec(-3.0f64..3.0, 20)) {
            let t = Tensor::from_vec(&[4, 5], logits.clone());
            let labels = [0, 1, 2, 3];
            let warped = t.map(|v| v.exp() * 2.0 + 1.0);
            prop_assert_eq!(episode_accuracy(&t, &labels), episode_accuracy(&warped, &labels));
        }
    }
}
