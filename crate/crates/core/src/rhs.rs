//! Query-conditioned prototype refinement and spatial summarization.
//!
//! Feature maps are `c x h x w` and are read as `c x hw` descriptor matrices:
//! column `j` is the local descriptor at spatial position `j`.
//!
//! For a prototype map `P` and a query map `F`, the highlight step projects
//! `K = Wk P` and `Q = Wq F`, builds the relation matrix
//! `M_ij = softmax_j cos(Q_:i, K_:j)`, mixes `S_:i = sum_j M_ij K_:j` and
//! returns `S + P`. Summarize pools each channel to `mean + max`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RsadError};
use crate::nn::functional::{softmax_backward, softmax_into, unit_columns, unit_columns_backward};
use crate::nn::module::join;
use crate::nn::{matmul, Entry, EntryMut, Module, Param, Real, Tensor};

/// How prototypes are refined before summarization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsMode {
    /// Cosine relation matrix over key/query projections, residual mix.
    Highlight,
    /// Prototypes are summarized as-is; no projections.
    Off,
    /// Scaled dot-product attention with a separate value projection.
    CrossAttention,
}

impl std::str::FromStr for RhsMode {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "on" | "highlight" | "rhs" => Ok(RhsMode::Highlight),
            "off" | "none" => Ok(RhsMode::Off),
            "cross_attention" | "ca" => Ok(RhsMode::CrossAttention),
            other => Err(RsadError::config("rhs", format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RhsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RhsMode::Highlight => "highlight",
            RhsMode::Off => "off",
            RhsMode::CrossAttention => "cross_attention",
        })
    }
}

/// Per-class mean of the support feature maps.
///
/// `support` is `[b, c, h, w]` with `labels[i] < way`; returns `[way, c, h, w]`.
pub fn compute_prototypes<T: Real>(support: &Tensor<T>, labels: &[usize], way: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = support.dims4();
    if labels.len() != b {
        return Err(RsadError::input(format!("{} labels for {b} support maps", labels.len())));
    }
    let mut out = Tensor::zeros(&[way, c, h, w]);
    let mut counts = vec![0usize; way];
    for (i, &y) in labels.iter().enumerate() {
        if y >= way {
            return Err(RsadError::input(format!("label {y} outside {way}-way episode")));
        }
        counts[y] += 1;
        for (o, &v) in out.item_mut(y).iter_mut().zip(support.item(i)) {
            *o += v;
        }
    }
    for (n, &k) in counts.iter().enumerate() {
        if k == 0 {
            return Err(RsadError::input(format!("class {n} has no support maps")));
        }
        let inv = T::one() / T::c(k as f64);
        out.item_mut(n).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(out)
}

/// Scatters prototype gradients back onto the support maps.
pub fn compute_prototypes_backward<T: Real>(d_protos: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let way = d_protos.shape()[0];
    let mut counts = vec![0usize; way];
    labels.iter().for_each(|&y| counts[y] += 1);
    let mut shape = d_protos.shape().to_vec();
    shape[0] = labels.len();
    let mut out = Tensor::zeros(&shape);
    for (i, &y) in labels.iter().enumerate() {
        let inv = T::one() / T::c(counts[y] as f64);
        for (o, &g) in out.item_mut(i).iter_mut().zip(d_protos.item(y)) {
            *o = g * inv;
        }
    }
    out
}

fn descriptors<T: Real>(map: &Tensor<T>) -> (usize, usize) {
    let s = map.shape();
    (s[0], s[1..].iter().product())
}

/// Row-stochastic `hw x hw` relation matrix between a projected query map and
/// a projected prototype map, both `c x h x w`.
pub fn relation_matrix<T: Real>(q_map: &Tensor<T>, k_map: &Tensor<T>) -> Result<Tensor<T>> {
    if q_map.shape() != k_map.shape() {
        return Err(RsadError::input(format!(
            "relation matrix shapes differ: {:?} vs {:?}",
            q_map.shape(),
            k_map.shape()
        )));
    }
    let (c, hw) = descriptors(q_map);
    let (qd, _) = unit_columns(q_map.data(), c, hw);
    let (kd, _) = unit_columns(k_map.data(), c, hw);
    Ok(Tensor::from_vec(&[hw, hw], scores_to_relation(&qd, &kd, c, hw, T::one())))
}

/// `softmax_j(scale * <qd_:i, kd_:j>)`, row-major `hw x hw`.
fn scores_to_relation<T: Real>(qd: &[T], kd: &[T], c: usize, hw: usize, scale: T) -> Vec<T> {
    let mut scores = vec![T::zero(); hw * hw];
    matmul(hw, c, hw, qd, true, kd, false, T::zero(), &mut scores);
    let mut m = vec![T::zero(); hw * hw];
    for i in 0..hw {
        let row = &mut scores[i * hw..(i + 1) * hw];
        row.iter_mut().for_each(|v| *v *= scale);
        softmax_into(row, &mut m[i * hw..(i + 1) * hw]);
    }
    m
}

/// Per-channel `mean + max` over the spatial positions of a `c x ...` map.
pub fn summarize<T: Real>(map: &Tensor<T>) -> Vec<T> {
    let (c, hw) = descriptors(map);
    summarize_slice(map.data(), c, hw).0
}

fn summarize_slice<T: Real>(x: &[T], c: usize, hw: usize) -> (Vec<T>, Vec<u32>) {
    let inv = T::one() / T::c(hw as f64);
    let mut out = Vec::with_capacity(c);
    let mut arg = Vec::with_capacity(c);
    for ch in 0..c {
        let row = &x[ch * hw..(ch + 1) * hw];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(row.iter().copied().sum::<T>() * inv + row[best]);
        arg.push(best as u32);
    }
    (out, arg)
}

fn summarize_backward<T: Real>(de: &[T], arg: &[u32], hw: usize, dx: &mut [T]) {
    let inv = T::one() / T::c(hw as f64);
    for (ch, (&g, &a)) in de.iter().zip(arg).enumerate() {
        let row = &mut dx[ch * hw..(ch + 1) * hw];
        let share = g * inv;
        row.iter_mut().for_each(|v| *v += share);
        row[a as usize] += g;
    }
}

/// Contextual embeddings of one episode.
#[derive(Clone, Debug)]
pub struct RhsOutput<T> {
    /// `[queries, way, c]`: the refined prototype embedding per (query, class).
    pub proto_emb: Tensor<T>,
    /// `[queries, c]`: summarized raw query maps.
    pub query_emb: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Side<T> {
    /// Projection `W x`, `c x hw`.
    proj: Vec<T>,
    /// Column directions of `proj` (cosine mode) or `proj` itself.
    dirs: Vec<T>,
    norms: Vec<T>,
}

#[derive(Clone, Debug)]
struct RhsCache<T> {
    protos: Tensor<T>,
    queries: Tensor<T>,
    keys: Vec<Side<T>>,
    values: Vec<Vec<T>>,
    qs: Vec<Side<T>>,
    /// Relation matrices, indexed `q * way + n`.
    relations: Vec<Vec<T>>,
    proto_arg: Vec<Vec<u32>>,
    query_arg: Vec<Vec<u32>>,
}

/// Highlight-and-summarize head with its own projections.
#[derive(Clone, Debug)]
pub struct Rhs<T> {
    pub mode: RhsMode,
    pub channels: usize,
    pub wk: Option<Param<T>>,
    pub wq: Option<Param<T>>,
    pub wv: Option<Param<T>>,
    cache: Option<RhsCache<T>>,
}

impl<T: Real> Rhs<T> {
    /// Square, bias-free `c x c` projections with fan-out normal init.
    pub fn new<R: Rng + ?Sized>(mode: RhsMode, channels: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / channels as f64).sqrt()).expect("valid std");
        let mut proj = || {
            Param::new(Tensor::from_fn(&[channels, channels], |_| T::c(normal.sample(rng))))
        };
        let (wk, wq, wv) = match mode {
            RhsMode::Off => (None, None, None),
            RhsMode::Highlight => (Some(proj()), Some(proj()), None),
            RhsMode::CrossAttention => (Some(proj()), Some(proj()), Some(proj())),
        };
        Rhs {
            mode,
            channels,
            wk,
            wq,
            wv,
            cache: None,
        }
    }

    fn weight(p: &Option<Param<T>>) -> &[T] {
        p.as_ref().expect("projection present for this mode").value.data()
    }

    fn scale(&self) -> T {
        match self.mode {
            RhsMode::CrossAttention => T::one() / T::c(self.channels as f64).sqrt(),
            _ => T::one(),
        }
    }

    fn side(&self, w: &Option<Param<T>>, x: &[T], hw: usize) -> Side<T> {
        let c = self.channels;
        let mut proj = vec![T::zero(); c * hw];
        matmul(c, c, hw, Self::weight(w), false, x, false, T::zero(), &mut proj);
        let (dirs, norms) = match self.mode {
            RhsMode::Highlight => unit_columns(&proj, c, hw),
            _ => (proj.clone(), Vec::new()),
        };
        Side { proj, dirs, norms }
    }

    fn check(&self, map: &Tensor<T>) -> Result<()> {
        if map.shape().first() != Some(&self.channels) {
            return Err(RsadError::input(format!(
                "expected {} channels, got map of shape {:?}",
                self.channels,
                map.shape()
            )));
        }
        Ok(())
    }

    /// Refined prototype `S + P` for one (prototype, query) pair, `c x h x w`.
    /// In `Off` mode the prototype is returned unchanged.
    pub fn highlight(&self, pt: &Tensor<T>, fq: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(pt)?;
        if pt.shape() != fq.shape() {
            return Err(RsadError::input(format!(
                "prototype {:?} and query {:?} shapes differ",
                pt.shape(),
                fq.shape()
            )));
        }
        if self.mode == RhsMode::Off {
            return Ok(pt.clone());
        }
        let (_, hw) = descriptors(pt);
        let k = self.side(&self.wk, pt.data(), hw);
        let q = self.side(&self.wq, fq.data(), hw);
        let m = scores_to_relation(&q.dirs, &k.dirs, self.channels, hw, self.scale());
        let values = match self.mode {
            RhsMode::CrossAttention => self.side(&self.wv, pt.data(), hw).proj,
            _ => k.proj,
        };
        Ok(Tensor::from_vec(pt.shape(), self.mix(&values, &m, pt.data(), hw)))
    }

    /// `values * M^T + residual`.
    fn mix(&self, values: &[T], m: &[T], residual: &[T], hw: usize) -> Vec<T> {
        let mut out = residual.to_vec();
        matmul(self.channels, hw, hw, values, false, m, true, T::one(), &mut out);
        out
    }

    /// Embeds every (query, class) pair of an episode. `protos` is
    /// `[way, c, h, w]`, `queries` is `[nq, c, h, w]`. With `train` set the
    /// intermediates needed by [`Rhs::backward`] are kept.
    pub fn forward(&mut self, protos: &Tensor<T>, queries: &Tensor<T>, train: bool) -> Result<RhsOutput<T>> {
        let (out, cache) = self.run(protos, queries, train)?;
        if train {
            self.cache = cache;
        }
        Ok(out)
    }

    /// Inference-only [`Rhs::forward`]; does not touch the backward cache.
    pub fn infer(&self, protos: &Tensor<T>, queries: &Tensor<T>) -> Result<RhsOutput<T>> {
        Ok(self.run(protos, queries, false)?.0)
    }

    fn run(&self, protos: &Tensor<T>, queries: &Tensor<T>, train: bool) -> Result<(RhsOutput<T>, Option<RhsCache<T>>)> {
        let (way, c, h, w) = protos.dims4();
        let (nq, qc, qh, qw) = queries.dims4();
        if c != self.channels || (qc, qh, qw) != (c, h, w) {
            return Err(RsadError::input(format!(
                "prototype {:?} and query {:?} maps do not match a {}-channel head",
                protos.shape(),
                queries.shape(),
                self.channels
            )));
        }
        let hw = h * w;
        let mut query_emb = Tensor::zeros(&[nq, c]);
        let mut query_arg = Vec::with_capacity(nq);
        for q in 0..nq {
            let (e, a) = summarize_slice(queries.item(q), c, hw);
            query_emb.item_mut(q).copy_from_slice(&e);
            query_arg.push(a);
        }
        let mut proto_emb = Tensor::zeros(&[nq, way, c]);
        let mut proto_arg = Vec::with_capacity(nq * way);
        let mut relations = Vec::new();
        let (mut keys, mut values, mut qs) = (Vec::new(), Vec::new(), Vec::new());
        if self.mode == RhsMode::Off {
            for n in 0..way {
                let (e, a) = summarize_slice(protos.item(n), c, hw);
                for q in 0..nq {
                    proto_emb.item_mut(q)[n * c..(n + 1) * c].copy_from_slice(&e);
                }
                proto_arg.push(a);
            }
        } else {
            keys = (0..way).map(|n| self.side(&self.wk, protos.item(n), hw)).collect();
            values = match self.mode {
                RhsMode::CrossAttention => (0..way)
                    .map(|n| self.side(&self.wv, protos.item(n), hw).proj)
                    .collect(),
                _ => keys.iter().map(|k| k.proj.clone()).collect(),
            };
            qs = (0..nq).map(|q| self.side(&self.wq, queries.item(q), hw)).collect();
            let scale = self.scale();
            for q in 0..nq {
                for n in 0..way {
                    let m = scores_to_relation(&qs[q].dirs, &keys[n].dirs, c, hw, scale);
                    let refined = self.mix(&values[n], &m, protos.item(n), hw);
                    let (e, a) = summarize_slice(&refined, c, hw);
                    proto_emb.item_mut(q)[n * c..(n + 1) * c].copy_from_slice(&e);
                    proto_arg.push(a);
                    if train {
                        relations.push(m);
                    }
                }
            }
        }
        let cache = train.then(|| RhsCache {
            protos: protos.clone(),
            queries: queries.clone(),
            keys,
            values,
            qs,
            relations,
            proto_arg,
            query_arg,
        });
        Ok((RhsOutput { proto_emb, query_emb }, cache))
    }

    /// Gradients w.r.t. the prototype and query maps given gradients of the
    /// embeddings. Projection gradients accumulate into the parameters.
    pub fn backward(&mut self, d_proto_emb: &Tensor<T>, d_query_emb: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let cache = self.cache.take().expect("rhs backward without train forward");
        let (way, c, h, w) = cache.protos.dims4();
        let nq = cache.queries.shape()[0];
        let hw = h * w;
        let mut d_protos = Tensor::zeros(cache.protos.shape());
        let mut d_queries = Tensor::zeros(cache.queries.shape());
        for q in 0..nq {
            summarize_backward(d_query_emb.item(q), &cache.query_arg[q], hw, d_queries.item_mut(q));
        }
        if self.mode == RhsMode::Off {
            for n in 0..way {
                let mut de = vec![T::zero(); c];
                for q in 0..nq {
                    for (a, &g) in de.iter_mut().zip(&d_proto_emb.item(q)[n * c..(n + 1) * c]) {
                        *a += g;
                    }
                }
                summarize_backward(&de, &cache.proto_arg[n], hw, d_protos.item_mut(n));
            }
            return (d_protos, d_queries);
        }
        let scale = self.scale();
        let cosine = self.mode == RhsMode::Highlight;
        // gradients w.r.t. projected maps
        let mut d_kproj = vec![vec![T::zero(); c * hw]; way];
        let mut d_kdirs = vec![vec![T::zero(); c * hw]; way];
        let mut d_vals = vec![vec![T::zero(); c * hw]; way];
        let mut d_qdirs = vec![vec![T::zero(); c * hw]; nq];
        let mut d_ref = vec![T::zero(); c * hw];
        let mut d_m = vec![T::zero(); hw * hw];
        let mut d_s = vec![T::zero(); hw * hw];
        for q in 0..nq {
            for n in 0..way {
                let pair = q * way + n;
                let m = &cache.relations[pair];
                d_ref.fill(T::zero());
                summarize_backward(
                    &d_proto_emb.item(q)[n * c..(n + 1) * c],
                    &cache.proto_arg[pair],
                    hw,
                    &mut d_ref,
                );
                // residual path
                for (a, &g) in d_protos.item_mut(n).iter_mut().zip(&d_ref) {
                    *a += g;
                }
                // refined = V M^T: dV += dR M, dM = dR^T V
                matmul(c, hw, hw, &d_ref, false, m, false, T::one(), &mut d_vals[n]);
                matmul(hw, c, hw, &d_ref, true, &cache.values[n], false, T::zero(), &mut d_m);
                for i in 0..hw {
                    let r = i * hw..(i + 1) * hw;
                    softmax_backward(&m[r.clone()], &d_m[r.clone()], &mut d_s[r]);
                }
                d_s.iter_mut().for_each(|v| *v *= scale);
                // scores = qd^T kd: d qd = kd dS^T, d kd = qd dS
                matmul(c, hw, hw, &cache.keys[n].dirs, false, &d_s, true, T::one(), &mut d_qdirs[q]);
                matmul(c, hw, hw, &cache.qs[q].dirs, false, &d_s, false, T::one(), &mut d_kdirs[n]);
            }
        }
        for n in 0..way {
            if cosine {
                let k = &cache.keys[n];
                unit_columns_backward(&k.dirs, &k.norms, &d_kdirs[n], c, hw, &mut d_kproj[n]);
                for (a, &g) in d_kproj[n].iter_mut().zip(&d_vals[n]) {
                    *a += g;
                }
            } else {
                d_kproj[n].copy_from_slice(&d_kdirs[n]);
            }
        }
        let d_qproj: Vec<Vec<T>> = (0..nq)
            .map(|q| {
                if cosine {
                    let s = &cache.qs[q];
                    let mut d = vec![T::zero(); c * hw];
                    unit_columns_backward(&s.dirs, &s.norms, &d_qdirs[q], c, hw, &mut d);
                    d
                } else {
                    d_qdirs[q].clone()
                }
            })
            .collect();
        // projections: proj = W x
        let project_back = |w: &mut Param<T>, x: &Tensor<T>, d_proj: &[Vec<T>], dx: &mut Tensor<T>| {
            for (i, d) in d_proj.iter().enumerate() {
                matmul(c, hw, c, d, false, x.item(i), true, T::one(), w.grad.data_mut());
                matmul(c, c, hw, w.value.data(), true, d, false, T::one(), dx.item_mut(i));
            }
        };
        project_back(self.wk.as_mut().expect("key projection"), &cache.protos, &d_kproj, &mut d_protos);
        project_back(self.wq.as_mut().expect("query projection"), &cache.queries, &d_qproj, &mut d_queries);
        if let Some(wv) = self.wv.as_mut() {
            project_back(wv, &cache.protos, &d_vals, &mut d_protos);
        }
        (d_protos, d_queries)
    }
}

impl<T: Real> Module<T> for Rhs<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (name, p) in [("wk", &self.wk), ("wq", &self.wq), ("wv", &self.wv)] {
            if let Some(p) = p {
                f(&join(prefix, name), Entry::Param(p));
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (name, p) in [("wk", &mut self.wk), ("wq", &mut self.wq), ("wv", &mut self.wv)] {
            if let Some(p) = p {
                f(&join(prefix, name), EntryMut::Param(p));
            }
        }
    }
}
