use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, Encoder};
use crate::data::NormStats;
use crate::error::{Result, RsadError};
use crate::losses::{cosine_logits, cosine_logits_backward};
use crate::nn::module::join;
use crate::nn::{Entry, EntryMut, Mode, Module, Real, Tensor};
use crate::rhs::{compute_prototypes, compute_prototypes_backward, Rhs, RhsMode, RhsOutput};

/// One learner: a feature encoder followed by the highlight-and-summarize head.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub encoder: Encoder<T>,
    pub rhs: Rhs<T>,
    cache: Option<BranchCache<T>>,
}

#[derive(Clone, Debug)]
struct BranchCache<T> {
    labels: Vec<usize>,
    shots: usize,
    tau: f64,
    emb: RhsOutput<T>,
}

impl<T: Real> Branch<T> {
    pub fn new<R: Rng + ?Sized>(backbone: &BackboneConfig, rhs: RhsMode, rng: &mut R) -> Result<Self> {
        let encoder = build_backbone(backbone, rng)?;
        let rhs = Rhs::new(rhs, backbone.out_channels(), rng);
        Ok(Branch::from_parts(encoder, rhs))
    }

    pub fn from_parts(encoder: Encoder<T>, rhs: Rhs<T>) -> Self {
        Branch {
            encoder,
            rhs,
            cache: None,
        }
    }

    /// Episode logits `[nq, way]` from raw support and query images. In
    /// `Mode::Train` the intermediates for [`Branch::backward`] are kept and
    /// batch-norm statistics move.
    pub fn forward(
        &mut self,
        support: &Tensor<T>,
        labels: &[usize],
        way: usize,
        query: &Tensor<T>,
        tau: f64,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let ns = support.shape()[0];
        let nq = query.shape()[0];
        let feats = self.encoder.forward(Tensor::concat(&[support, query]), mode)?;
        let protos = compute_prototypes(&feats.slice_lead(0, ns), labels, way)?;
        let qf = feats.slice_lead(ns, ns + nq);
        let train = mode == Mode::Train;
        let emb = self.rhs.forward(&protos, &qf, train)?;
        let logits = cosine_logits(&emb.query_emb, &emb.proto_emb, tau);
        if train {
            self.cache = Some(BranchCache {
                labels: labels.to_vec(),
                shots: ns,
                tau,
                emb,
            });
        }
        Ok(logits)
    }

    /// Backpropagates logit gradients through head and encoder.
    pub fn backward(&mut self, d_logits: &Tensor<T>) {
        let cache = self.cache.take().expect("branch backward without train forward");
        let (dq, dp) = cosine_logits_backward(&cache.emb.query_emb, &cache.emb.proto_emb, d_logits, cache.tau);
        let (d_protos, d_queries) = self.rhs.backward(&dp, &dq);
        let d_support = compute_prototypes_backward(&d_protos, &cache.labels);
        debug_assert_eq!(d_support.shape()[0], cache.shots);
        self.encoder.backward(Tensor::concat(&[&d_support, &d_queries]));
    }

    /// Logits from precomputed inference features.
    pub fn logits_from_features(
        &self,
        support: &Tensor<T>,
        labels: &[usize],
        way: usize,
        query: &Tensor<T>,
        tau: f64,
    ) -> Result<Tensor<T>> {
        let protos = compute_prototypes(support, labels, way)?;
        let emb = self.rhs.infer(&protos, query)?;
        Ok(cosine_logits(&emb.query_emb, &emb.proto_emb, tau))
    }

    /// Same architecture, for checkpoint compatibility checks.
    pub fn same_shape(&self, other: &Branch<T>) -> bool {
        self.encoder.config() == other.encoder.config() && self.rhs.mode == other.rhs.mode
    }
}

impl<T: Real> Module<T> for Branch<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.rhs.visit(&join(prefix, "rhs"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.rhs.visit_mut(&join(prefix, "rhs"), f);
    }
}

/// Settings an inference model needs besides its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub backbone: BackboneConfig,
    pub rhs: RhsMode,
    pub tau: f64,
    pub norm: NormStats,
}

/// The deployable main branch.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub meta: ModelMeta,
    pub branch: Branch<T>,
}

impl<T: Real> Model<T> {
    pub fn new(meta: ModelMeta, branch: Branch<T>) -> Result<Self> {
        if branch.encoder.config() != &meta.backbone || branch.rhs.mode != meta.rhs {
            return Err(RsadError::input("model metadata does not describe the branch"));
        }
        Ok(Model { meta, branch })
    }

    pub fn num_params(&self) -> usize {
        self.branch.num_params()
    }
}
