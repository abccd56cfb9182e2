//! Whole-classification pre-training and dual-branch episodic training.

pub mod branch;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig, BackboneKind, Encoder};
use crate::data::{assemble, sample_episode, to_chw, Augment, Dataset, Episode, NormStats, SectionView, SplitSpec};
use crate::error::{Result, RsadError};
use crate::evaluation::{episode_accuracies, mean_ci95, EpisodeShape};
use crate::losses::{
    cross_entropy, cross_entropy_grad, kl_div, kl_grad_source, sag_grads, sag_loss, softmax_rows, total_loss,
};
use crate::nn::layers::{global_avg_pool, global_avg_pool_backward};
use crate::nn::module::join;
use crate::nn::{Entry, EntryMut, Linear, Mode, Module, MultiStep, Optimizer, OptimizerSpec, Real, Tensor};
use crate::rhs::{Rhs, RhsMode};

pub use branch::{Branch, Model, ModelMeta};
use checkpoint::{
    collect_tensors, expect_kind, parse_meta, read_checkpoint, restore_branch, restore_tensors, write_checkpoint,
    CheckpointKind, TensorMap,
};

/// How the two branches exchange knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Symmetric KL in both directions; both branches learn from each other.
    Mutual,
    /// Main branch distils from the prior branch; the prior branch still
    /// trains on its own classification loss.
    UdKd,
    /// As `UdKd` with the prior branch frozen.
    UdKdp,
}

impl FromStr for Variant {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mutual" | "sag" => Ok(Variant::Mutual),
            "ud_kd" | "udkd" => Ok(Variant::UdKd),
            "ud_kdp" | "udkdp" => Ok(Variant::UdKdp),
            other => Err(RsadError::config("variant", format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mutual => "mutual",
            Variant::UdKd => "ud_kd",
            Variant::UdKdp => "ud_kdp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Episodic,
}

impl FromStr for Stage {
    type Err = RsadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pretrain" => Ok(Stage::Pretrain),
            "episodic" | "train" => Ok(Stage::Episodic),
            other => Err(RsadError::config("stage", format!("unknown stage `{other}`"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Episodic => "episodic",
        })
    }
}

/// Images fed to a pre-trained encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PretrainInput {
    Raw,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: String,
    pub stage: Stage,
    pub backbone: BackboneKind,
    pub input_size: usize,
    pub rhs: RhsMode,
    /// Whether the prior branch and the distillation term are active.
    pub sag: bool,
    pub variant: Variant,
    pub alpha: f64,
    pub tau: f64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Episodic budget.
    pub episodes: u64,
    pub optimizer: OptimizerSpec,
    /// Epochs (pre-training) or episodes (episodic) after which the learning
    /// rate is multiplied by `gamma`.
    pub milestones: Vec<u64>,
    pub gamma: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Validation period in episodes; 0 disables periodic validation.
    pub val_every: u64,
    pub val_episodes: usize,
    pub eval_way: usize,
    pub eval_shot: usize,
    pub eval_query: usize,
    /// Random-resized crop and flip on training inputs.
    pub augment: bool,
    pub seed: u64,
}

fn is_resnet_fine_grained(dataset: &str, backbone: BackboneKind) -> bool {
    backbone == BackboneKind::ResNet12 && matches!(dataset, "cub" | "dogs")
}

impl TrainConfig {
    /// Episodic defaults: 15-way 5-shot training, 40,000 episodes.
    pub fn episodic(dataset: &str, backbone: BackboneKind) -> Self {
        let optimizer = if is_resnet_fine_grained(dataset, backbone) {
            OptimizerSpec::adam(1e-3)
        } else {
            OptimizerSpec::adamw(1e-3, 5e-4)
        };
        TrainConfig {
            dataset: dataset.to_string(),
            stage: Stage::Episodic,
            backbone,
            input_size: 84,
            rhs: RhsMode::Highlight,
            sag: true,
            variant: Variant::Mutual,
            alpha: 1.0,
            tau: 10.0,
            way: 15,
            shot: 5,
            query: 15,
            episodes: 40_000,
            optimizer,
            milestones: Vec::new(),
            gamma: 0.1,
            epochs: 0,
            batch_size: 64,
            val_every: 500,
            val_episodes: 200,
            eval_way: 5,
            eval_shot: 1,
            eval_query: 15,
            augment: true,
            seed: 0,
        }
    }

    /// Whole-classification defaults for the backbone.
    pub fn pretrain(dataset: &str, backbone: BackboneKind) -> Self {
        let (optimizer, epochs, milestones) = match backbone {
            BackboneKind::ResNet12 => (OptimizerSpec::sgd(1e-3, 0.9, 5e-4, true), 300, vec![75, 150]),
            BackboneKind::Conv4 => (OptimizerSpec::sgd(1e-3, 0.9, 5e-4, false), 200, vec![85, 170]),
        };
        TrainConfig {
            stage: Stage::Pretrain,
            optimizer,
            epochs,
            milestones,
            episodes: 0,
            ..TrainConfig::episodic(dataset, backbone)
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig::standard(self.backbone, self.input_size)
    }

    pub fn eval_shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.eval_way, self.eval_shot, self.eval_query)
    }

    pub fn schedule(&self) -> Result<MultiStep> {
        MultiStep::new(self.optimizer.lr, self.milestones.clone(), self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, r: String| Err(RsadError::config(k, r));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", format!("must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.optimizer.lr));
        }
        if self.optimizer.weight_decay < 0.0 || self.optimizer.momentum < 0.0 {
            return bad("weight_decay", "weight decay and momentum must be >= 0".into());
        }
        self.schedule()?;
        self.backbone_config().validate()?;
        if self.way < 2 || self.shot == 0 || self.query == 0 {
            return bad("way", format!("training shape {}-way {}-shot {} queries is invalid", self.way, self.shot, self.query));
        }
        if self.eval_way < 2 || self.eval_shot == 0 || self.eval_query == 0 {
            return bad("eval_way", "evaluation shape must have way >= 2, shot >= 1, query >= 1".into());
        }
        match self.stage {
            Stage::Episodic if self.episodes == 0 => bad("episodes", "episodic stage needs episodes > 0".into()),
            Stage::Pretrain if self.epochs == 0 => bad("epochs", "pretrain stage needs epochs > 0".into()),
            Stage::Pretrain if self.batch_size == 0 => bad("batch_size", "must be positive".into()),
            _ => Ok(()),
        }
    }
}

/// One line of the training metric stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub cls1: f64,
    pub cls2: f64,
    pub sag: f64,
    pub total: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    /// Mean validation accuracy, percent.
    pub val_acc: f64,
}

/// Both learners plus everything needed to resume training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub norm: NormStats,
    /// Main branch, fed raw images.
    pub a: Branch<T>,
    /// Prior branch, present when the distillation term is on.
    pub b: Option<Branch<T>>,
    pub optimizer: Optimizer<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub best: Option<BestRecord>,
    /// Main branch at the best validation point.
    pub best_a: Option<Branch<T>>,
}

/// Both branches viewed as one module under `a.` and `b.`.
struct Joint<'a, T> {
    a: &'a mut Branch<T>,
    b: Option<&'a mut Branch<T>>,
}

impl<T: Real> Module<T> for Joint<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.a.visit(&join(prefix, "a"), f);
        if let Some(b) = &self.b {
            b.visit(&join(prefix, "b"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.a.visit_mut(&join(prefix, "a"), f);
        if let Some(b) = &mut self.b {
            b.visit_mut(&join(prefix, "b"), f);
        }
    }
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_encoder<T: Real>(enc: &Encoder<T>, want: &BackboneConfig, what: &str) -> Result<()> {
    if enc.config() != want {
        return Err(RsadError::config(
            what,
            format!("pre-trained encoder {:?} does not match the configured backbone {want:?}", enc.config()),
        ));
    }
    Ok(())
}

impl<T: Real> TrainState<T> {
    /// Fresh state. Pre-trained encoders replace the random ones; without a
    /// prior-branch encoder the prior branch starts from a copy of the main
    /// one whenever the main one is pre-trained.
    pub fn new(
        config: TrainConfig,
        norm: NormStats,
        init_a: Option<Encoder<T>>,
        init_b: Option<Encoder<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = config.backbone_config();
        let mut rng = init_rng(config.seed, 1);
        let mut a = Branch::new(&backbone, config.rhs, &mut rng)?;
        let mut b = if config.sag {
            Some(Branch::new(&backbone, config.rhs, &mut rng)?)
        } else {
            None
        };
        if let Some(enc) = init_a {
            check_encoder(&enc, &backbone, "from")?;
            if let (Some(b), None) = (&mut b, &init_b) {
                b.encoder = enc.clone();
            }
            a.encoder = enc;
        }
        if let (Some(b), Some(enc)) = (&mut b, init_b) {
            check_encoder(&enc, &backbone, "from_prior")?;
            b.encoder = enc;
        }
        Ok(TrainState {
            optimizer: Optimizer::new(config.optimizer.clone()),
            rng: init_rng(config.seed, 0),
            config,
            norm,
            a,
            b,
            step: 0,
            best: None,
            best_a: None,
        })
    }

    pub fn model_meta(&self) -> ModelMeta {
        ModelMeta {
            backbone: self.config.backbone_config(),
            rhs: self.config.rhs,
            tau: self.config.tau,
            norm: self.norm,
        }
    }

    /// The main branch as an inference model: the best validated one when
    /// validation ran, the current one otherwise.
    pub fn main_model(&self) -> Model<T> {
        let branch = self.best_a.as_ref().unwrap_or(&self.a).clone();
        Model::new(self.model_meta(), branch).expect("state branches match their config")
    }

    /// The current main branch, ignoring validation selection.
    pub fn current_model(&self) -> Model<T> {
        Model::new(self.model_meta(), self.a.clone()).expect("state branches match their config")
    }

    fn prior_trains(&self) -> bool {
        self.b.is_some() && self.config.variant != Variant::UdKdp
    }
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

fn scaled(t: &Tensor<f64>, k: f64) -> Tensor<f64> {
    t.map(|v| v * k)
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

/// One update from one episode. Inputs for both branches share each item's
/// augmentation draw.
pub fn train_step<T: Real>(state: &mut TrainState<T>, data: &Dataset, ep: &Episode) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    let size = cfg.input_size as u32;
    let aug = if cfg.augment { Augment::train(size) } else { Augment::none(size) };
    let with_prior = state.b.is_some();
    let support = assemble::<T, _>(data, &ep.support, &aug, &state.norm, with_prior, &mut state.rng)?;
    let query = assemble::<T, _>(data, &ep.query, &aug, &state.norm, with_prior, &mut state.rng)?;
    let (s_labels, q_labels) = (support.labels.clone(), query.labels.clone());

    state.a.zero_grad();
    let la = state.a.forward(&support.raw, &s_labels, ep.way, &query.raw, cfg.tau, Mode::Train)?;
    let pa = softmax_rows(&to_f64(&la));
    let cls1 = cross_entropy(&pa, &q_labels)?;
    let mut grad_a = cross_entropy_grad(&pa, &q_labels);

    let train_b = state.prior_trains();
    let (mut cls2, mut sag, mut total, mut grad_b) = (0.0, 0.0, cls1, None);
    if let Some(b) = state.b.as_mut() {
        b.zero_grad();
        let mode = if train_b { Mode::Train } else { Mode::Eval };
        let (sp, qp) = (support.prior.as_ref().expect("prior batch"), query.prior.as_ref().expect("prior batch"));
        let lb = b.forward(sp, &s_labels, ep.way, qp, cfg.tau, mode)?;
        let pb = softmax_rows(&to_f64(&lb));
        cls2 = cross_entropy(&pb, &q_labels)?;
        let gb = cross_entropy_grad(&pb, &q_labels);
        match cfg.variant {
            Variant::Mutual => {
                sag = sag_loss(&pa, &pb)?;
                total = total_loss(cls1, cls2, sag, cfg.alpha);
                let (ga, gsb) = sag_grads(&pa, &pb);
                grad_a.add_assign(&scaled(&ga, cfg.alpha));
                let mut g = gb;
                g.add_assign(&scaled(&gsb, cfg.alpha));
                grad_b = Some(g);
            }
            Variant::UdKd | Variant::UdKdp => {
                sag = kl_div(&pa, &pb)?;
                total = cls1 + cfg.alpha * sag;
                grad_a.add_assign(&scaled(&kl_grad_source(&pa, &pb), cfg.alpha));
                if train_b {
                    total += cls2;
                    grad_b = Some(gb);
                }
            }
        }
    }
    if ![cls1, cls2, sag, total].into_iter().all(finite) {
        return Err(RsadError::NonFinite {
            episode: state.step,
            detail: format!(
                "classes {:?}: cls1={cls1} cls2={cls2} sag={sag} total={total}",
                ep.class_map
            ),
        });
    }
    state.a.backward(&grad_a.cast());
    if let (Some(b), Some(g)) = (state.b.as_mut(), grad_b) {
        b.backward(&g.cast());
    }
    let lr = cfg.schedule()?.lr_at(state.step + 1);
    let b = if train_b { state.b.as_mut() } else { None };
    state.optimizer.step(&mut Joint { a: &mut state.a, b }, lr);
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        cls1,
        cls2,
        sag,
        total,
        lr,
        val_acc: None,
    })
}

/// Mean validation accuracy (percent) of the current main branch.
pub fn validate<T: Real>(state: &TrainState<T>, data: &Dataset, val: &SectionView) -> Result<f64> {
    let acc = episode_accuracies(
        &state.current_model(),
        data,
        val,
        state.config.eval_shape(),
        state.config.val_episodes.max(1),
        state.config.seed ^ VAL_SEED_SALT,
    )?;
    Ok(mean_ci95(&acc).0)
}

const VAL_SEED_SALT: u64 = 0x5641_4c5f_5345_4544;

/// Runs episodes until the configured budget, resuming from `state.step`.
/// Validation runs every `val_every` episodes and after the last one, unless
/// the split has no validation classes. `sink` sees every step's metrics.
pub fn episodic_train<T: Real>(
    state: &mut TrainState<T>,
    data: &Dataset,
    split: &SplitSpec,
    sink: &mut dyn FnMut(&StepMetrics) -> Result<()>,
) -> Result<()> {
    let cfg = state.config.clone();
    if state.b.is_some() && !data.has_priors() {
        return Err(RsadError::config("priors", "the prior branch needs a prior image for every sample"));
    }
    let base = data.section(&split.base)?;
    let val = if split.val.is_empty() {
        None
    } else {
        Some(data.section(&split.val)?)
    };
    while state.step < cfg.episodes {
        let ep = sample_episode(&base, cfg.way, cfg.shot, cfg.query, &mut state.rng)?;
        let mut m = train_step(state, data, &ep)?;
        let due = cfg.val_every > 0 && state.step % cfg.val_every == 0;
        if let (Some(val), true) = (&val, due || state.step == cfg.episodes) {
            let acc = validate(state, data, val)?;
            m.val_acc = Some(acc);
            if state.best.is_none_or(|b| acc > b.val_acc) {
                state.best = Some(BestRecord {
                    step: state.step,
                    val_acc: acc,
                });
                state.best_a = Some(state.a.clone());
            }
        }
        sink(&m)?;
    }
    Ok(())
}

/// Writes the main branch alone as an inference model.
pub fn export_main_branch<T: Real>(state: &TrainState<T>, path: &Path) -> Result<Model<T>> {
    let model = state.main_model();
    checkpoint::save_model(&model, path)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Option<ChaCha8Rng> {
        let seed: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    model: ModelMeta,
    has_b: bool,
    has_best: bool,
    step: u64,
    optimizer_step: u64,
    rng: RngState,
    best: Option<BestRecord>,
}

pub fn save_state<T: Real>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut tensors = BTreeMap::new();
    collect_tensors(&state.a, "a", &mut tensors);
    if let Some(b) = &state.b {
        collect_tensors(b, "b", &mut tensors);
    }
    if let Some(best) = &state.best_a {
        collect_tensors(best, "best_a", &mut tensors);
    }
    for (tag, moments) in [("first", &state.optimizer.state.first), ("second", &state.optimizer.state.second)] {
        for (name, v) in moments {
            tensors.insert(format!("opt.{tag}.{name}"), Tensor::from_vec(&[v.len()], v.clone()));
        }
    }
    let meta = StateMeta {
        config: state.config.clone(),
        model: state.model_meta(),
        has_b: state.b.is_some(),
        has_best: state.best_a.is_some(),
        step: state.step,
        optimizer_step: state.optimizer.state.step,
        rng: RngState::capture(&state.rng),
        best: state.best,
    };
    write_checkpoint(path, CheckpointKind::State, &meta, &tensors)
}

pub fn load_state<T: Real>(path: &Path) -> Result<TrainState<T>> {
    let (header, tensors) = read_checkpoint::<T>(path)?;
    expect_kind(&header, CheckpointKind::State, path)?;
    let meta: StateMeta = parse_meta(&header, path)?;
    let a = restore_branch(&meta.model, "a", &tensors)?;
    let b = meta.has_b.then(|| restore_branch(&meta.model, "b", &tensors)).transpose()?;
    let best_a = meta
        .has_best
        .then(|| restore_branch(&meta.model, "best_a", &tensors))
        .transpose()?;
    let mut optimizer = Optimizer::new(meta.config.optimizer.clone());
    optimizer.state.step = meta.optimizer_step;
    for (name, t) in &tensors {
        if let Some(rest) = name.strip_prefix("opt.first.") {
            optimizer.state.first.insert(rest.to_string(), t.data().to_vec());
        } else if let Some(rest) = name.strip_prefix("opt.second.") {
            optimizer.state.second.insert(rest.to_string(), t.data().to_vec());
        }
    }
    let rng = meta
        .rng
        .restore()
        .ok_or_else(|| RsadError::corrupt(path, "unreadable generator state"))?;
    Ok(TrainState {
        config: meta.config,
        norm: meta.model.norm,
        a,
        b,
        optimizer,
        step: meta.step,
        rng,
        best: meta.best,
        best_a,
    })
}

/// Per-epoch record of whole-classification training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub train_acc: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
}

/// A whole-classification encoder and its linear head.
#[derive(Clone, Debug)]
pub struct Pretrained<T> {
    pub config: TrainConfig,
    pub input: PretrainInput,
    pub classes: Vec<String>,
    pub norm: NormStats,
    pub encoder: Encoder<T>,
    pub head: Linear<T>,
    pub best_val: Option<f64>,
}

struct Classifier<'a, T> {
    encoder: &'a mut Encoder<T>,
    head: &'a mut Linear<T>,
}

impl<T: Real> Module<T> for Classifier<'_, T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn image_batch<T: Real, R: Rng + ?Sized>(
    data: &Dataset,
    ids: &[usize],
    input: PretrainInput,
    aug: &Augment,
    norm: &NormStats,
    rng: &mut R,
) -> Tensor<T> {
    let s = aug.size as usize;
    let mut buf = Vec::with_capacity(ids.len() * 3 * s * s);
    for &i in ids {
        let sample = &data.samples[i];
        let img = match input {
            PretrainInput::Raw => &sample.raw,
            PretrainInput::Prior => sample.prior.as_ref().expect("priors checked"),
        };
        let draw = aug.draw(img.width(), img.height(), rng);
        buf.extend(to_chw::<T>(&aug.apply(&draw, img), norm));
    }
    Tensor::from_vec(&[ids.len(), 3, s, s], buf)
}

/// Prototype-classifier accuracy of a bare encoder on validation episodes.
fn encoder_val_acc<T: Real>(
    encoder: &Encoder<T>,
    cfg: &TrainConfig,
    norm: NormStats,
    data: &Dataset,
    val: &SectionView,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rhs = Rhs::new(RhsMode::Off, encoder.config().out_channels(), &mut rng);
    let meta = ModelMeta {
        backbone: encoder.config().clone(),
        rhs: RhsMode::Off,
        tau: cfg.tau,
        norm,
    };
    let model = Model::new(meta, Branch::from_parts(encoder.clone(), rhs))?;
    let acc = episode_accuracies(&model, data, val, cfg.eval_shape(), cfg.val_episodes.max(1), cfg.seed ^ VAL_SEED_SALT)?;
    Ok(mean_ci95(&acc).0)
}

/// Trains an encoder plus linear head to classify every base class. With a
/// validation section the encoder of the best epoch is kept.
pub fn pretrain<T: Real>(
    config: &TrainConfig,
    data: &Dataset,
    split: &SplitSpec,
    norm: NormStats,
    input: PretrainInput,
    sink: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<Pretrained<T>> {
    config.validate()?;
    if input == PretrainInput::Prior && !data.has_priors() {
        return Err(RsadError::config("priors", "prior-branch pre-training needs a prior image for every sample"));
    }
    let base = data.section(&split.base)?;
    let val = if split.val.is_empty() {
        None
    } else {
        Some(data.section(&split.val)?)
    };
    let items: Vec<(usize, usize)> = base
        .members
        .iter()
        .enumerate()
        .flat_map(|(label, m)| m.iter().map(move |&i| (i, label)))
        .collect();
    let mut rng = init_rng(config.seed, 2);
    let mut encoder = build_backbone::<T, _>(&config.backbone_config(), &mut rng)?;
    let mut head = Linear::new(encoder.config().out_channels(), base.classes.len(), &mut rng);
    let mut optimizer = Optimizer::new(config.optimizer.clone());
    let schedule = config.schedule()?;
    let size = config.input_size as u32;
    let aug = if config.augment { Augment::train(size) } else { Augment::none(size) };
    let mut best: Option<(f64, Encoder<T>, Linear<T>)> = None;
    let mut order = items.clone();
    for epoch in 1..=config.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let ids: Vec<usize> = chunk.iter().map(|&(i, _)| i).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(_, l)| l).collect();
            let x = image_batch::<T, _>(data, &ids, input, &aug, &norm, &mut rng);
            encoder.zero_grad();
            head.zero_grad();
            let feats = encoder.forward(x, Mode::Train)?;
            let (_, _, h, w) = feats.dims4();
            let logits = head.forward(global_avg_pool(&feats), Mode::Train);
            let probs = softmax_rows(&to_f64(&logits));
            let loss = cross_entropy(&probs, &labels)?;
            if !loss.is_finite() {
                return Err(RsadError::NonFinite {
                    episode: epoch,
                    detail: format!("pre-training loss {loss}"),
                });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += labels
                .iter()
                .enumerate()
                .filter(|(q, &y)| crate::evaluation::argmax(probs.item(*q)) == y)
                .count();
            let d_pooled = head.backward(&cross_entropy_grad(&probs, &labels).cast());
            encoder.backward(global_avg_pool_backward(&d_pooled, h, w));
            optimizer.step(
                &mut Classifier {
                    encoder: &mut encoder,
                    head: &mut head,
                },
                lr,
            );
        }
        let val_acc = val
            .as_ref()
            .map(|v| encoder_val_acc(&encoder, config, norm, data, v))
            .transpose()?;
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, encoder.clone(), head.clone()));
            }
        }
        sink(&EpochMetrics {
            epoch,
            loss: loss_sum / items.len() as f64,
            train_acc: 100.0 * hits as f64 / items.len() as f64,
            lr,
            val_acc,
        })?;
    }
    let (best_val, encoder, head) = match best {
        Some((acc, e, h)) => (Some(acc), e, h),
        None => (None, encoder, head),
    };
    Ok(Pretrained {
        config: config.clone(),
        input,
        classes: base.classes.clone(),
        norm,
        encoder,
        head,
        best_val,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PretrainMeta {
    config: TrainConfig,
    backbone: BackboneConfig,
    input: PretrainInput,
    classes: Vec<String>,
    norm: NormStats,
    best_val: Option<f64>,
}

pub fn save_pretrained<T: Real>(p: &Pretrained<T>, path: &Path) -> Result<()> {
    let mut tensors: TensorMap<T> = BTreeMap::new();
    collect_tensors(&p.encoder, "encoder", &mut tensors);
    collect_tensors(&p.head, "head", &mut tensors);
    let meta = PretrainMeta {
        config: p.config.clone(),
        backbone: p.encoder.config().clone(),
        input: p.input,
        classes: p.classes.clone(),
        norm: p.norm,
        best_val: p.best_val,
    };
    write_checkpoint(path, CheckpointKind::Pretrain, &meta, &tensors)
}

pub fn load_pretrained<T: Real>(path: &Path) -> Result<Pretrained<T>> {
    let (header, tensors) = read_checkpoint::<T>(path)?;
    expect_kind(&header, CheckpointKind::Pretrain, path)?;
    let meta: PretrainMeta = parse_meta(&header, path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut encoder = build_backbone::<T, _>(&meta.backbone, &mut rng)?;
    restore_tensors(&mut encoder, "encoder", &tensors)?;
    let mut head = Linear::new(meta.backbone.out_channels(), meta.classes.len(), &mut rng);
    restore_tensors(&mut head, "head", &tensors)?;
    Ok(Pretrained {
        config: meta.config,
        input: meta.input,
        classes: meta.classes,
        norm: meta.norm,
        encoder,
        head,
        best_val: meta.best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_split, SynthSpec};

    pub(crate) fn tiny_config(sag: bool) -> TrainConfig {
        TrainConfig {
            input_size: 32,
            way: 3,
            shot: 1,
            query: 2,
            episodes: 4,
            val_every: 2,
            val_episodes: 3,
            eval_way: 2,
            eval_query: 2,
            sag,
            augment: true,
            seed: 11,
            ..TrainConfig::episodic("synthetic", BackboneKind::Conv4)
        }
    }

    fn tiny_data() -> (Dataset, SplitSpec) {
        let synth = generate_synthetic(&SynthSpec::new(8, 4, 32, 5)).unwrap();
        let data = Dataset::from_synthetic(&synth).unwrap();
        let split = make_split("synthetic", &synth.classes, (4, 2, 2), 0).unwrap();
        (data, split)
    }

    #[test]
    fn config_validation_names_the_key() {
        let mut c = tiny_config(true);
        c.alpha = -1.0;
        assert!(matches!(c.validate(), Err(RsadError::Config { key, .. }) if key == "alpha"));
        let mut c = tiny_config(true);
        c.milestones = vec![5, 5];
        assert!(matches!(c.validate(), Err(RsadError::Config { key, .. }) if key == "milestones"));
        let p = TrainConfig::pretrain("cub", BackboneKind::ResNet12);
        let s = p.schedule().unwrap();
        assert!((s.lr_at(76) - 1e-4).abs() < 1e-15 && (s.lr_at(151) - 1e-5).abs() < 1e-15);
        assert_eq!(TrainConfig::episodic("cub", BackboneKind::ResNet12).optimizer.kind, crate::nn::OptimizerKind::Adam);
        assert_eq!(TrainConfig::episodic("cars", BackboneKind::ResNet12).optimizer.kind, crate::nn::OptimizerKind::AdamW);
    }

    #[test]
    fn step_records_components_and_is_deterministic() {
        let (data, split) = tiny_data();
        let run = || {
            let mut st = TrainState::<f32>::new(tiny_config(true), NormStats::IDENTITY, None, None).unwrap();
            let mut out = Vec::new();
            episodic_train(&mut st, &data, &split, &mut |m| {
                out.push(m.clone());
                Ok(())
            })
            .unwrap();
            (out, st)
        };
        let (m1, st) = run();
        let (m2, _) = run();
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 4);
        for m in &m1 {
            assert!(m.cls1 > 0.0 && m.cls2 > 0.0 && m.sag >= 0.0);
            assert!((m.total - (m.cls1 + m.cls2 + m.sag)).abs() < 1e-9);
        }
        let vals: Vec<f64> = m1.iter().filter_map(|m| m.val_acc).collect();
        assert_eq!(vals.len(), 2);
        let best = st.best.unwrap();
        assert_eq!(best.val_acc, vals.iter().copied().fold(f64::MIN, f64::max));
    }

    #[test]
    fn identical_branches_on_identical_inputs_have_zero_sag() {
        let (mut data, split) = tiny_data();
        for s in &mut data.samples {
            s.prior = Some(s.raw.clone());
        }
        let mut st = TrainState::<f64>::new(tiny_config(true), NormStats::IDENTITY, None, None).unwrap();
        st.b = Some(st.a.clone());
        let base = data.section(&split.base).unwrap();
        let ep = sample_episode(&base, 3, 1, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let m = train_step(&mut st, &data, &ep).unwrap();
        assert!(m.sag.abs() < 1e-12, "sag {}", m.sag);
        assert_eq!(m.cls1, m.cls2);
    }

    #[test]
    fn without_prior_branch_main_updates_ignore_it() {
        let (data, split) = tiny_data();
        let base = data.section(&split.base).unwrap();
        let ep = sample_episode(&base, 3, 1, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut cfg = tiny_config(true);
        cfg.alpha = 0.0;
        let mut with_b = TrainState::<f64>::new(cfg.clone(), NormStats::IDENTITY, None, None).unwrap();
        let mut other = with_b.clone();
        other.b = Some(Branch::new(&cfg.backbone_config(), cfg.rhs, &mut ChaCha8Rng::seed_from_u64(99)).unwrap());
        train_step(&mut with_b, &data, &ep).unwrap();
        train_step(&mut other, &data, &ep).unwrap();
        let (mut x, mut y) = (BTreeMap::new(), BTreeMap::new());
        collect_tensors(&with_b.a, "", &mut x);
        collect_tensors(&other.a, "", &mut y);
        assert_eq!(x, y);
    }

    #[test]
    fn state_checkpoint_resumes_identically() {
        let (data, split) = tiny_data();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let mut cfg = tiny_config(true);
        cfg.episodes = 2;
        let mut st = TrainState::<f32>::new(cfg, NormStats::IDENTITY, None, None).unwrap();
        episodic_train(&mut st, &data, &split, &mut |_| Ok(())).unwrap();
        save_state(&st, &path).unwrap();
        let mut back: TrainState<f32> = load_state(&path).unwrap();
        let (mut x, mut y) = (BTreeMap::new(), BTreeMap::new());
        collect_tensors(&st.a, "", &mut x);
        collect_tensors(&back.a, "", &mut y);
        assert_eq!(x, y);
        assert_eq!(back.optimizer.state, st.optimizer.state);
        st.config.episodes = 4;
        back.config.episodes = 4;
        let (mut m1, mut m2) = (Vec::new(), Vec::new());
        episodic_train(&mut st, &data, &split, &mut |m| Ok(m1.push(m.clone()))).unwrap();
        episodic_train(&mut back, &data, &split, &mut |m| Ok(m2.push(m.clone()))).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn missing_priors_are_a_config_error() {
        let (mut data, split) = tiny_data();
        data.samples[0].prior = None;
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::pretrain("synthetic", BackboneKind::Conv4)
        };
        let r = pretrain::<f32>(&cfg, &data, &split, NormStats::IDENTITY, PretrainInput::Prior, &mut |_| Ok(()));
        assert!(matches!(r, Err(RsadError::Config { .. })));
    }

    #[test]
    fn pretrained_checkpoint_reproduces_validation() {
        let (data, split) = tiny_data();
        let cfg = TrainConfig {
            input_size: 32,
            epochs: 2,
            batch_size: 8,
            val_episodes: 3,
            eval_way: 2,
            eval_query: 2,
            optimizer: OptimizerSpec::sgd(0.05, 0.9, 5e-4, false),
            ..TrainConfig::pretrain("synthetic", BackboneKind::Conv4)
        };
        let mut epochs = Vec::new();
        let p = pretrain::<f32>(&cfg, &data, &split, NormStats::IDENTITY, PretrainInput::Raw, &mut |e| {
            epochs.push(e.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        save_pretrained(&p, &path).unwrap();
        let back: Pretrained<f32> = load_pretrained(&path).unwrap();
        let val = data.section(&split.val).unwrap();
        let a = encoder_val_acc(&p.encoder, &cfg, p.norm, &data, &val).unwrap();
        let b = encoder_val_acc(&back.encoder, &cfg, back.norm, &data, &val).unwrap();
        assert_eq!(a, b);
        assert_eq!(p.best_val, Some(epochs.iter().filter_map(|e| e.val_acc).fold(f64::MIN, f64::max)));
    }
}
