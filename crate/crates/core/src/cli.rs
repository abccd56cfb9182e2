//! Command-line front end: flat config files, run directories and the
//! subcommand dispatcher behind the `rsad` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneKind;
use crate::data::{
    generate_synthetic, lookup_dataset, make_split, write_synthetic, Dataset, NormStats, Section, SplitSpec,
    SynthSpec,
};
use crate::error::{Result, RsadError};
use crate::evaluation::{
    ablation_preset, ablation_table, dbi, evaluate, query_embeddings, report_complexity, AblationSpec, EpisodeShape,
    EvalContext, EvalReport,
};
use crate::fsutil::{list_classes, list_image_tree, read_rgb, sha256_hex, write_atomic};
use crate::nn::OptimizerKind;
use crate::rhs::RhsMode;
use crate::saliency_prior::{build_prior_cache, DEFAULT_THRESHOLD};
use crate::training::checkpoint::load_model;
use crate::training::{
    episodic_train, export_main_branch, load_pretrained, load_state, pretrain, save_pretrained, save_state, Model,
    PretrainInput, Stage, TrainConfig, TrainState, Variant,
};

/// Every key a config file may set, in emission order.
pub const CONFIG_KEYS: [&str; 33] = [
    "stage",
    "dataset",
    "backbone",
    "input_size",
    "rhs",
    "sag",
    "variant",
    "alpha",
    "tau",
    "way",
    "shot",
    "query",
    "episodes",
    "optimizer",
    "lr",
    "weight_decay",
    "momentum",
    "nesterov",
    "milestones",
    "gamma",
    "epochs",
    "batch_size",
    "val_every",
    "val_episodes",
    "eval_way",
    "eval_shot",
    "eval_query",
    "augment",
    "seed",
    "images",
    "priors",
    "split",
    "max_short_side",
];

pub const ENV_PREFIX: &str = "RSAD_";

/// Where the images, priors and class split of a run live.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub images: Option<PathBuf>,
    pub priors: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub max_short_side: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// `key = value` pairs of a config text; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(RsadError::config(line, format!("line {}: expected `key = value`", n + 1)));
        };
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(RsadError::config("", format!("line {}: empty key", n + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(RsadError::config(key, format!("line {}: duplicate key", n + 1)));
        }
    }
    Ok(out)
}

/// `RSAD_*` variables of the process environment.
pub fn env_overrides() -> BTreeMap<String, String> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

fn typed<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| RsadError::config(key, format!("expected {what}, got `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(RsadError::config(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn rekey(e: RsadError, key: &str) -> RsadError {
    match e {
        RsadError::Config { reason, .. } => RsadError::config(key, reason),
        other => other,
    }
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Typed, validated run configuration from config text plus environment
/// overrides. Unknown keys are rejected by name; `RSAD_<KEY>` wins over the
/// file.
pub fn parse_config_text(text: &str, env: &BTreeMap<String, String>) -> Result<RunConfig> {
    let mut pairs = parse_pairs(text)?;
    if let Some(bad) = pairs.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(RsadError::config(bad.clone(), "unknown key"));
    }
    for key in CONFIG_KEYS {
        if let Some(v) = env.get(&format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())) {
            pairs.insert(key.to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| pairs.get(k).map(String::as_str);
    let stage: Stage = get("stage").map_or(Ok(Stage::Episodic), |v| v.parse().map_err(|e| rekey(e, "stage")))?;
    let backbone: BackboneKind = get("backbone")
        .map_or(Ok(BackboneKind::Conv4), |v| v.parse().map_err(|e| rekey(e, "backbone")))?;
    let dataset = get("dataset").unwrap_or("custom");
    let dataset = lookup_dataset(dataset).map_or(dataset, |d| d.id).to_string();
    let mut t = match stage {
        Stage::Pretrain => TrainConfig::pretrain(&dataset, backbone),
        Stage::Episodic => TrainConfig::episodic(&dataset, backbone),
    };
    if let Some(v) = get("optimizer") {
        t.optimizer.kind = v.parse::<OptimizerKind>().map_err(|e| rekey(e, "optimizer"))?;
    }
    let mut data = DataConfig::default();
    for (key, v) in &pairs {
        let k = key.as_str();
        let v = v.as_str();
        match k {
            "stage" | "backbone" | "dataset" | "optimizer" => {}
            "input_size" => t.input_size = typed(k, v, "an integer")?,
            "rhs" => t.rhs = v.parse::<RhsMode>().map_err(|e| rekey(e, k))?,
            "sag" => t.sag = flag(k, v)?,
            "variant" => t.variant = v.parse::<Variant>().map_err(|e| rekey(e, k))?,
            "alpha" => t.alpha = typed(k, v, "a number")?,
            "tau" => t.tau = typed(k, v, "a number")?,
            "way" => t.way = typed(k, v, "an integer")?,
            "shot" => t.shot = typed(k, v, "an integer")?,
            "query" => t.query = typed(k, v, "an integer")?,
            "episodes" => t.episodes = typed(k, v, "an integer")?,
            "lr" => t.optimizer.lr = typed(k, v, "a number")?,
            "weight_decay" => t.optimizer.weight_decay = typed(k, v, "a number")?,
            "momentum" => t.optimizer.momentum = typed(k, v, "a number")?,
            "nesterov" => t.optimizer.nesterov = flag(k, v)?,
            "milestones" => {
                t.milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| typed(k, s, "a comma-separated list of integers"))
                    .collect::<Result<_>>()?
            }
            "gamma" => t.gamma = typed(k, v, "a number")?,
            "epochs" => t.epochs = typed(k, v, "an integer")?,
            "batch_size" => t.batch_size = typed(k, v, "an integer")?,
            "val_every" => t.val_every = typed(k, v, "an integer")?,
            "val_episodes" => t.val_episodes = typed(k, v, "an integer")?,
            "eval_way" => t.eval_way = typed(k, v, "an integer")?,
            "eval_shot" => t.eval_shot = typed(k, v, "an integer")?,
            "eval_query" => t.eval_query = typed(k, v, "an integer")?,
            "augment" => t.augment = flag(k, v)?,
            "seed" => t.seed = typed(k, v, "an unsigned integer")?,
            "images" => data.images = optional_path(v),
            "priors" => data.priors = optional_path(v),
            "split" => data.split = optional_path(v),
            "max_short_side" => {
                data.max_short_side = if v.is_empty() {
                    None
                } else {
                    Some(typed(k, v, "an integer")?)
                }
            }
            _ => unreachable!("keys checked above"),
        }
    }
    t.validate()?;
    Ok(RunConfig { train: t, data })
}

pub fn parse_config(path: &Path, env: &BTreeMap<String, String>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| RsadError::io(path, e))?;
    parse_config_text(&text, env)
}

/// Config text that parses back to `cfg`.
pub fn emit_config(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    let values: [String; 33] = [
        t.stage.to_string(),
        t.dataset.clone(),
        t.backbone.to_string(),
        t.input_size.to_string(),
        t.rhs.to_string(),
        t.sag.to_string(),
        t.variant.to_string(),
        t.alpha.to_string(),
        t.tau.to_string(),
        t.way.to_string(),
        t.shot.to_string(),
        t.query.to_string(),
        t.episodes.to_string(),
        t.optimizer.kind.to_string(),
        t.optimizer.lr.to_string(),
        t.optimizer.weight_decay.to_string(),
        t.optimizer.momentum.to_string(),
        t.optimizer.nesterov.to_string(),
        t.milestones.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        t.gamma.to_string(),
        t.epochs.to_string(),
        t.batch_size.to_string(),
        t.val_every.to_string(),
        t.val_episodes.to_string(),
        t.eval_way.to_string(),
        t.eval_shot.to_string(),
        t.eval_query.to_string(),
        t.augment.to_string(),
        t.seed.to_string(),
        path(&cfg.data.images),
        path(&cfg.data.priors),
        path(&cfg.data.split),
        cfg.data.max_short_side.map(|v| v.to_string()).unwrap_or_default(),
    ];
    CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

/// Record written once per run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Option<String>,
    pub seeds: Vec<u64>,
    pub started: String,
    pub finished: String,
    pub status: String,
    pub artifacts: Vec<String>,
    /// SHA-256 over the config snapshot and every input file, in order.
    pub input_hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// A timestamped directory under `<workdir>/runs` collecting one command's
/// artifacts.
pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
    inputs: Vec<u8>,
}

fn now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

impl RunDir {
    pub fn create(workdir: &Path, command: &str, argv: &[String]) -> Result<Self> {
        let started = now();
        let stem = format!("{}-{command}", started.format("%Y%m%dT%H%M%S%.3fZ"));
        let runs = workdir.join("runs");
        fs::create_dir_all(&runs).map_err(|e| RsadError::io(&runs, e))?;
        let mut path = runs.join(&stem);
        let mut n = 1;
        while path.exists() {
            path = runs.join(format!("{stem}-{n}"));
            n += 1;
        }
        fs::create_dir(&path).map_err(|e| RsadError::io(&path, e))?;
        Ok(RunDir {
            path,
            manifest: RunManifest {
                command: command.to_string(),
                argv: argv.to_vec(),
                config: None,
                seeds: Vec::new(),
                started: started.to_rfc3339(),
                finished: String::new(),
                status: "running".into(),
                artifacts: Vec::new(),
                input_hash: String::new(),
            },
            inputs: Vec::new(),
        })
    }

    pub fn set_config(&mut self, snapshot: String) {
        self.inputs.extend(snapshot.as_bytes());
        self.manifest.config = Some(snapshot);
    }

    pub fn add_seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    /// Folds a file's bytes into the input hash.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| RsadError::io(path, e))?;
        self.inputs.extend(sha256_hex(&bytes).as_bytes());
        Ok(())
    }

    pub fn artifact(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(name.to_string());
        self.path.join(name)
    }

    /// Records an artifact that lives outside the run directory.
    pub fn external_artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.display().to_string());
    }

    pub fn finish(mut self, status: &str) -> Result<PathBuf> {
        self.manifest.finished = now().to_rfc3339();
        self.manifest.status = status.to_string();
        self.manifest.input_hash = sha256_hex(&self.inputs);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.path.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(self.path)
    }
}

#[derive(Parser, Debug)]
#[command(name = "rsad", version, about = "Saliency-guided few-shot fine-grained recognition")]
pub struct Cli {
    /// Root for every relative path and for the `runs/` directory.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Overrides the seed of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Foreground priors from saliency maps.
    #[command(subcommand)]
    Prior(PriorCmd),
    /// Class splits.
    #[command(subcommand)]
    Split(SplitCmd),
    /// Synthetic datasets.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Whole-classification pre-training of one branch encoder.
    Pretrain(PretrainArgs),
    /// Dual-branch episodic training.
    Train(TrainArgs),
    /// Writes the main branch of a training state as an inference model.
    Export(ExportArgs),
    /// Episodic accuracy with a 95% confidence interval.
    Eval(EvalArgs),
    /// Davies-Bouldin index of query embeddings.
    Dbi(DbiArgs),
    /// Trains and evaluates a group of ablation rows.
    Ablate(AblateArgs),
}

#[derive(Subcommand, Debug)]
pub enum PriorCmd {
    /// Builds (or refreshes) a prior cache.
    Build(PriorBuildArgs),
}

#[derive(Args, Debug)]
pub struct PriorBuildArgs {
    /// Saliency-map directory of one detector; repeat for an ensemble.
    #[arg(long = "maps", required = true)]
    pub maps: Vec<PathBuf>,
    /// Class-per-directory image tree.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Subcommand, Debug)]
pub enum SplitCmd {
    /// Seeded base / val / novel split.
    Make(SplitMakeArgs),
}

#[derive(Args, Debug)]
pub struct SplitMakeArgs {
    #[arg(long)]
    pub dataset: String,
    /// Image tree to take class names from; registry datasets fall back to
    /// indexed names.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// `base,val,novel` class counts.
    #[arg(long)]
    pub counts: Option<String>,
    /// Stores normalization statistics of the base images in the split.
    #[arg(long)]
    pub norm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum SynthCmd {
    /// Generates images, ground-truth masks, a split and an oracle prior cache.
    Make(SynthMakeArgs),
}

#[derive(Args, Debug)]
pub struct SynthMakeArgs {
    #[arg(long, default_value_t = 15)]
    pub classes: usize,
    #[arg(long, default_value_t = 30)]
    pub per_class: usize,
    #[arg(long, default_value_t = 84)]
    pub size: u32,
    #[arg(long, default_value_t = 10)]
    pub base: usize,
    #[arg(long, default_value_t = 0)]
    pub val: usize,
    #[arg(long, default_value_t = 5)]
    pub novel: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Which images the encoder sees.
    #[arg(long, value_parser = ["raw", "prior"], default_value = "raw")]
    pub input: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Pre-trained main-branch checkpoint.
    #[arg(long)]
    pub from: Option<PathBuf>,
    /// Pre-trained prior-branch checkpoint.
    #[arg(long)]
    pub from_prior: Option<PathBuf>,
    /// Continues a saved training state.
    #[arg(long, conflicts_with_all = ["from", "from_prior"])]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub state: PathBuf,
    /// Destination; defaults to `model.ckpt` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Class-per-directory image tree.
    #[arg(long)]
    pub images: PathBuf,
    /// Split file written by `split make`.
    #[arg(long)]
    pub split_file: PathBuf,
    #[arg(long)]
    pub max_short_side: Option<u32>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split section to sample episodes from.
    #[arg(long, default_value = "novel")]
    pub split: Section,
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    #[arg(long, default_value_t = 15)]
    pub query: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
}

#[derive(Args, Debug)]
pub struct DbiArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "novel")]
    pub split: Section,
    #[arg(long, default_value_t = 5)]
    pub way: usize,
    #[arg(long, default_value_t = 1)]
    pub shot: usize,
    #[arg(long, default_value_t = 15)]
    pub query: usize,
    #[arg(long, default_value_t = 600)]
    pub episodes: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Config file with training keys plus `preset`, `eval_episodes` and
    /// `eval_section`.
    #[arg(long)]
    pub spec: PathBuf,
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success and for `--help`, 2 on usage errors, 1 on failures (with a JSON
/// error record on standard error).
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}

/// Machine-readable one-line description of an error.
pub fn error_record(e: &RsadError) -> String {
    let kind = match e {
        RsadError::Config { .. } => "config",
        RsadError::Input(_) => "input",
        RsadError::Sampling(_) => "sampling",
        RsadError::DegenerateCentroids(..) => "degenerate_centroids",
        RsadError::NonFinite { .. } => "non_finite",
        RsadError::Corrupt { .. } => "corrupt",
        RsadError::Io { .. } => "io",
    };
    let mut record = serde_json::json!({ "error": kind, "message": e.to_string() });
    if let RsadError::Config { key, .. } = e {
        record["key"] = serde_json::Value::String(key.clone());
    }
    record.to_string()
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    let wd = &cli.workdir;
    let name = match &cli.command {
        Command::Prior(_) => "prior",
        Command::Split(_) => "split",
        Command::Synth(_) => "synth",
        Command::Pretrain(_) => "pretrain",
        Command::Train(_) => "train",
        Command::Export(_) => "export",
        Command::Eval(_) => "eval",
        Command::Dbi(_) => "dbi",
        Command::Ablate(_) => "ablate",
    };
    let mut run = RunDir::create(wd, name, argv)?;
    let result = match &cli.command {
        Command::Prior(PriorCmd::Build(a)) => cmd_prior(wd, a, &mut run),
        Command::Split(SplitCmd::Make(a)) => cmd_split(wd, cli.seed, a, &mut run),
        Command::Synth(SynthCmd::Make(a)) => cmd_synth(wd, cli.seed, a, &mut run),
        Command::Pretrain(a) => cmd_pretrain(wd, cli.seed, a, &mut run),
        Command::Train(a) => cmd_train(wd, cli.seed, a, &mut run),
        Command::Export(a) => cmd_export(wd, a, &mut run),
        Command::Eval(a) => cmd_eval(wd, cli.seed, a, &mut run),
        Command::Dbi(a) => cmd_dbi(wd, cli.seed, a, &mut run),
        Command::Ablate(a) => cmd_ablate(wd, cli.seed, a, &mut run),
    };
    let status = if result.is_ok() { "ok" } else { "error" };
    let dir = run.finish(status)?;
    if result.is_ok() {
        println!("run directory: {}", dir.display());
    }
    result
}

fn cmd_prior(wd: &Path, a: &PriorBuildArgs, run: &mut RunDir) -> Result<()> {
    let maps: Vec<PathBuf> = a.maps.iter().map(|m| resolve(wd, m)).collect();
    let out = resolve(wd, &a.out);
    let manifest = build_prior_cache(&maps, &resolve(wd, &a.images), a.threshold, &out)?;
    run.external_artifact(&out);
    println!(
        "priors: {} built, {} without maps (threshold {})",
        manifest.entries.len(),
        manifest.errors.len(),
        a.threshold
    );
    Ok(())
}

fn parse_counts(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| typed("counts", p.trim(), "three comma-separated integers"))
        .collect::<Result<_>>()?;
    match parts[..] {
        [b, v, n] => Ok((b, v, n)),
        _ => Err(RsadError::config("counts", format!("expected base,val,novel, got `{s}`"))),
    }
}

fn base_norm(images: &Path, split: &SplitSpec) -> Result<NormStats> {
    let raws = list_image_tree(images)?
        .into_iter()
        .filter(|e| split.base.contains(&e.class))
        .map(|e| read_rgb(&e.path))
        .collect::<Result<Vec<_>>>()?;
    NormStats::from_images(&raws)
}

fn cmd_split(wd: &Path, seed: Option<u64>, a: &SplitMakeArgs, run: &mut RunDir) -> Result<()> {
    let seed = seed.unwrap_or(0);
    run.add_seed(seed);
    let info = lookup_dataset(&a.dataset);
    let images = a.images.as_ref().map(|p| resolve(wd, p));
    let classes = match (&images, info) {
        (Some(dir), _) => list_classes(dir)?,
        (None, Some(info)) => crate::data::indexed_class_names(info.classes),
        (None, None) => {
            return Err(RsadError::config("images", format!("`{}` is not a registry dataset; pass --images", a.dataset)))
        }
    };
    let counts = match (&a.counts, info) {
        (Some(c), _) => parse_counts(c)?,
        (None, Some(info)) => info.counts,
        (None, None) => return Err(RsadError::config("counts", "required for datasets outside the registry")),
    };
    let id = info.map_or(a.dataset.as_str(), |d| d.id);
    let mut split = make_split(id, &classes, counts, seed)?;
    if a.norm {
        let dir = images.as_ref().ok_or_else(|| RsadError::config("norm", "needs --images"))?;
        split.norm = Some(base_norm(dir, &split)?);
    }
    let out = resolve(wd, &a.out);
    split.save(&out)?;
    run.external_artifact(&out);
    println!(
        "split {id}: {} base / {} val / {} novel -> {}",
        split.base.len(),
        split.val.len(),
        split.novel.len(),
        out.display()
    );
    Ok(())
}

fn cmd_synth(wd: &Path, seed: Option<u64>, a: &SynthMakeArgs, run: &mut RunDir) -> Result<()> {
    let seed = seed.unwrap_or(0);
    run.add_seed(seed);
    let spec = SynthSpec::new(a.classes, a.per_class, a.size, seed);
    let data = generate_synthetic(&spec)?;
    let out = resolve(wd, &a.out);
    write_synthetic(&data, &out)?;
    let mut split = make_split("synthetic", &data.classes, (a.base, a.val, a.novel), seed)?;
    split.norm = Some(NormStats::from_images(
        data.items.iter().filter(|i| split.base.contains(&i.class)).map(|i| &i.image),
    )?);
    split.save(&out.join("split.ndjson"))?;
    let manifest = build_prior_cache(&[out.join("masks")], &out.join("images"), DEFAULT_THRESHOLD, &out.join("priors"))?;
    run.external_artifact(&out);
    println!(
        "synthetic: {} images in {} classes, {} priors -> {}",
        data.items.len(),
        data.classes.len(),
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

/// Images, split and normalization of a config's data section.
fn load_data(wd: &Path, dc: &DataConfig, with_priors: bool, run: &mut RunDir) -> Result<(Dataset, SplitSpec, NormStats)> {
    let images = dc
        .images
        .as_ref()
        .map(|p| resolve(wd, p))
        .ok_or_else(|| RsadError::config("images", "required"))?;
    let split_path = dc
        .split
        .as_ref()
        .map(|p| resolve(wd, p))
        .ok_or_else(|| RsadError::config("split", "required"))?;
    run.add_input(&split_path)?;
    let split = SplitSpec::load(&split_path)?;
    let priors = if with_priors {
        Some(
            dc.priors
                .as_ref()
                .map(|p| resolve(wd, p))
                .ok_or_else(|| RsadError::config("priors", "required when the prior branch is used"))?,
        )
    } else {
        None
    };
    let classes: Vec<String> = [split.base.clone(), split.val.clone(), split.novel.clone()].concat();
    let data = Dataset::load(&images, priors.as_deref(), Some(&classes), dc.max_short_side)?;
    let norm = match split.norm {
        Some(n) => n,
        None => NormStats::from_images(
            data.samples.iter().filter(|s| split.base.contains(&s.class)).map(|s| &s.raw),
        )?,
    };
    Ok((data, split, norm))
}

fn load_run_config(wd: &Path, path: &Path, seed: Option<u64>, run: &mut RunDir) -> Result<RunConfig> {
    let mut cfg = parse_config(&resolve(wd, path), &env_overrides())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    run.set_config(emit_config(&cfg));
    run.add_seed(cfg.train.seed);
    Ok(cfg)
}

fn ndjson_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("record serializes") + "\n"
}

fn cmd_pretrain(wd: &Path, seed: Option<u64>, a: &PretrainArgs, run: &mut RunDir) -> Result<()> {
    let cfg = load_run_config(wd, &a.config, seed, run)?;
    let input = if a.input == "prior" { PretrainInput::Prior } else { PretrainInput::Raw };
    let train = TrainConfig {
        stage: Stage::Pretrain,
        ..cfg.train.clone()
    };
    let (data, split, norm) = load_data(wd, &cfg.data, input == PretrainInput::Prior, run)?;
    let mut log = String::new();
    let p = pretrain::<f32>(&train, &data, &split, norm, input, &mut |m| {
        println!("epoch {} loss {:.4} train acc {:.2} lr {}", m.epoch, m.loss, m.train_acc, m.lr);
        log += &ndjson_line(m);
        Ok(())
    })?;
    write_atomic(&run.artifact("metrics.ndjson"), log.as_bytes())?;
    save_pretrained(&p, &run.artifact("pretrain.ckpt"))?;
    Ok(())
}

fn cmd_train(wd: &Path, seed: Option<u64>, a: &TrainArgs, run: &mut RunDir) -> Result<()> {
    let cfg = load_run_config(wd, &a.config, seed, run)?;
    let (data, split, norm) = load_data(wd, &cfg.data, cfg.train.sag, run)?;
    let mut state = match &a.resume {
        Some(p) => {
            let p = resolve(wd, p);
            run.add_input(&p)?;
            let mut st = load_state::<f32>(&p)?;
            st.config.episodes = cfg.train.episodes;
            st
        }
        None => {
            let mut load = |p: &Option<PathBuf>| -> Result<_> {
                p.as_ref()
                    .map(|p| {
                        let p = resolve(wd, p);
                        run.add_input(&p)?;
                        Ok(load_pretrained::<f32>(&p)?.encoder)
                    })
                    .transpose()
            };
            let enc_a = load(&a.from)?;
            let enc_b = load(&a.from_prior)?;
            TrainState::new(cfg.train.clone(), norm, enc_a, enc_b)?
        }
    };
    let metrics_path = run.artifact("metrics.ndjson");
    let mut log = String::new();
    episodic_train(&mut state, &data, &split, &mut |m| {
        if m.step % 50 == 0 || m.val_acc.is_some() {
            println!(
                "step {} cls1 {:.4} cls2 {:.4} sag {:.4} total {:.4}{}",
                m.step,
                m.cls1,
                m.cls2,
                m.sag,
                m.total,
                m.val_acc.map(|v| format!(" val {v:.2}")).unwrap_or_default()
            );
        }
        log += &ndjson_line(m);
        Ok(())
    })?;
    write_atomic(&metrics_path, log.as_bytes())?;
    save_state(&state, &run.artifact("state.ckpt"))?;
    if let Some(best) = state.best {
        println!("best validation {:.2} at step {}", best.val_acc, best.step);
    }
    Ok(())
}

fn cmd_export(wd: &Path, a: &ExportArgs, run: &mut RunDir) -> Result<()> {
    let state_path = resolve(wd, &a.state);
    run.add_input(&state_path)?;
    let state = load_state::<f32>(&state_path)?;
    let out = match &a.out {
        Some(p) => {
            let p = resolve(wd, p);
            run.external_artifact(&p);
            p
        }
        None => run.artifact("model.ckpt"),
    };
    let model = export_main_branch(&state, &out)?;
    println!("exported main branch: {}", report_complexity(&model.branch));
    Ok(())
}

fn eval_inputs(wd: &Path, model: &Path, d: &DataArgs, run: &mut RunDir) -> Result<(Model<f32>, Dataset, SplitSpec, String)> {
    let path = resolve(wd, model);
    run.add_input(&path)?;
    let bytes = fs::read(&path).map_err(|e| RsadError::io(&path, e))?;
    let model_id = sha256_hex(&bytes)[..16].to_string();
    let model = load_model::<f32>(&path)?;
    let dc = DataConfig {
        images: Some(d.images.clone()),
        priors: None,
        split: Some(d.split_file.clone()),
        max_short_side: d.max_short_side,
    };
    let (data, split, _) = load_data(wd, &dc, false, run)?;
    Ok((model, data, split, model_id))
}

fn cmd_eval(wd: &Path, seed: Option<u64>, a: &EvalArgs, run: &mut RunDir) -> Result<()> {
    let seed = seed.unwrap_or(0);
    run.add_seed(seed);
    let (model, data, split, model_id) = eval_inputs(wd, &a.model, &a.data, run)?;
    let section = data.section(split.section(a.split))?;
    let ctx = EvalContext {
        dataset: split.dataset_id.clone(),
        section: a.split.to_string(),
        model_id,
    };
    let report = evaluate(&model, &data, &section, EpisodeShape::new(a.way, a.shot, a.query), a.episodes, seed, &ctx)?;
    write_atomic(&run.artifact("report.ndjson"), ndjson_line(&report).as_bytes())?;
    println!("{}", report.line());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbiReport {
    pub dataset: String,
    pub section: String,
    pub episodes: usize,
    pub points: usize,
    pub seed: u64,
    pub dbi: f64,
    pub model_id: String,
}

fn cmd_dbi(wd: &Path, seed: Option<u64>, a: &DbiArgs, run: &mut RunDir) -> Result<()> {
    let seed = seed.unwrap_or(0);
    run.add_seed(seed);
    let (model, data, split, model_id) = eval_inputs(wd, &a.model, &a.data, run)?;
    let section = data.section(split.section(a.split))?;
    let shape = EpisodeShape::new(a.way, a.shot, a.query);
    let (embs, labels) = query_embeddings(&model, &data, &section, shape, a.episodes, seed)?;
    let report = DbiReport {
        dataset: split.dataset_id.clone(),
        section: a.split.to_string(),
        episodes: a.episodes,
        points: embs.len(),
        seed,
        dbi: dbi(&embs, &labels)?,
        model_id,
    };
    write_atomic(&run.artifact("report.ndjson"), ndjson_line(&report).as_bytes())?;
    println!("{} {} DBI {:.4} over {} embeddings", report.dataset, report.section, report.dbi, report.points);
    Ok(())
}

/// Keys an ablation spec file accepts on top of the config keys.
pub const ABLATION_KEYS: [&str; 4] = ["preset", "eval_episodes", "eval_section", "from"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub row: AblationSpec,
    pub report: EvalReport,
}

fn cmd_ablate(wd: &Path, seed: Option<u64>, a: &AblateArgs, run: &mut RunDir) -> Result<()> {
    let path = resolve(wd, &a.spec);
    let text = fs::read_to_string(&path).map_err(|e| RsadError::io(&path, e))?;
    let mut pairs = parse_pairs(&text)?;
    let mut extra = BTreeMap::new();
    for k in ABLATION_KEYS {
        if let Some(v) = pairs.remove(k) {
            extra.insert(k, v);
        }
    }
    let rest: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    let mut cfg = parse_config_text(&rest, &env_overrides())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    run.set_config(text.clone());
    run.add_seed(cfg.train.seed);
    let rows = ablation_preset(extra.get("preset").map_or("components", String::as_str), cfg.train.alpha)?;
    let episodes: usize = extra
        .get("eval_episodes")
        .map_or(Ok(600), |v| typed("eval_episodes", v, "an integer"))?;
    let section: Section = extra
        .get("eval_section")
        .map_or(Ok(Section::Novel), |v| v.parse().map_err(|e| rekey(e, "eval_section")))?;
    let needs_priors = rows.iter().any(|r| r.sag);
    let (data, split, norm) = load_data(wd, &cfg.data, needs_priors, run)?;
    let init = extra
        .get("from")
        .map(|p| {
            let p = resolve(wd, Path::new(p));
            run.add_input(&p)?;
            Ok::<_, RsadError>(load_pretrained::<f32>(&p)?.encoder)
        })
        .transpose()?;
    let eval_section = data.section(split.section(section))?;
    let mut results = Vec::new();
    let mut log = String::new();
    for row in rows {
        let train = TrainConfig {
            sag: row.sag,
            rhs: row.rhs,
            alpha: row.alpha,
            variant: row.variant,
            ..cfg.train.clone()
        };
        let mut state = TrainState::new(train, norm, init.clone(), None)?;
        episodic_train(&mut state, &data, &split, &mut |_| Ok(()))?;
        let ctx = EvalContext {
            dataset: split.dataset_id.clone(),
            section: section.to_string(),
            model_id: row.name.clone(),
        };
        let report = evaluate(
            &state.main_model(),
            &data,
            &eval_section,
            cfg.train.eval_shape(),
            episodes,
            cfg.train.seed,
            &ctx,
        )?;
        println!("{}: {}", row.name, report.line());
        log += &ndjson_line(&AblationRecord {
            row: row.clone(),
            report: report.clone(),
        });
        results.push((row, report));
    }
    let table = ablation_table(&results);
    print!("{table}");
    write_atomic(&run.artifact("ablation.ndjson"), log.as_bytes())?;
    write_atomic(&run.artifact("table.txt"), table.as_bytes())?;
    Ok(())
}
