//! Run configuration: flat `key = value` lines with dotted keys.
//!
//! A `[section]` line prefixes the keys that follow it, so `[train]` then
//! `lr = 0.001` is the same as `train.lr = 0.001`. `#` starts a comment.
//! Every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tialab_core::adapters::{AdapterConfig, AdapterKind};
use tialab_core::backbone::{BackboneConfig, EncodeMode, Representation};
use tialab_core::data::SyntheticSpec;
use tialab_core::eval::EvalConfig;
use tialab_core::head::{FocalNorm, HeadConfig};
use tialab_core::memory::Precision;
use tialab_core::pipeline::{InferenceConfig, ModelConfig, TrainConfig};

use crate::error::{io_err, Error, Result};

pub const SEED_ENV: &str = "TIALAB_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset directory with `train/` and `test/`; generated when unset.
    pub path: Option<PathBuf>,
    pub train_videos: usize,
    pub test_videos: usize,
    pub spec: SyntheticSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub metric: EvalConfig,
    pub split: Split,
    /// Directory holding `model.manifest`; the output directory when unset.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MembenchConfig {
    pub frames: Vec<usize>,
    pub precision: Precision,
    /// Clip length for the measured retained-tensor runs.
    pub measure_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateConfig {
    pub axis: String,
    /// Overrides the axis' default settings when non-empty.
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub mode: EncodeMode,
    /// Outside adapters on the last half of the blocks only.
    pub last_half: bool,
    pub representation: Representation,
    pub adapter_kind: AdapterKind,
    pub adapter_gamma: usize,
    pub adapter_kernel: usize,
    pub head: HeadConfig,
    pub train: TrainConfig,
    /// Evaluate on both splits every this many epochs; 0 evaluates only
    /// after the last epoch.
    pub eval_every: usize,
    pub eval: EvalSettings,
    pub membench: MembenchConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                path: None,
                train_videos: 200,
                test_videos: 50,
                spec: SyntheticSpec::default(),
            },
            backbone: BackboneConfig::default(),
            mode: EncodeMode::AdapterInside,
            last_half: false,
            representation: Representation::Frame,
            adapter_kind: AdapterKind::Tia,
            adapter_gamma: 4,
            adapter_kernel: 3,
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            eval_every: 0,
            eval: EvalSettings {
                metric: EvalConfig::default(),
                split: Split::Test,
                checkpoint: None,
            },
            membench: MembenchConfig {
                frames: vec![128, 256, 512],
                precision: Precision::Fp32,
                measure_frames: 32,
            },
            ablate: AblateConfig {
                axis: "mode".into(),
                values: Vec::new(),
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn parse_named<T>(key: &str, v: &str, f: impl Fn(&str) -> Option<T>, expected: &str) -> Result<T> {
    f(v).ok_or_else(|| Error::Config(format!("{key}: unknown value {v:?} (expected one of {expected})")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Base name of an encode mode; the last-half flag is its own key.
fn mode_base(mode: EncodeMode) -> &'static str {
    match mode {
        EncodeMode::AdapterOutside { .. } => "adapter_outside",
        m => m.name(),
    }
}

impl RunConfig {
    /// Sets one key. Returns `Ok(false)` for keys that do not exist.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let v = v.trim();
        let s = &mut self.data.spec;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.path" => self.data.path = opt_path(v),
            "data.train_videos" => self.data.train_videos = parse(key, v)?,
            "data.test_videos" => self.data.test_videos = parse(key, v)?,
            "data.classes" => s.classes = parse(key, v)?,
            "data.min_frames" => s.frames.0 = parse(key, v)?,
            "data.max_frames" => s.frames.1 = parse(key, v)?,
            "data.min_actions" => s.actions.0 = parse(key, v)?,
            "data.max_actions" => s.actions.1 = parse(key, v)?,
            "data.min_action_frames" => s.action_frames.0 = parse(key, v)?,
            "data.max_action_frames" => s.action_frames.1 = parse(key, v)?,
            "data.amplitude" => s.amplitude = parse(key, v)?,
            "data.noise" => s.noise = parse(key, v)?,
            "data.size" => s.size = parse(key, v)?,
            "data.channels" => s.channels = parse(key, v)?,
            "data.fps" => s.fps = parse(key, v)?,
            "data.base_frequency" => s.base_frequency = parse(key, v)?,
            "data.blob_sigma" => s.blob_sigma = parse(key, v)?,
            "data.exclusive" => s.exclusive = parse(key, v)?,
            "backbone.layers" => self.backbone.layers = parse(key, v)?,
            "backbone.dim" => self.backbone.dim = parse(key, v)?,
            "backbone.heads" => self.backbone.heads = parse(key, v)?,
            "backbone.chunk_len" => self.backbone.chunk_len = parse(key, v)?,
            "backbone.patch" => self.backbone.patch = parse(key, v)?,
            "backbone.frame_size" => self.backbone.frame_size = parse(key, v)?,
            "backbone.mlp_ratio" => self.backbone.mlp_ratio = parse(key, v)?,
            "model.mode" => {
                let m = parse_named(key, v, EncodeMode::parse, "frozen, full_ft, adapter_inside, adapter_outside, full_ft_plus_tia")?;
                if let EncodeMode::AdapterOutside { adapt_last_half: true } = m {
                    self.last_half = true;
                }
                self.mode = m;
                self.sync_last_half();
            }
            "model.representation" => self.representation = parse_named(key, v, Representation::parse, "frame, snippet")?,
            "adapter.kind" => self.adapter_kind = parse_named(key, v, AdapterKind::parse, "standard, tia, tia_no_residual")?,
            "adapter.gamma" => self.adapter_gamma = parse(key, v)?,
            "adapter.kernel" => self.adapter_kernel = parse(key, v)?,
            "adapter.last_half" => {
                self.last_half = parse(key, v)?;
                self.sync_last_half();
            }
            "head.levels" => self.head.levels = parse(key, v)?,
            "head.width" => self.head.width = parse(key, v)?,
            "head.kernel" => self.head.kernel = parse(key, v)?,
            "head.tower_layers" => self.head.tower_layers = parse(key, v)?,
            "head.stem_layers" => self.head.stem_layers = parse(key, v)?,
            "head.range_bounds" => self.head.range_bounds = parse_list(key, v)?,
            "head.score_threshold" => self.head.score_threshold = parse(key, v)?,
            "head.nms_threshold" => self.head.nms_threshold = parse(key, v)?,
            "head.max_proposals" => self.head.max_proposals = parse(key, v)?,
            "head.prior" => self.head.prior = parse(key, v)?,
            "head.focal_norm" => self.head.focal_norm = parse_named(key, v, FocalNorm::parse, "locations, positives")?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.warmup_epochs" => self.train.warmup_epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.encoder_lr" => self.train.encoder_lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.window" => self.train.window = parse(key, v)?,
            "train.frame_stride" => self.train.frame_stride = parse(key, v)?,
            "train.overlap" => self.train.overlap = parse(key, v)?,
            "train.keep_ratio" => self.train.keep_ratio = parse(key, v)?,
            "train.augment" => self.train.augment = parse(key, v)?,
            "train.checkpoint" => self.train.checkpoint = parse(key, v)?,
            "train.eval_every" => self.eval_every = parse(key, v)?,
            "eval.thresholds" => self.eval.metric.thresholds = parse_list(key, v)?,
            "eval.split" => {
                self.eval.split = match v {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(Error::Config(format!("eval.split: unknown value {v:?} (expected train or test)"))),
                }
            }
            "eval.checkpoint" => self.eval.checkpoint = opt_path(v),
            "membench.frames" => self.membench.frames = parse_list(key, v)?,
            "membench.precision" => self.membench.precision = parse_named(key, v, Precision::parse, "fp32, mixed")?,
            "membench.measure_frames" => self.membench.measure_frames = parse(key, v)?,
            "ablate.axis" => self.ablate.axis = v.to_string(),
            "ablate.values" => {
                self.ablate.values = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|x| x.trim().to_string()).collect()
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn sync_last_half(&mut self) {
        if let EncodeMode::AdapterOutside { .. } = self.mode {
            self.mode = EncodeMode::AdapterOutside {
                adapt_last_half: self.last_half,
            };
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.data.spec;
        let b = &self.backbone;
        let h = &self.head;
        let t = &self.train;
        vec![
            ("seed", self.seed.to_string()),
            ("data.path", path_str(&self.data.path)),
            ("data.train_videos", self.data.train_videos.to_string()),
            ("data.test_videos", self.data.test_videos.to_string()),
            ("data.classes", s.classes.to_string()),
            ("data.min_frames", s.frames.0.to_string()),
            ("data.max_frames", s.frames.1.to_string()),
            ("data.min_actions", s.actions.0.to_string()),
            ("data.max_actions", s.actions.1.to_string()),
            ("data.min_action_frames", s.action_frames.0.to_string()),
            ("data.max_action_frames", s.action_frames.1.to_string()),
            ("data.amplitude", s.amplitude.to_string()),
            ("data.noise", s.noise.to_string()),
            ("data.size", s.size.to_string()),
            ("data.channels", s.channels.to_string()),
            ("data.fps", s.fps.to_string()),
            ("data.base_frequency", s.base_frequency.to_string()),
            ("data.blob_sigma", s.blob_sigma.to_string()),
            ("data.exclusive", s.exclusive.to_string()),
            ("backbone.layers", b.layers.to_string()),
            ("backbone.dim", b.dim.to_string()),
            ("backbone.heads", b.heads.to_string()),
            ("backbone.chunk_len", b.chunk_len.to_string()),
            ("backbone.patch", b.patch.to_string()),
            ("backbone.frame_size", b.frame_size.to_string()),
            ("backbone.mlp_ratio", b.mlp_ratio.to_string()),
            ("model.mode", mode_base(self.mode).to_string()),
            ("model.representation", self.representation.name().to_string()),
            ("adapter.kind", self.adapter_kind.name().to_string()),
            ("adapter.gamma", self.adapter_gamma.to_string()),
            ("adapter.kernel", self.adapter_kernel.to_string()),
            ("adapter.last_half", self.last_half.to_string()),
            ("head.levels", h.levels.to_string()),
            ("head.width", h.width.to_string()),
            ("head.kernel", h.kernel.to_string()),
            ("head.tower_layers", h.tower_layers.to_string()),
            ("head.stem_layers", h.stem_layers.to_string()),
            ("head.range_bounds", join(&h.range_bounds)),
            ("head.score_threshold", h.score_threshold.to_string()),
            ("head.nms_threshold", h.nms_threshold.to_string()),
            ("head.max_proposals", h.max_proposals.to_string()),
            ("head.prior", h.prior.to_string()),
            ("head.focal_norm", h.focal_norm.name().to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.encoder_lr", t.encoder_lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.window", t.window.to_string()),
            ("train.frame_stride", t.frame_stride.to_string()),
            ("train.overlap", t.overlap.to_string()),
            ("train.keep_ratio", t.keep_ratio.to_string()),
            ("train.augment", t.augment.to_string()),
            ("train.checkpoint", t.checkpoint.to_string()),
            ("train.eval_every", self.eval_every.to_string()),
            ("eval.thresholds", join(&self.eval.metric.thresholds)),
            ("eval.split", self.eval.split.name().to_string()),
            ("eval.checkpoint", path_str(&self.eval.checkpoint)),
            ("membench.frames", join(&self.membench.frames)),
            ("membench.precision", self.membench.precision.name().to_string()),
            ("membench.measure_frames", self.membench.measure_frames.to_string()),
            ("ablate.axis", self.ablate.axis.clone()),
            ("ablate.values", self.ablate.values.join(",")),
        ]
    }

    /// Applies `key = value` text on top of the current values. All unknown
    /// keys are reported together.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut section = String::new();
        let mut unknown = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{origin}:{}: expected `key = value`, got {raw:?}", no + 1)));
            };
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            if !self.set(&key, v)? {
                unknown.push(key);
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownKeys(unknown))
        }
    }

    /// Applies `key=value` overrides, reporting all unknown keys together.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> Result<()> {
        let mut unknown = Vec::new();
        for s in sets {
            let s = s.as_ref();
            let Some((k, v)) = s.split_once('=') else {
                return Err(Error::Config(format!("--set expects key=value, got {s:?}")));
            };
            if !self.set(k.trim(), v)? {
                unknown.push(k.trim().to_string());
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::UnknownKeys(unknown))
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "<config>")?;
        c.validate()?;
        Ok(c)
    }

    /// Defaults, then the file, then `--set` overrides, then the seed
    /// environment variable.
    pub fn load(path: Option<&Path>, sets: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            c.apply_text(&text, &p.display().to_string())?;
        }
        c.apply_overrides(sets)?;
        if let Some(s) = env_seed {
            c.seed = parse(SEED_ENV, s.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    /// The fully resolved configuration in the input format.
    pub fn echo(&self) -> String {
        let mut out = String::from("# fully resolved configuration; rerun with --config on this file\n");
        let mut section = "";
        for (k, v) in self.entries() {
            let (sec, name) = k.split_once('.').unwrap_or(("", k));
            if sec != section {
                let _ = writeln!(out, "\n[{sec}]");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {v}");
        }
        out
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig {
            dim: self.backbone.dim,
            gamma: self.adapter_gamma,
            kernel: self.adapter_kernel,
            kind: self.adapter_kind,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                channels: self.data.spec.channels,
                ..self.backbone
            },
            mode: self.mode,
            adapter: self.adapter(),
            head: HeadConfig {
                classes: self.data.spec.classes,
                ..self.head.clone()
            },
            repr: self.representation,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig::from(&self.train)
    }

    pub fn data_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            ..self.data.spec.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data_spec().validate()?;
        let m = self.model();
        m.backbone.validate()?;
        m.head.validate()?;
        if m.mode != EncodeMode::Frozen && m.mode != EncodeMode::FullFT {
            m.adapter.validate()?;
        }
        self.train_config().validate()?;
        self.eval.metric.validate()?;
        if self.last_half && !matches!(self.mode, EncodeMode::AdapterOutside { .. }) {
            return Err(Error::Config("adapter.last_half only applies to model.mode = adapter_outside".into()));
        }
        if self.data.train_videos == 0 {
            return Err(Error::Config("data.train_videos must be positive".into()));
        }
        if self.data.spec.size % self.backbone.frame_size != 0 {
            return Err(Error::Config(format!(
                "data.size {} is not a multiple of backbone.frame_size {}",
                self.data.spec.size, self.backbone.frame_size
            )));
        }
        if self.train.window < m.head.min_length() {
            return Err(Error::Config(format!(
                "train.window {} is shorter than the head's minimum {}",
                self.train.window,
                m.head.min_length()
            )));
        }
        if !(0.0..1.0).contains(&self.train.overlap) {
            return Err(Error::Config(format!("train.overlap must be in [0, 1), got {}", self.train.overlap)));
        }
        Ok(())
    }
}
