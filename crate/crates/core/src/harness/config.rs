//! Experiment configuration in a flat `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to the toy default; unknown keys are rejected.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::asa::{Sampling, SelectionMode, WarpAxes, DEFAULT_TOP_K};
use crate::backbone::{Backbone, TextConfig, VisualConfig};
use crate::error::{Error, Result};
use crate::lorm::{DecomposeMode, ModulationShape, TextModLevel};
use crate::retrieval::{DEFAULT_DSL_TEMPERATURE, DEFAULT_LOG_TAU};

/// Which layers receive adapters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSet {
    All,
    Last(usize),
    List(Vec<usize>),
}

impl LayerSet {
    /// Concrete 1-based layers for a tower of depth `depth`.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let layers = match self {
            LayerSet::All => (1..=depth).collect(),
            LayerSet::Last(n) => {
                if *n == 0 || *n > depth {
                    return Err(Error::Config(format!("last-{n} outside a {depth}-layer tower")));
                }
                (depth - n + 1..=depth).collect()
            }
            LayerSet::List(l) => {
                let mut l = l.clone();
                l.sort_unstable();
                l.dedup();
                if l.is_empty() || l[0] == 0 || *l.last().unwrap() > depth {
                    return Err(Error::Config(format!("adapter layers {l:?} outside [1, {depth}]")));
                }
                l
            }
        };
        Ok(layers)
    }
}

impl FromStr for LayerSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSet::All);
        }
        if let Some(n) = s.strip_prefix("last-") {
            return n
                .parse()
                .map(LayerSet::Last)
                .map_err(|_| Error::Config(format!("bad layer set `{s}`")));
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(LayerSet::List)
            .map_err(|_| Error::Config(format!("bad layer set `{s}`")))
    }
}

impl std::fmt::Display for LayerSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LayerSet::All => f.write_str("all"),
            LayerSet::Last(n) => write!(f, "last-{n}"),
            LayerSet::List(l) => {
                let parts: Vec<String> = l.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

/// How the retrieval projection starts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjInit {
    /// Ridge regression from pooled video features to text features on a
    /// held-out generated set.
    Aligned,
    Random,
}

impl FromStr for ProjInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(ProjInit::Aligned),
            "random" => Ok(ProjInit::Random),
            _ => Err(Error::Config(format!("unknown proj_init `{s}`"))),
        }
    }
}

impl ProjInit {
    pub fn name(self) -> &'static str {
        match self {
            ProjInit::Aligned => "aligned",
            ProjInit::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub visual: VisualConfig,
    pub text: TextConfig,

    pub rank: usize,
    pub top_k: usize,
    pub selection: SelectionMode,
    pub warp_axes: WarpAxes,
    pub sampling: Sampling,
    pub decompose: DecomposeMode,
    pub adapter_layers: LayerSet,
    /// `None` disables text modulation.
    pub text_mod: Option<TextModLevel>,
    pub asa: bool,
    pub train_head: bool,
    pub proj_init: ProjInit,
    pub align_pairs: usize,
    pub align_ridge: f64,

    pub lr: f64,
    pub warmup: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub stop_at_perfect: bool,
    pub seed: u64,
    pub backbone_seed: u64,
    pub data_seed: u64,
    pub pairs: usize,
    pub dsl: bool,
    pub dsl_temperature: f64,
    pub log_tau_init: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn toy() -> Self {
        Self {
            visual: VisualConfig {
                layers: 4,
                dim: 32,
                heads: 4,
                patch: 4,
                height: 8,
                width: 8,
                channels: 3,
                frames: 6,
                mlp_ratio: 2,
            },
            text: TextConfig {
                layers: 2,
                dim: 24,
                heads: 4,
                vocab: 64,
                max_len: 16,
                mlp_ratio: 2,
            },
            rank: 3,
            top_k: DEFAULT_TOP_K,
            selection: SelectionMode::TextTopK,
            warp_axes: WarpAxes::Both,
            sampling: Sampling::Bilinear,
            decompose: DecomposeMode::Temporal,
            adapter_layers: LayerSet::All,
            text_mod: Some(TextModLevel::Sentence),
            asa: true,
            train_head: true,
            proj_init: ProjInit::Aligned,
            align_pairs: 64,
            align_ridge: 1.0,
            lr: 1e-4,
            warmup: 0.1,
            epochs: 5,
            batch_size: 16,
            stop_at_perfect: false,
            seed: 0,
            backbone_seed: 0,
            data_seed: 1,
            pairs: 16,
            dsl: false,
            dsl_temperature: DEFAULT_DSL_TEMPERATURE,
            log_tau_init: DEFAULT_LOG_TAU,
        }
    }

    /// A ViT-B/32-shaped configuration used for parameter accounting.
    pub fn vit_b32() -> Self {
        Self {
            visual: VisualConfig {
                layers: 12,
                dim: 768,
                heads: 12,
                patch: 32,
                height: 224,
                width: 224,
                channels: 3,
                frames: 12,
                mlp_ratio: 4,
            },
            text: TextConfig {
                layers: 12,
                dim: 512,
                heads: 8,
                vocab: 49408,
                max_len: 77,
                mlp_ratio: 4,
            },
            ..Self::toy()
        }
    }

    /// Frozen backbone with nothing but the retrieval head.
    pub fn is_baseline(&self) -> bool {
        self.decompose == DecomposeMode::None && !self.asa && self.text_mod.is_none()
    }

    pub fn backbone(&self) -> Result<Backbone> {
        Backbone::new(self.visual.clone(), self.text.clone())
    }

    pub fn layers(&self) -> Result<Vec<usize>> {
        self.adapter_layers.resolve(self.visual.layers)
    }

    pub fn modulation_shape(&self) -> Result<ModulationShape> {
        Ok(ModulationShape {
            frames: self.visual.frames,
            tokens: self.visual.tokens(),
            dim: self.visual.dim,
            rank: self.rank,
            layers: self.layers()?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.text.validate()?;
        self.layers()?;
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if self.decompose != DecomposeMode::None && self.rank > self.visual.frames.min(self.visual.dim) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(frames, dim_v) = {}",
                self.rank,
                self.visual.frames.min(self.visual.dim)
            )));
        }
        if self.top_k > self.visual.patches() {
            return Err(Error::Config(format!(
                "top_k {} exceeds {} patches",
                self.top_k,
                self.visual.patches()
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::Config("warmup must lie in [0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.pairs < 2 {
            return Err(Error::Config("pairs must be at least 2".into()));
        }
        if !(self.dsl_temperature > 0.0) {
            return Err(Error::Config("dsl_temperature must be positive".into()));
        }
        if !self.log_tau_init.is_finite() || !self.align_ridge.is_finite() || self.align_ridge < 0.0 {
            return Err(Error::Config("log_tau_init and align_ridge must be finite".into()));
        }
        if self.proj_init == ProjInit::Aligned && self.align_pairs < 2 {
            return Err(Error::Config("align_pairs must be at least 2".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "yes" => Ok(true),
                "false" | "off" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        let v = value;
        match key {
            "layers" => self.visual.layers = p(key, v)?,
            "dim_v" => self.visual.dim = p(key, v)?,
            "heads" => self.visual.heads = p(key, v)?,
            "patch" => self.visual.patch = p(key, v)?,
            "height" => self.visual.height = p(key, v)?,
            "width" => self.visual.width = p(key, v)?,
            "channels" => self.visual.channels = p(key, v)?,
            "frames" => self.visual.frames = p(key, v)?,
            "mlp_ratio" => {
                self.visual.mlp_ratio = p(key, v)?;
                self.text.mlp_ratio = self.visual.mlp_ratio;
            }
            "text_layers" => self.text.layers = p(key, v)?,
            "dim_t" => self.text.dim = p(key, v)?,
            "text_heads" => self.text.heads = p(key, v)?,
            "vocab" => self.text.vocab = p(key, v)?,
            "max_len" => self.text.max_len = p(key, v)?,
            "rank" => self.rank = p(key, v)?,
            "top_k" => self.top_k = p(key, v)?,
            "selection" => self.selection = v.parse()?,
            "warp_axes" => self.warp_axes = v.parse()?,
            "sampling" => self.sampling = v.parse()?,
            "decompose" => self.decompose = v.parse()?,
            "adapter_layers" => self.adapter_layers = v.parse()?,
            "text_mod" => {
                self.text_mod = match v {
                    "off" | "false" | "none" => None,
                    other => Some(other.parse()?),
                }
            }
            "asa" => self.asa = flag(key, v)?,
            "train_head" => self.train_head = flag(key, v)?,
            "proj_init" => self.proj_init = v.parse()?,
            "align_pairs" => self.align_pairs = p(key, v)?,
            "align_ridge" => self.align_ridge = p(key, v)?,
            "lr" => self.lr = p(key, v)?,
            "warmup" => self.warmup = p(key, v)?,
            "epochs" => self.epochs = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "stop_at_perfect" => self.stop_at_perfect = flag(key, v)?,
            "seed" => self.seed = p(key, v)?,
            "backbone_seed" => self.backbone_seed = p(key, v)?,
            "data_seed" => self.data_seed = p(key, v)?,
            "pairs" => self.pairs = p(key, v)?,
            "dsl" => self.dsl = flag(key, v)?,
            "dsl_temperature" => self.dsl_temperature = p(key, v)?,
            "log_tau_init" => self.log_tau_init = p(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let v = &self.visual;
        let t = &self.text;
        let mut s = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("layers", v.layers.to_string());
        kv("dim_v", v.dim.to_string());
        kv("heads", v.heads.to_string());
        kv("patch", v.patch.to_string());
        kv("height", v.height.to_string());
        kv("width", v.width.to_string());
        kv("channels", v.channels.to_string());
        kv("frames", v.frames.to_string());
        kv("mlp_ratio", v.mlp_ratio.to_string());
        kv("text_layers", t.layers.to_string());
        kv("dim_t", t.dim.to_string());
        kv("text_heads", t.heads.to_string());
        kv("vocab", t.vocab.to_string());
        kv("max_len", t.max_len.to_string());
        kv("rank", self.rank.to_string());
        kv("top_k", self.top_k.to_string());
        kv("selection", self.selection.name().into());
        kv("warp_axes", self.warp_axes.name().into());
        kv("sampling", self.sampling.name().into());
        kv("decompose", self.decompose.name().into());
        kv("adapter_layers", self.adapter_layers.to_string());
        kv("text_mod", self.text_mod.map_or("off", TextModLevel::name).into());
        kv("asa", self.asa.to_string());
        kv("train_head", self.train_head.to_string());
        kv("proj_init", self.proj_init.name().into());
        kv("align_pairs", self.align_pairs.to_string());
        kv("align_ridge", format!("{:?}", self.align_ridge));
        kv("lr", format!("{:?}", self.lr));
        kv("warmup", format!("{:?}", self.warmup));
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("stop_at_perfect", self.stop_at_perfect.to_string());
        kv("seed", self.seed.to_string());
        kv("backbone_seed", self.backbone_seed.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("pairs", self.pairs.to_string());
        kv("dsl", self.dsl.to_string());
        kv("dsl_temperature", format!("{:?}", self.dsl_temperature));
        kv("log_tau_init", format!("{:?}", self.log_tau_init));
        s
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
