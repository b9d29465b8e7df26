//! Experiment configuration as flat dotted keys.
//!
//! A config file holds `key = value` lines (`#` starts a comment). Values are
//! parsed against the type of the key's default, so `mask.ratio = 0.3` and
//! `mask.cube = [8, 10, 10]` both work and `mask.ratio = high` does not.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use mlr::agents::{agents, AgentSpec, RainbowConfig, SacConfig};
use mlr::envs::{environments, EnvSpec};
use mlr::mlr::{LossMetric, MlrConfig, TargetSpace};
use mlr::nets::{EncoderConfig, EncoderVariant, HeadConfig};
use mlr::pixelops::{mask_strategy, AugmentSpec, CropMode, CropSpec, CubeMaskSpec, IntensitySpec};
use mlr::replay::{PriorityConfig, ReplayBuffer};
use mlr::rng::SeedStreams;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSection {
    pub id: String,
    pub action_repeat: usize,
    pub frame_stack: usize,
    pub max_episode_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    /// Budget in raw environment frames.
    pub env_steps: u64,
    pub updates_per_step: usize,
    /// Environment frames between evaluations; 0 disables them.
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Updates between loss records.
    pub log_every: u64,
    /// Windows used for the final regression-accuracy record; 0 skips it.
    pub regression_samples: usize,
    /// MLR-only updates run by `pretrain`.
    pub pretrain_updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplaySection {
    pub capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSection {
    /// `continuous`, `discrete` or `tabular`.
    pub variant: String,
    pub latent_dim: usize,
    pub channels: usize,
    pub conv_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSection {
    /// Crop output `[h, w]`.
    pub size: [usize; 2],
    pub margin: usize,
    /// `render` or `pad`.
    pub mode: String,
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrSection {
    pub lambda: f64,
    pub seq_len: usize,
    /// `latent` or `pixel`.
    pub target: String,
    /// `cosine` or `mse`.
    pub loss: String,
    pub action_tokens: bool,
    pub momentum_decoder: bool,
    pub projection: bool,
    pub prediction: bool,
    pub head_hidden: usize,
    pub projection_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub warmup: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSection {
    /// `[k, h, w]`.
    pub cube: [usize; 3],
    pub ratio: f64,
    pub strategy: String,
    pub fill: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
    /// Environment frames between checkpoints; 0 keeps only the initial and
    /// final ones.
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: String,
    pub task: String,
    pub agent: String,
    pub seeds: Vec<u64>,
    pub env: EnvSection,
    pub train: TrainSection,
    pub replay: ReplaySection,
    pub encoder: EncoderSection,
    pub augment: AugmentSection,
    pub mlr: MlrSection,
    pub mask: MaskSection,
    pub sac: SacConfig,
    pub rainbow: RainbowConfig,
    pub output: OutputSection,
}

pub const PRESETS: [&str; 4] = ["continuous", "discrete", "desk_continuous", "desk_discrete"];

fn continuous() -> ExperimentConfig {
    ExperimentConfig {
        preset: "continuous".into(),
        task: String::new(),
        agent: "sac".into(),
        seeds: vec![0],
        env: EnvSection { id: "pendulum".into(), action_repeat: 4, frame_stack: 3, max_episode_frames: 1000 },
        train: TrainSection {
            env_steps: 100_000,
            updates_per_step: 1,
            eval_every: 10_000,
            eval_episodes: 10,
            log_every: 100,
            regression_samples: 0,
            pretrain_updates: 0,
        },
        replay: ReplaySection { capacity: 100_000 },
        encoder: EncoderSection { variant: "continuous".into(), latent_dim: 50, channels: 32, conv_layers: 4 },
        augment: AugmentSection { size: [84, 84], margin: 16, mode: "render".into(), intensity: 0.05 },
        mlr: MlrSection {
            lambda: 1.0,
            seq_len: 16,
            target: "latent".into(),
            loss: "cosine".into(),
            action_tokens: true,
            momentum_decoder: false,
            projection: true,
            prediction: true,
            head_hidden: 256,
            projection_dim: 128,
            decoder_layers: 2,
            decoder_heads: 1,
            mlp_ratio: 2,
            warmup: 6000,
            batch: 128,
            lr: 5e-4,
            momentum: 0.95,
        },
        mask: MaskSection { cube: [8, 10, 10], ratio: 0.5, strategy: "cube".into(), fill: 0.0 },
        sac: SacConfig::default(),
        rainbow: RainbowConfig::default(),
        output: OutputSection { dir: "runs".into(), checkpoint_every: 0 },
    }
}

fn discrete() -> ExperimentConfig {
    let mut c = continuous();
    c.preset = "discrete".into();
    c.agent = "rainbow".into();
    c.env = EnvSection { id: "catch".into(), action_repeat: 4, frame_stack: 4, max_episode_frames: 108_000 };
    c.train.env_steps = 400_000;
    c.train.updates_per_step = 2;
    c.train.eval_every = 100_000;
    c.train.eval_episodes = 100;
    c.encoder = EncoderSection { variant: "discrete".into(), latent_dim: 256, channels: 32, conv_layers: 3 };
    c.augment = AugmentSection { size: [84, 84], margin: 8, mode: "pad".into(), intensity: 0.05 };
    c.mlr.warmup = 0;
    c.mlr.batch = 32;
    c.mlr.lr = 1e-4;
    c.mlr.momentum = 0.0;
    c.mask.cube = [8, 12, 12];
    c
}

/// Pendulum at a size a single CPU core trains in minutes.
fn desk_continuous() -> ExperimentConfig {
    let mut c = continuous();
    c.preset = "desk_continuous".into();
    c.env = EnvSection { id: "pendulum".into(), action_repeat: 8, frame_stack: 3, max_episode_frames: 200 };
    c.train.env_steps = 30_000;
    c.train.eval_every = 5_000;
    c.train.eval_episodes = 5;
    c.train.log_every = 50;
    c.train.regression_samples = 32;
    c.replay.capacity = 30_000;
    c.encoder.channels = 8;
    c.augment = AugmentSection { size: [32, 32], margin: 8, mode: "render".into(), intensity: 0.05 };
    c.mlr.seq_len = 8;
    c.mlr.batch = 8;
    c.mlr.warmup = 500;
    c.mask.cube = [4, 8, 8];
    c.sac.batch = 64;
    c.sac.hidden_dim = 256;
    c.sac.init_steps = 100;
    c
}

/// Catch with a small convolutional trunk.
fn desk_discrete() -> ExperimentConfig {
    let mut c = discrete();
    c.preset = "desk_discrete".into();
    c.env = EnvSection { id: "catch".into(), action_repeat: 1, frame_stack: 2, max_episode_frames: 1000 };
    c.train.env_steps = 10_000;
    c.train.updates_per_step = 1;
    c.train.eval_every = 2_000;
    c.train.eval_episodes = 10;
    c.train.log_every = 50;
    c.train.regression_samples = 32;
    c.replay.capacity = 10_000;
    c.encoder = EncoderSection { variant: "continuous".into(), latent_dim: 64, channels: 8, conv_layers: 2 };
    c.augment = AugmentSection { size: [20, 20], margin: 4, mode: "pad".into(), intensity: 0.05 };
    c.mlr.seq_len = 8;
    c.mlr.batch = 8;
    c.mask.cube = [4, 6, 6];
    c.rainbow.min_replay = 200;
    c.rainbow.multi_step = 3;
    c.rainbow.hidden_dim = 128;
    c
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "continuous" => Ok(continuous()),
            "discrete" => Ok(discrete()),
            "desk_continuous" => Ok(desk_continuous()),
            "desk_discrete" => Ok(desk_discrete()),
            other => Err(CliError::TypeMismatch {
                key: "preset".into(),
                expected: format!("one of {}", PRESETS.join(", ")),
                got: other.into(),
            }),
        }
    }

    /// Per-task values from the hyperparameter tables.
    pub fn apply_task(&mut self, task: &str) {
        self.task = task.to_string();
        match task.to_ascii_lowercase().replace('-', "_").as_str() {
            "finger_spin" => self.env.action_repeat = 2,
            "walker_walk" => {
                self.env.action_repeat = 2;
                self.mlr.momentum = 0.9;
            }
            "cartpole_swingup" => {
                self.env.action_repeat = 8;
                self.mask.cube[0] = 4;
            }
            "reacher_easy" => self.mask.cube[0] = 4,
            "cheetah_run" => {
                self.sac.lr = 2e-4;
                self.mlr.lr = 1e-4;
            }
            "pong" | "up_n_down" => self.mlr.lambda = 5.0,
            _ => {}
        }
    }

    /// Resolve a preset, the task defaults and then every `(key, value)` pair
    /// in order.
    pub fn resolve(pairs: &[(String, String)]) -> Result<Self> {
        let last = |k: &str| pairs.iter().rev().find(|(key, _)| key == k).map(|(_, v)| unquote(v).to_string());
        let mut cfg = Self::preset(&last("preset").unwrap_or_else(|| "continuous".into()))?;
        if let Some(task) = last("task") {
            cfg.apply_task(&task);
        }
        let mut flat = cfg.to_flat()?;
        for (k, v) in pairs {
            let default = flat.get(k).ok_or_else(|| CliError::UnknownKey(k.clone()))?;
            let parsed = parse_value(k, v, default)?;
            flat.insert(k.clone(), parsed);
        }
        let cfg = Self::from_flat(&flat)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat(&self) -> Result<BTreeMap<String, Value>> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self> {
        let mut root = Map::new();
        for (k, v) in flat {
            let mut node = &mut root;
            let parts: Vec<&str> = k.split('.').collect();
            for p in &parts[..parts.len() - 1] {
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("config sections are objects");
            }
            node.insert(parts[parts.len() - 1].to_string(), v.clone());
        }
        serde_json::from_value(Value::Object(root)).map_err(|e| CliError::TypeMismatch {
            key: "config".into(),
            expected: "a well-typed configuration".into(),
            got: e.to_string(),
        })
    }

    /// Canonical `key = value` text, one key per line in sorted order.
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        for (k, v) in self.to_flat()? {
            let v = match v {
                Value::String(x) => x,
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        Ok(s)
    }

    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_text()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !agents().contains(&self.agent) {
            return bad(format!("unknown agent `{}` (known: {})", self.agent, agents().names().join(", ")));
        }
        if !environments().contains(&self.env.id) {
            return bad(format!("unknown environment `{}` (known: {})", self.env.id, environments().names().join(", ")));
        }
        if mask_strategy(&self.mask.strategy).is_err() {
            return bad(format!("unknown mask strategy `{}`", self.mask.strategy));
        }
        self.encoder_variant()?;
        self.crop_mode()?;
        self.target_space()?;
        self.loss_metric()?;
        self.env_spec().validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        if let Some(m) = self.mlr_config()? {
            m.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        }
        self.rainbow.validate().map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        if self.replay.capacity == 0 || self.train.updates_per_step == 0 || self.train.log_every == 0 {
            return bad("replay capacity, updates per step and log cadence must be positive".into());
        }
        Ok(())
    }

    fn encoder_variant(&self) -> Result<EncoderVariant> {
        match self.encoder.variant.as_str() {
            "continuous" => Ok(EncoderVariant::Continuous),
            "discrete" => Ok(EncoderVariant::Discrete),
            "tabular" => Ok(EncoderVariant::Tabular),
            v => Err(mismatch("encoder.variant", "continuous, discrete or tabular", v)),
        }
    }

    fn crop_mode(&self) -> Result<CropMode> {
        match self.augment.mode.as_str() {
            "render" => Ok(CropMode::Render),
            "pad" => Ok(CropMode::Pad),
            v => Err(mismatch("augment.mode", "render or pad", v)),
        }
    }

    fn target_space(&self) -> Result<TargetSpace> {
        match self.mlr.target.as_str() {
            "latent" => Ok(TargetSpace::Latent),
            "pixel" => Ok(TargetSpace::Pixel),
            v => Err(mismatch("mlr.target", "latent or pixel", v)),
        }
    }

    fn loss_metric(&self) -> Result<LossMetric> {
        match self.mlr.loss.as_str() {
            "cosine" => Ok(LossMetric::Cosine),
            "mse" => Ok(LossMetric::Mse),
            v => Err(mismatch("mlr.loss", "cosine or mse", v)),
        }
    }

    pub fn augment_spec(&self) -> Result<AugmentSpec> {
        Ok(AugmentSpec {
            crop: CropSpec {
                margin: self.augment.margin,
                out_size: (self.augment.size[0], self.augment.size[1]),
                mode: self.crop_mode()?,
            },
            intensity: IntensitySpec { scale: self.augment.intensity, clip: 2.0 },
        })
    }

    pub fn env_spec(&self) -> EnvSpec {
        let size = self.augment_spec().map_or((0, 0), |a| a.source_size());
        EnvSpec {
            id: self.env.id.clone(),
            render_size: size,
            action_repeat: self.env.action_repeat,
            frame_stack: self.env.frame_stack,
            max_episode_frames: self.env.max_episode_frames,
        }
    }

    pub fn mask_spec(&self) -> CubeMaskSpec {
        let [k, h, w] = self.mask.cube;
        CubeMaskSpec { k, h, w, ratio: self.mask.ratio, strategy: self.mask.strategy.clone(), fill_value: self.mask.fill }
    }

    /// `None` when the auxiliary objective is off.
    pub fn mlr_config(&self) -> Result<Option<MlrConfig>> {
        if self.mlr.lambda == 0.0 {
            return Ok(None);
        }
        let m = &self.mlr;
        Ok(Some(MlrConfig {
            lambda: m.lambda,
            seq_len: m.seq_len,
            mask: self.mask_spec(),
            target_space: self.target_space()?,
            loss_metric: self.loss_metric()?,
            use_action_tokens: m.action_tokens,
            momentum_decoder: m.momentum_decoder,
            heads: HeadConfig {
                projection: m.projection,
                prediction: m.prediction,
                hidden_dim: m.head_hidden,
                projection_dim: m.projection_dim,
            },
            decoder_layers: m.decoder_layers,
            decoder_heads: m.decoder_heads,
            mlp_ratio: m.mlp_ratio,
            warmup_steps: m.warmup,
            aux_batch: m.batch,
            lr: m.lr,
            momentum: m.momentum,
        }))
    }

    /// Encoder config for observations with `channels` stacked channels.
    pub fn encoder_config(&self, channels: usize) -> Result<EncoderConfig> {
        let input = [channels, self.augment.size[0], self.augment.size[1]];
        let mut e = match self.encoder_variant()? {
            EncoderVariant::Continuous => EncoderConfig::continuous(input),
            EncoderVariant::Discrete => EncoderConfig::discrete(input),
            EncoderVariant::Tabular => return Ok(EncoderConfig::tabular(input)),
        };
        e.latent_dim = self.encoder.latent_dim;
        e.channels = self.encoder.channels;
        e.conv_layers = self.encoder.conv_layers;
        Ok(e)
    }

    pub fn agent_spec(&self, channels: usize, actions: mlr::ActionSpace, seed: u64) -> Result<AgentSpec> {
        Ok(AgentSpec {
            encoder: self.encoder_config(channels)?,
            actions,
            augment: self.augment_spec()?,
            mlr: self.mlr_config()?,
            sac: self.sac.clone(),
            rainbow: self.rainbow.clone(),
            seeds: SeedStreams::new(seed),
        })
    }

    pub fn replay_buffer(&self, obs_shape: [usize; 3], min_size: usize) -> ReplayBuffer {
        let b = ReplayBuffer::new(self.replay.capacity, obs_shape).with_min_size(min_size);
        if self.agent.eq_ignore_ascii_case("rainbow") {
            b.with_priorities(PriorityConfig { exponent: self.rainbow.priority_exponent })
        } else {
            b
        }
    }
}

fn mismatch(key: &str, expected: &str, got: &str) -> CliError {
    CliError::TypeMismatch { key: key.into(), expected: expected.into(), got: got.into() }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    s.strip_prefix('"').and_then(|x| x.strip_suffix('"')).unwrap_or(s)
}

fn same_kind(default: &Value, v: &Value) -> bool {
    match (default, v) {
        (Value::Number(d), Value::Number(x)) => !(d.is_u64() && !x.is_u64()),
        (Value::Array(d), Value::Array(x)) => match d.first() {
            Some(first) => x.iter().all(|e| same_kind(first, e)),
            None => true,
        },
        (Value::Null, _) => true,
        (d, x) => std::mem::discriminant(d) == std::mem::discriminant(x),
    }
}

fn kind_name(v: &Value) -> &'static str {
    match v {
        Value::Number(n) if n.is_u64() => "a non-negative integer",
        Value::Number(_) => "a number",
        Value::Bool(_) => "true or false",
        Value::String(_) => "a string",
        Value::Array(_) => "a list like [1, 2, 3]",
        Value::Null | Value::Object(_) => "a value",
    }
}

/// Parse `raw` as the type of `default`.
fn parse_value(key: &str, raw: &str, default: &Value) -> Result<Value> {
    let raw = raw.trim();
    let err = || mismatch(key, kind_name(default), raw);
    if !matches!(default, Value::String(_)) && (raw.eq_ignore_ascii_case("none") || raw == "null") {
        // Only optional keys accept this; deserialisation rejects the rest.
        return Ok(Value::Null);
    }
    let v = match default {
        Value::String(_) => Value::String(unquote(raw).to_string()),
        Value::Number(d) if d.is_f64() => {
            let x: f64 = raw.parse().map_err(|_| err())?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(err)?
        }
        _ => serde_json::from_str(raw).map_err(|_| err())?,
    };
    if !same_kind(default, &v) {
        return Err(err());
    }
    Ok(v)
}

/// `key = value` pairs from config text.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Parse { line: i + 1, message: format!("expected `key = value`, got `{line}`") })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `key=value` from a command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Parse { line: 0, message: format!("override `{s}` is not key=value") })
}

/// Load a config file (if any) and apply overrides on top.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut pairs = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => CliError::FileNotFound(p.to_path_buf()),
                _ => CliError::Io(e),
            })?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend_from_slice(overrides);
    ExperimentConfig::resolve(&pairs)
}
