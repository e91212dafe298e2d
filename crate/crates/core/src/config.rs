//! Experiment configuration, read from TOML.
//!
//! Every section and field is optional; missing values take the defaults
//! below, and [`ExperimentConfig::canonical`] writes every field out.

use serde::{Deserialize, Serialize};

use crate::diffusion::PretrainSettings;
use crate::error::{Error, Result};
use crate::testbed::WorldSpec;
use crate::trainer::{BaseModel, ModelSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Text and face embedding width.
    pub d: usize,
    /// Face tokens per image.
    pub visual_tokens: usize,
    /// Prompt length in tokens.
    pub text_tokens: usize,
    /// Heads of the enhancer and adapter attention.
    pub heads: usize,
    /// Denoiser hidden width.
    pub hidden: usize,
    pub hidden_tokens: usize,
    pub latent_dim: usize,
    pub identity_dim: usize,
    pub diffusion_steps: usize,
    pub blocks: usize,
    pub ff_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d: 32,
            visual_tokens: 4,
            text_tokens: 8,
            heads: 4,
            hidden: 32,
            hidden_tokens: 4,
            latent_dim: 16,
            identity_dim: 16,
            diffusion_steps: 100,
            blocks: 2,
            ff_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    /// Known names, which are also the base model's training population.
    pub table_size: usize,
    pub templates: usize,
    pub noise_scale: f64,
    pub identity_strength: f64,
    pub scene_strength: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            table_size: 256,
            templates: 4,
            noise_scale: 0.05,
            identity_strength: 1.0,
            scene_strength: 1.0,
            pretrain_steps: 1500,
            pretrain_batch: 16,
            pretrain_learning_rate: 0.003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub seeds: Vec<u64>,
    pub samples_per_prompt: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            samples_per_prompt: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Json,
    JsonPretty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "out".into(),
            format: OutputFormat::JsonPretty,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub model: ModelSection,
    pub world: WorldSection,
    pub evaluation: EvaluationSection,
    pub output: OutputSection,
}

fn line_at(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, if the file sets it.
fn line_of(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = "";
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim();
            continue;
        }
        if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses and validates. Errors carry the offending line when the file
    /// has one.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_at(src, span.start))),
                None => Error::Config(msg),
            }
        })?;
        if let Some((section, key, msg)) = cfg.violation() {
            return Err(Error::Config(match line_of(src, section, key) {
                Some(line) => format!("line {line}: {msg}"),
                None => format!("[{section}] {key}: {msg}"),
            }));
        }
        Ok(cfg)
    }

    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match self.violation() {
            Some((section, key, msg)) => Err(Error::Config(format!("[{section}] {key}: {msg}"))),
            None => Ok(()),
        }
    }

    /// Section, key, and message of the first violated constraint.
    pub fn violation(&self) -> Option<(&'static str, &'static str, String)> {
        if let Some((key, msg)) = self.train.violation() {
            return Some(("train", key, msg));
        }
        let m = &self.model;
        let model = |key, msg: &str| Some(("model", key, msg.to_string()));
        for (key, v) in [
            ("d", m.d),
            ("visual_tokens", m.visual_tokens),
            ("heads", m.heads),
            ("hidden", m.hidden),
            ("hidden_tokens", m.hidden_tokens),
            ("latent_dim", m.latent_dim),
            ("identity_dim", m.identity_dim),
            ("diffusion_steps", m.diffusion_steps),
            ("blocks", m.blocks),
            ("ff_dim", m.ff_dim),
        ] {
            if v == 0 {
                return model(key, "must be >= 1");
            }
        }
        if m.d % m.heads != 0 {
            return model("heads", "heads must divide d");
        }
        if m.text_tokens < 3 {
            return model("text_tokens", "text_tokens must be >= 3 (two name slots plus a word)");
        }
        if m.latent_dim > m.d {
            return model("latent_dim", "latent_dim must be <= d");
        }
        if m.identity_dim > m.latent_dim {
            return model("identity_dim", "identity_dim must be <= latent_dim");
        }
        let w = &self.world;
        let world = |key, msg: &str| Some(("world", key, msg.to_string()));
        if w.table_size == 0 {
            return world("table_size", "table_size must be >= 1");
        }
        if w.templates < 2 {
            return world("templates", "templates must be >= 2 (one training prompt, one held out)");
        }
        if !(w.noise_scale >= 0.0) {
            return world("noise_scale", "noise_scale must be >= 0");
        }
        if !w.identity_strength.is_finite() || !w.scene_strength.is_finite() {
            return world("identity_strength", "strengths must be finite");
        }
        if w.pretrain_steps > 0 && w.pretrain_batch == 0 {
            return world("pretrain_batch", "pretrain_batch must be >= 1");
        }
        if w.pretrain_steps > 0 && !(w.pretrain_learning_rate > 0.0) {
            return world("pretrain_learning_rate", "pretrain_learning_rate must be > 0");
        }
        if self.evaluation.seeds.is_empty() {
            return Some(("evaluation", "seeds", "seeds must not be empty".into()));
        }
        if self.evaluation.samples_per_prompt == 0 {
            return Some(("evaluation", "samples_per_prompt", "samples_per_prompt must be >= 1".into()));
        }
        if self.output.dir.is_empty() {
            return Some(("output", "dir", "dir must not be empty".into()));
        }
        None
    }

    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            embed_dim: self.model.d,
            visual_tokens: self.model.visual_tokens,
            text_tokens: self.model.text_tokens,
            identity_dim: self.model.identity_dim,
            latent_dim: self.model.latent_dim,
            table_size: self.world.table_size,
            templates: self.world.templates,
            noise_scale: self.world.noise_scale,
            identity_strength: self.world.identity_strength,
            scene_strength: self.world.scene_strength,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            heads: self.model.heads,
            hidden: self.model.hidden,
            hidden_tokens: self.model.hidden_tokens,
            blocks: self.model.blocks,
            ff_dim: self.model.ff_dim,
            diffusion_steps: self.model.diffusion_steps,
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            steps: self.world.pretrain_steps,
            batch_size: self.world.pretrain_batch,
            learning_rate: self.world.pretrain_learning_rate,
        }
    }

    pub fn build_base(&self, seed: u64) -> Result<BaseModel> {
        BaseModel::build(self.world_spec(), self.model_spec(), self.pretrain_settings(), seed)
    }
}
