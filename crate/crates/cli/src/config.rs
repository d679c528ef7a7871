//! `key = value` run configuration shared by all subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use worldmodel::model::ModelConfig;
use worldmodel::tokenizer::{ScaleSchedule, TokenizerConfig, TokenizerTraining};
use worldmodel::toyworld::{DatasetSpec, RigSpec};
use worldmodel::training::{parse_kv, parse_value, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub frames: usize,
    /// `v2`, `v3` or `mix`.
    pub rig: String,
    pub width: usize,
    pub height: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenes: 16,
            frames: 8,
            rig: "mix".into(),
            width: 16,
            height: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    /// Ground-truth frames given before generation starts.
    pub context: usize,
    pub argmax: bool,
    pub temperature: f64,
    /// Annotations used as conditions: `all` or `none`.
    pub conditions: String,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            context: 1,
            argmax: true,
            temperature: 1.0,
            conditions: "all".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub tokenizer: TokenizerConfig,
    pub tok_train: TokenizerTraining,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub rollout: RolloutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tokenizer = TokenizerConfig::toy16();
        Self {
            model: ModelConfig::small(tokenizer.schedule.clone()),
            tokenizer,
            tok_train: TokenizerTraining::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            rollout: RolloutConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_text(&text).with_context(|| format!("in config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = Self::default();
        // The preset replaces every model field, so it goes first.
        if let Some(preset) = kv.get("model") {
            cfg.model = match preset.as_str() {
                "toy" => ModelConfig::toy(cfg.tokenizer.schedule.clone()),
                "small" => ModelConfig::small(cfg.tokenizer.schedule.clone()),
                other => bail!("unknown model preset `{other}` (toy, small)"),
            };
        }
        for (k, v) in kv.iter().filter(|(k, _)| k.as_str() != "model") {
            if !cfg.set(k, v)? {
                bail!("unknown config key `{k}`");
            }
        }
        cfg.model.schedule = cfg.tokenizer.schedule.clone();
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        let m = &mut self.model;
        match key {
            "layers" => m.layers = parse_value(key, v)?,
            "width" => m.width = parse_value(key, v)?,
            "heads" => m.heads = parse_value(key, v)?,
            "head_dim" => m.head_dim = parse_value(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, v)?,
            "text_slots" => m.text_slots = parse_value(key, v)?,
            "ray_freqs" => m.ray_freqs = parse_value(key, v)?,
            "rope_base" => m.rope.base = parse_value(key, v)?,
            "rope_lambda_m" => m.rope.lambda_m = parse_value(key, v)?,
            "rope_lambda_d" => m.rope.lambda_d = parse_value(key, v)?,
            "rope_lambda_t" => m.rope.lambda_t = parse_value(key, v)?,
            "tok_hidden" => self.tokenizer.hidden = parse_value(key, v)?,
            "tok_blocks" => self.tokenizer.blocks = parse_value(key, v)?,
            "tok_bits" => {
                self.tokenizer.schedule = ScaleSchedule::new(self.tokenizer.schedule.grids.clone(), parse_value(key, v)?)?
            }
            "tok_steps" => self.tok_train.steps = parse_value(key, v)?,
            "tok_batch" => self.tok_train.batch = parse_value(key, v)?,
            "tok_lr" => self.tok_train.lr = parse_value(key, v)?,
            "scenes" => self.data.scenes = parse_value(key, v)?,
            "frames" => self.data.frames = parse_value(key, v)?,
            "rig" => self.data.rig = v.to_string(),
            "image_width" => self.data.width = parse_value(key, v)?,
            "image_height" => self.data.height = parse_value(key, v)?,
            "context" => self.rollout.context = parse_value(key, v)?,
            "sampler" => {
                self.rollout.argmax = match v {
                    "argmax" => true,
                    "bernoulli" => false,
                    _ => bail!("sampler must be argmax or bernoulli, got `{v}`"),
                }
            }
            "temperature" => self.rollout.temperature = parse_value(key, v)?,
            "conditions" => self.rollout.conditions = v.to_string(),
            _ => return Ok(self.train.set(key, v)?),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tokenizer.validate()?;
        self.train.validate()?;
        if !matches!(self.rollout.conditions.as_str(), "all" | "none") {
            bail!("conditions must be all or none, got `{}`", self.rollout.conditions);
        }
        self.rigs()?;
        Ok(())
    }

    pub fn rigs(&self) -> Result<Vec<RigSpec>> {
        let (w, h) = (self.data.width, self.data.height);
        Ok(match self.data.rig.as_str() {
            "mix" => vec![RigSpec::two_view(w, h), RigSpec::three_view(w, h)],
            name => vec![RigSpec::by_name(name, w, h)?],
        })
    }

    pub fn dataset(&self, seed: u64) -> Result<DatasetSpec> {
        let mut spec = DatasetSpec::default_mix(self.data.scenes, self.data.frames, seed);
        spec.rigs = self.rigs()?;
        spec.interval = self.train.interval;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_reach_their_sections() {
        let cfg = RunConfig::from_text("model = toy\nlayers = 2\ntok_steps = 5\nsteps = 7\nrig = v2\ncontext = 2\n").unwrap();
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.width, 128);
        assert_eq!(cfg.tok_train.steps, 5);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.rigs().unwrap().len(), 1);
        assert_eq!(cfg.rollout.context, 2);
        assert!(RunConfig::from_text("bogus = 1\n").is_err());
        assert!(RunConfig::from_text("steps = x\n").is_err());
        assert!(RunConfig::from_text("rig = v9\n").is_err());
    }
}
