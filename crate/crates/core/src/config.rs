//! Flat `key = value` configuration with dotted namespaces.
//!
//! Lines starting with `#` are comments. Unknown keys are rejected.
//! [`TrainConfig::to_text`] writes every key, so its output is a complete,
//! resolved snapshot that parses back to the same value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::{AugmentPolicy, TextEncoderConfig};
use crate::denoiser::{AttnMode, DenoiserConfig};
use crate::error::{Error, Result};
use crate::mode::BankConfig;
use crate::schedule::ScheduleSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    /// Chance that a multi-object caption leaves out its last object.
    pub omit_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: usize,
    pub d: usize,
    pub d_text: usize,
    pub layers: usize,
    pub text_layers: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
    pub attn_mode: AttnMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeConfig {
    pub w_a: f64,
    pub w_l: f64,
    pub policy: AugmentPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub steps: usize,
    /// Steps trained with a single expert before it is copied into all experts.
    pub warm_steps: usize,
    pub p_uncond: f64,
    pub log_every: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub guidance: f64,
    pub steps: usize,
    pub sampler: SamplerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub count: usize,
    pub features: usize,
    pub fill_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub scales: Vec<f64>,
    pub experts: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub schedule: ScheduleSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub experts: usize,
    pub knowledge: KnowledgeConfig,
    pub train: OptimConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleSpec::default(),
            data: DataConfig { count: 2048, height: 32, width: 32, max_objects: 3, omit_prob: 0.25 },
            model: ModelConfig {
                patch: 4,
                d: 128,
                d_text: 64,
                layers: 4,
                text_layers: 1,
                ffn_mult: 2,
                max_text_len: 48,
                attn_mode: AttnMode::Multiplicative,
            },
            experts: 10,
            knowledge: KnowledgeConfig { w_a: 0.01, w_l: 0.1, policy: AugmentPolicy::default() },
            train: OptimConfig {
                lr: 0.9e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.01,
                batch: 16,
                steps: 2000,
                warm_steps: 1000,
                p_uncond: 0.1,
                log_every: 10,
                checkpoint_every: 0,
            },
            sample: SampleConfig { guidance: 2.1, steps: 50, sampler: SamplerKind::Ddim },
            eval: EvalConfig { count: 2048, features: 64, fill_tolerance: 0.1 },
            sweep: SweepConfig {
                scales: (2..=9).map(f64::from).collect(),
                experts: vec![1, 2, 5, 10],
                seeds: vec![0, 1, 2],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "schedule.T",
        "schedule.beta_start",
        "schedule.beta_end",
        "data.count",
        "data.height",
        "data.width",
        "data.max_objects",
        "data.omit_prob",
        "model.patch",
        "model.d",
        "model.d_text",
        "model.layers",
        "model.text_layers",
        "model.ffn_mult",
        "model.max_text_len",
        "model.attn_mode",
        "mode.n",
        "knowledge.w_a",
        "knowledge.w_l",
        "knowledge.p_know",
        "knowledge.p_cap",
        "knowledge.insert_tokens",
        "knowledge.strengthen_attention",
        "knowledge.weight_loss",
        "knowledge.append_labels",
        "train.lr",
        "train.beta1",
        "train.beta2",
        "train.eps",
        "train.weight_decay",
        "train.batch",
        "train.steps",
        "train.warm_steps",
        "train.p_uncond",
        "train.log_every",
        "train.checkpoint_every",
        "sample.guidance",
        "sample.steps",
        "sample.sampler",
        "eval.count",
        "eval.features",
        "eval.fill_tolerance",
        "sweep.scales",
        "sweep.experts",
        "sweep.seeds",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        let pol = &mut self.knowledge.policy;
        match k {
            "seed" => self.seed = parse(k, v)?,
            "schedule.T" => self.schedule.steps = parse(k, v)?,
            "schedule.beta_start" => self.schedule.beta_start = parse(k, v)?,
            "schedule.beta_end" => self.schedule.beta_end = parse(k, v)?,
            "data.count" => self.data.count = parse(k, v)?,
            "data.height" => self.data.height = parse(k, v)?,
            "data.width" => self.data.width = parse(k, v)?,
            "data.max_objects" => self.data.max_objects = parse(k, v)?,
            "data.omit_prob" => self.data.omit_prob = parse(k, v)?,
            "model.patch" => self.model.patch = parse(k, v)?,
            "model.d" => self.model.d = parse(k, v)?,
            "model.d_text" => self.model.d_text = parse(k, v)?,
            "model.layers" => self.model.layers = parse(k, v)?,
            "model.text_layers" => self.model.text_layers = parse(k, v)?,
            "model.ffn_mult" => self.model.ffn_mult = parse(k, v)?,
            "model.max_text_len" => self.model.max_text_len = parse(k, v)?,
            "model.attn_mode" => {
                self.model.attn_mode = match v {
                    "multiplicative" => AttnMode::Multiplicative,
                    "additive" => AttnMode::Additive,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{k}`"))),
                }
            }
            "mode.n" => self.experts = parse(k, v)?,
            "knowledge.w_a" => self.knowledge.w_a = parse(k, v)?,
            "knowledge.w_l" => self.knowledge.w_l = parse(k, v)?,
            "knowledge.p_know" => pol.p_know = parse(k, v)?,
            "knowledge.p_cap" => pol.p_cap = parse(k, v)?,
            "knowledge.insert_tokens" => pol.insert_tokens = parse(k, v)?,
            "knowledge.strengthen_attention" => pol.strengthen_attention = parse(k, v)?,
            "knowledge.weight_loss" => pol.weight_loss = parse(k, v)?,
            "knowledge.append_labels" => pol.append_labels = parse(k, v)?,
            "train.lr" => self.train.lr = parse(k, v)?,
            "train.beta1" => self.train.beta1 = parse(k, v)?,
            "train.beta2" => self.train.beta2 = parse(k, v)?,
            "train.eps" => self.train.eps = parse(k, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(k, v)?,
            "train.batch" => self.train.batch = parse(k, v)?,
            "train.steps" => self.train.steps = parse(k, v)?,
            "train.warm_steps" => self.train.warm_steps = parse(k, v)?,
            "train.p_uncond" => self.train.p_uncond = parse(k, v)?,
            "train.log_every" => self.train.log_every = parse(k, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(k, v)?,
            "sample.guidance" => self.sample.guidance = parse(k, v)?,
            "sample.steps" => self.sample.steps = parse(k, v)?,
            "sample.sampler" => {
                self.sample.sampler = match v {
                    "ddim" => SamplerKind::Ddim,
                    "ddpm" => SamplerKind::Ddpm,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{k}`"))),
                }
            }
            "eval.count" => self.eval.count = parse(k, v)?,
            "eval.features" => self.eval.features = parse(k, v)?,
            "eval.fill_tolerance" => self.eval.fill_tolerance = parse(k, v)?,
            "sweep.scales" => self.sweep.scales = parse_list(k, v)?,
            "sweep.experts" => self.sweep.experts = parse_list(k, v)?,
            "sweep.seeds" => self.sweep.seeds = parse_list(k, v)?,
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{kv}`")))?;
        self.set(k, v)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let pol = &self.knowledge.policy;
        Some(match key {
            "seed" => self.seed.to_string(),
            "schedule.T" => self.schedule.steps.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "data.count" => self.data.count.to_string(),
            "data.height" => self.data.height.to_string(),
            "data.width" => self.data.width.to_string(),
            "data.max_objects" => self.data.max_objects.to_string(),
            "data.omit_prob" => self.data.omit_prob.to_string(),
            "model.patch" => self.model.patch.to_string(),
            "model.d" => self.model.d.to_string(),
            "model.d_text" => self.model.d_text.to_string(),
            "model.layers" => self.model.layers.to_string(),
            "model.text_layers" => self.model.text_layers.to_string(),
            "model.ffn_mult" => self.model.ffn_mult.to_string(),
            "model.max_text_len" => self.model.max_text_len.to_string(),
            "model.attn_mode" => match self.model.attn_mode {
                AttnMode::Multiplicative => "multiplicative".into(),
                AttnMode::Additive => "additive".into(),
            },
            "mode.n" => self.experts.to_string(),
            "knowledge.w_a" => self.knowledge.w_a.to_string(),
            "knowledge.w_l" => self.knowledge.w_l.to_string(),
            "knowledge.p_know" => pol.p_know.to_string(),
            "knowledge.p_cap" => pol.p_cap.to_string(),
            "knowledge.insert_tokens" => pol.insert_tokens.to_string(),
            "knowledge.strengthen_attention" => pol.strengthen_attention.to_string(),
            "knowledge.weight_loss" => pol.weight_loss.to_string(),
            "knowledge.append_labels" => pol.append_labels.to_string(),
            "train.lr" => self.train.lr.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.eps" => self.train.eps.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.batch" => self.train.batch.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.warm_steps" => self.train.warm_steps.to_string(),
            "train.p_uncond" => self.train.p_uncond.to_string(),
            "train.log_every" => self.train.log_every.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "sample.guidance" => self.sample.guidance.to_string(),
            "sample.steps" => self.sample.steps.to_string(),
            "sample.sampler" => match self.sample.sampler {
                SamplerKind::Ddim => "ddim".into(),
                SamplerKind::Ddpm => "ddpm".into(),
            },
            "eval.count" => self.eval.count.to_string(),
            "eval.features" => self.eval.features.to_string(),
            "eval.fill_tolerance" => self.eval.fill_tolerance.to_string(),
            "sweep.scales" => join(&self.sweep.scales),
            "sweep.experts" => join(&self.sweep.experts),
            "sweep.seeds" => join(&self.sweep.seeds),
            _ => return None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("every listed key is readable"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
            }
        };
        prob("knowledge.p_know", self.knowledge.policy.p_know)?;
        prob("knowledge.p_cap", self.knowledge.policy.p_cap)?;
        prob("train.p_uncond", self.train.p_uncond)?;
        prob("data.omit_prob", self.data.omit_prob)?;
        prob("train.beta1", self.train.beta1)?;
        prob("train.beta2", self.train.beta2)?;
        let positive = [
            ("data.count", self.data.count),
            ("data.height", self.data.height),
            ("data.width", self.data.width),
            ("data.max_objects", self.data.max_objects),
            ("model.patch", self.model.patch),
            ("model.d", self.model.d),
            ("model.d_text", self.model.d_text),
            ("model.ffn_mult", self.model.ffn_mult),
            ("model.max_text_len", self.model.max_text_len),
            ("train.batch", self.train.batch),
            ("train.log_every", self.train.log_every),
            ("sample.steps", self.sample.steps),
            ("eval.count", self.eval.count),
            ("eval.features", self.eval.features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.data.max_objects > 4 {
            return Err(Error::Config("data.max_objects must be at most 4".into()));
        }
        if !(self.train.lr > 0.0) || !(self.train.eps > 0.0) || !(self.train.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and epsilon must be positive, weight decay non-negative".into()));
        }
        if self.knowledge.w_a < 0.0 || self.knowledge.w_l < 0.0 {
            return Err(Error::Config("knowledge weights must be non-negative".into()));
        }
        if self.sample.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "sample.steps {} exceeds schedule.T {}",
                self.sample.steps, self.schedule.steps
            )));
        }
        if self.experts > 1 && self.train.warm_steps > self.train.steps {
            return Err(Error::Config("train.warm_steps exceeds train.steps".into()));
        }
        crate::schedule::NoiseSchedule::<f64>::from_spec(&self.schedule)
            .map_err(|e| Error::Config(e.to_string()))?;
        crate::mode::partition_timesteps(self.schedule.steps, self.experts)
            .map_err(|e| Error::Config(e.to_string()))?;
        self.bank_config(self.experts, crate::conditioning::Vocabulary::default().len()).denoiser.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Model shape for a bank with `experts` experts over a vocabulary of
    /// `vocab_size` tokens.
    pub fn bank_config(&self, experts: usize, vocab_size: usize) -> BankConfig {
        BankConfig {
            text: TextEncoderConfig {
                vocab_size,
                max_len: self.model.max_text_len,
                width: self.model.d_text,
                layers: self.model.text_layers,
                ffn_mult: self.model.ffn_mult,
            },
            denoiser: DenoiserConfig {
                height: self.data.height,
                width: self.data.width,
                channels: 3,
                patch: self.model.patch,
                d: self.model.d,
                d_text: self.model.d_text,
                layers: self.model.layers,
                ffn_mult: self.model.ffn_mult,
                steps: self.schedule.steps,
                attn_mode: self.model.attn_mode,
            },
            experts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip() {
        let mut c = TrainConfig::default();
        c.set("knowledge.w_a", "0.5").unwrap();
        c.set("sweep.scales", "1, 2.5,3").unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.sweep.scales, vec![1.0, 2.5, 3.0]);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(TrainConfig::parse("model.depth = 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("train.p_uncond = 1.5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("mode.n = 0"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("model.patch = 5"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("seed 3"), Err(Error::Config(_))));
    }

    #[test]
    fn comments_and_defaults() {
        let c = TrainConfig::parse("# toy\nmode.n = 2\n\n").unwrap();
        assert_eq!(c.experts, 2);
        assert_eq!(c.train.lr, 0.9e-4);
        assert_eq!(c.knowledge.policy.p_know, 0.5);
    }
}
