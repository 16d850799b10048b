//! Pipeline configuration with JSON defaults and dotted-key overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::WorldConfig;
use crate::error::{Error, Result};
use crate::frozen::{DecoderConfig, DEFAULT_PROMPT};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stage-1 batch (the paper uses 1600 at full scale).
    pub batch_size: usize,
    /// Stage-2 batch (the paper uses 1440 at full scale).
    pub stage2_batch_size: usize,
    pub warmup_steps: usize,
    pub nitc_steps: usize,
    pub post_refresh_steps: usize,
    pub stage2_steps: usize,
    pub stage2_peak_lr: f64,
    pub lambda: f64,
    pub omega_max: f64,
    pub tau: f64,
    pub seed: u64,
    pub strict_itc_denominator: bool,
    /// Re-fit the noise model every this many contrastive-phase steps; 0 = never.
    pub reestimate_every: usize,
    pub gmm_tol: f64,
    pub gmm_max_iter: usize,
    pub refresh_threshold: f64,
    /// Noise-adaptive contrastive loss after warm-up; off means plain ITC and
    /// no noise estimation.
    pub noise_adaptive: bool,
    /// Retrieved concepts in the matching and generation inputs.
    pub use_concepts: bool,
    pub itc_weight: f64,
    pub citg_weight: f64,
    pub citm_weight: f64,
    /// Global gradient-norm clip; 0 = off.
    pub max_grad_norm: f64,
    pub k_candidates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            stage2_batch_size: 32,
            warmup_steps: 2400,
            nitc_steps: 6000,
            post_refresh_steps: 2000,
            stage2_steps: 800,
            stage2_peak_lr: 1e-4,
            lambda: 0.5,
            omega_max: 0.9,
            tau: 1.0,
            seed: 0,
            strict_itc_denominator: false,
            reestimate_every: 0,
            gmm_tol: 1e-10,
            gmm_max_iter: 500,
            refresh_threshold: 0.5,
            noise_adaptive: true,
            use_concepts: true,
            itc_weight: 1.0,
            citg_weight: 1.0,
            citm_weight: 1.0,
            max_grad_norm: 0.0,
            k_candidates: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub min_count: u64,
    pub top_k: usize,
    pub prompt: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_count: crate::corpus::DEFAULT_MIN_COUNT,
            top_k: 3,
            prompt: DEFAULT_PROMPT.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenConfig {
    pub encoder_seed: u64,
    pub decoder_seed: u64,
    pub decoder: DecoderConfig,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        Self {
            encoder_seed: 7,
            decoder_seed: 11,
            decoder: DecoderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub frozen: FrozenConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        let t = &self.train;
        if !(t.peak_lr > 0.0) || !(t.stage2_peak_lr > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if t.batch_size < 2 || t.stage2_batch_size < 1 {
            return Err(Error::Invalid("train.batch_size must be at least 2".into()));
        }
        if !(t.tau > 0.0) {
            return Err(Error::Invalid("train.tau must be positive".into()));
        }
        if !(t.omega_max > 0.0 && t.omega_max < 1.0) || t.lambda < 0.0 {
            return Err(Error::Invalid("need lambda >= 0 and omega_max in (0, 1)".into()));
        }
        if self.world.vocab_size > self.model.num_objects {
            return Err(Error::Invalid(format!(
                "world.vocab_size {} exceeds model.num_objects {}",
                self.world.vocab_size, self.model.num_objects
            )));
        }
        if self.corpus.top_k == 0 || (t.use_concepts && self.corpus.top_k > self.model.max_concepts) {
            return Err(Error::Invalid(format!(
                "corpus.top_k {} must be in 1..={}",
                self.corpus.top_k, self.model.max_concepts
            )));
        }
        let longest = self.world.objects_per_image + 1 + self.model.max_concepts;
        if longest > self.model.max_positions {
            return Err(Error::Invalid(format!(
                "model.max_positions {} too small for {} concept and caption tokens",
                self.model.max_positions, longest
            )));
        }
        if self.world.objects_per_image + 1 > self.frozen.decoder.max_positions {
            return Err(Error::Invalid("frozen.decoder.max_positions too small for captions".into()));
        }
        if self.frozen.decoder.d_llm != self.model.d_llm {
            return Err(Error::Invalid(format!(
                "frozen.decoder.d_llm {} differs from model.d_llm {}",
                self.frozen.decoder.d_llm, self.model.d_llm
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn from_json(v: Value) -> Result<Self> {
        Ok(serde_json::from_value(v)?)
    }

    /// Applies `a.b.c=value` overrides. Keys must already exist; values are
    /// parsed as JSON, falling back to a bare string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = self.to_json();
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg = Self::from_json(v)?;
        Ok(cfg)
    }
}

pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("override `{item}` is not key=value")))?;
    let key = resolve_key(root, key)?;
    let key = key.as_str();
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Invalid(format!("unknown config key `{key}`")))?;
        let slot = obj
            .get_mut(*p)
            .ok_or_else(|| Error::Invalid(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::Invalid(format!("`{key}` is a section, not a value")));
            }
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split always yields at least one part")
}

/// A key without a section means `train.<key>` when that exists, otherwise
/// the one section that has it.
fn resolve_key(root: &Value, key: &str) -> Result<String> {
    if key.contains('.') {
        return Ok(key.to_string());
    }
    if root.get("train").and_then(|t| t.get(key)).is_some() {
        return Ok(format!("train.{key}"));
    }
    let owners: Vec<&String> = root
        .as_object()
        .into_iter()
        .flatten()
        .filter(|(_, v)| v.get(key).is_some())
        .map(|(k, _)| k)
        .collect();
    match owners.as_slice() {
        [one] => Ok(format!("{one}.{key}")),
        [] => Err(Error::Invalid(format!("unknown config key `{key}`"))),
        _ => Err(Error::Invalid(format!("ambiguous config key `{key}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(c.to_json()).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::default()
            .with_overrides(&["train.seed=7".into(), "corpus.prompt=a {noun}".into()])
            .unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.corpus.prompt, "a {noun}");
        assert!(PipelineConfig::default().with_overrides(&["train.nope=1".into()]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["train=1".into()]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["train.seed=x".into()]).is_err());
    }

    #[test]
    fn bare_keys() {
        let c = PipelineConfig::default()
            .with_overrides(&["seed=7".into(), "noise_rate=0.1".into()])
            .unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.world.seed, 0);
        assert_eq!(c.world.noise_rate, 0.1);
        let c = PipelineConfig::default().with_overrides(&["d_llm=8".into()]).unwrap();
        assert_eq!((c.model.d_llm, c.frozen.decoder.d_llm), (8, 32));
        assert!(PipelineConfig::default().with_overrides(&["bogus=1".into()]).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = PipelineConfig::default().to_json();
        v["model"]["extra"] = Value::from(1);
        assert!(PipelineConfig::from_json(v).is_err());
    }
}
