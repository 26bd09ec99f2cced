//! Flat run configuration: defaults, then a JSON file, then `key=value`
//! overrides. Every constant the pipeline exposes is one named key.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::WorldConfig;
use crate::downstream::{DecodeConfig, FinetuneConfig, Strategy};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::proxy::{MaskingConfig, ProxyConfig};
use crate::train::{AdamConfig, Decay, PretrainConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random draw in a run.
    pub seed: u64,
    /// Upper bound on evaluation worker threads.
    pub threads: usize,

    // synthetic world
    pub n_scenes: usize,
    /// Region feature width.
    pub region_dim: usize,
    pub noise_sigma: f64,
    /// Regions per generated scene, at most.
    pub scene_regions: usize,
    pub projection_seed: u64,

    // model
    /// Region geometry width; fixed at 5.
    pub pos_dim: usize,
    pub hidden: usize,
    pub obj_layers: usize,
    pub sent_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    pub max_regions: usize,
    pub match_hidden: usize,
    pub ln_eps: f64,
    pub init_range: f64,

    // proxy tasks
    pub region_mask_prob: f64,
    pub word_mask_prob: f64,
    pub mask_token_frac: f64,
    pub random_token_frac: f64,
    pub ism_margin: f64,
    pub enable_mlm: bool,
    pub enable_moc: bool,
    pub enable_mrpg: bool,
    pub enable_ism: bool,
    pub enable_msg: bool,

    // pre-training
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: u64,
    pub decay: Decay,
    pub clip: f64,
    pub checkpoint_every: u64,
    pub wall_clock: bool,

    // fine-tuning
    pub ft_steps: u64,
    pub ft_batch_size: usize,
    pub ft_lr: f64,
    pub ft_warmup: u64,
    pub ft_decay: Decay,
    pub ft_clip: f64,
    pub retrieval_margin: f64,
    pub mining_warmup: u64,
    pub eval_every: u64,
    pub self_critical: bool,

    // decoding
    pub decode: Strategy,
    pub beam_width: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = WorldConfig::default();
        let m = ModelConfig::toy(5, 5, w.region_dim);
        let p = PretrainConfig::default();
        let mask = p.proxy.masking;
        let f = FinetuneConfig::default();
        RunConfig {
            seed: 0,
            threads: 1,
            n_scenes: w.n_scenes,
            region_dim: w.region_dim,
            noise_sigma: w.noise_sigma,
            scene_regions: w.max_regions,
            projection_seed: w.projection_seed,
            pos_dim: m.pos_dim,
            hidden: m.hidden,
            obj_layers: m.obj_layers,
            sent_layers: m.sent_layers,
            dec_layers: m.dec_layers,
            heads: m.heads,
            ff_dim: m.ff_dim,
            max_seq: m.max_seq,
            max_regions: m.max_regions,
            match_hidden: m.match_hidden,
            ln_eps: m.ln_eps,
            init_range: m.init_range,
            region_mask_prob: mask.region_prob,
            word_mask_prob: mask.word_prob,
            mask_token_frac: mask.mask_token_frac,
            random_token_frac: mask.random_token_frac,
            ism_margin: p.proxy.margin,
            enable_mlm: true,
            enable_moc: true,
            enable_mrpg: true,
            enable_ism: true,
            enable_msg: true,
            steps: p.steps,
            batch_size: p.batch_size,
            lr: p.adam.lr,
            beta1: p.adam.beta1,
            beta2: p.adam.beta2,
            adam_eps: p.adam.eps,
            warmup: p.schedule.warmup,
            decay: p.schedule.decay,
            clip: p.clip,
            checkpoint_every: p.checkpoint_every,
            wall_clock: p.wall_clock,
            ft_steps: f.steps,
            ft_batch_size: f.batch_size,
            ft_lr: f.adam.lr,
            ft_warmup: f.schedule.warmup,
            ft_decay: f.schedule.decay,
            ft_clip: f.clip,
            retrieval_margin: f.margin,
            mining_warmup: f.mining_warmup,
            eval_every: f.eval_every,
            self_critical: false,
            decode: f.decode.strategy,
            beam_width: f.decode.beam_width,
            max_len: f.decode.max_len,
            length_penalty: f.decode.length_penalty,
        }
    }
}

/// Parse the right-hand side of `key=value`: JSON when it parses, a bare
/// string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Every accepted key, sorted.
    pub fn keys() -> Vec<String> {
        match serde_json::to_value(RunConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    fn from_map(m: Map<String, Value>) -> Result<Self> {
        serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overlay `(key, value)` pairs; unknown keys and ill-typed values are
    /// configuration errors.
    pub fn overlay(&self, pairs: impl IntoIterator<Item = (String, Value)>) -> Result<Self> {
        let mut m = self.to_map();
        for (k, v) in pairs {
            match m.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        Self::from_map(m)
    }

    /// Overlay a flat JSON object.
    pub fn merge_json(&self, text: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("config file: {e}")))? {
            Value::Object(o) => self.overlay(o),
            _ => Err(Error::config("config file must hold a flat JSON object")),
        }
    }

    pub fn merge_file(&self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        self.merge_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Overlay `key=value` strings.
    pub fn merge_sets<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut pairs = Vec::new();
        for s in sets {
            let s = s.as_ref();
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            pairs.push((k.trim().to_string(), parse_value(v.trim())));
        }
        self.overlay(pairs)
    }

    /// Pretty JSON with one key per line, in declaration order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("RunConfig serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.self_critical {
            return Err(Error::NotImplemented(
                "self-critical sequence training (set self_critical=false)".into(),
            ));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        self.masking().validate()?;
        self.adam().validate()?;
        AdamConfig::with_lr(self.ft_lr).validate()?;
        Ok(())
    }

    pub fn world(&self) -> WorldConfig {
        WorldConfig {
            n_scenes: self.n_scenes,
            region_dim: self.region_dim,
            noise_sigma: self.noise_sigma,
            max_regions: self.scene_regions,
            projection_seed: self.projection_seed,
            ..WorldConfig::default()
        }
    }

    /// Model shape for a vocabulary of `vocab_size`, `num_labels` object
    /// classes and `num_answers` answers (0 leaves out the answer head).
    pub fn model(&self, vocab_size: usize, num_labels: usize, num_answers: usize) -> ModelConfig {
        ModelConfig {
            region_dim: self.region_dim,
            pos_dim: self.pos_dim,
            hidden: self.hidden,
            vocab_size,
            max_seq: self.max_seq,
            obj_layers: self.obj_layers,
            sent_layers: self.sent_layers,
            dec_layers: self.dec_layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_regions: self.max_regions,
            num_labels,
            match_hidden: self.match_hidden,
            num_answers,
            ln_eps: self.ln_eps,
            init_range: self.init_range,
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            region_prob: self.region_mask_prob,
            word_prob: self.word_mask_prob,
            mask_token_frac: self.mask_token_frac,
            random_token_frac: self.random_token_frac,
        }
    }

    pub fn proxy(&self) -> ProxyConfig {
        ProxyConfig {
            masking: self.masking(),
            margin: self.ism_margin,
            enable_moc: self.enable_moc,
            enable_mrpg: self.enable_mrpg,
            enable_ism: self.enable_ism,
            enable_msg: self.enable_msg,
            enable_mlm: self.enable_mlm,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            adam: self.adam(),
            schedule: Schedule {
                warmup: self.warmup,
                decay: self.decay,
            },
            clip: self.clip,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            proxy: self.proxy(),
            wall_clock: self.wall_clock,
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: self.decode,
            beam_width: self.beam_width,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            steps: self.ft_steps,
            batch_size: self.ft_batch_size,
            adam: AdamConfig {
                lr: self.ft_lr,
                ..self.adam()
            },
            schedule: Schedule {
                warmup: self.ft_warmup,
                decay: self.ft_decay,
            },
            clip: self.ft_clip,
            seed: self.seed,
            margin: self.retrieval_margin,
            mining_warmup: self.mining_warmup,
            eval_every: self.eval_every,
            decode: self.decode_config(),
            threads: self.threads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_module_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.pretrain(), PretrainConfig::default());
        assert_eq!(c.finetune(), FinetuneConfig::default());
        assert_eq!(c.world(), WorldConfig::default());
        assert_eq!(c.model(27, 5, 0), ModelConfig::toy(27, 5, 64));
        c.validate().unwrap();
    }

    #[test]
    fn sets_override_typed_values() {
        let c = RunConfig::default()
            .merge_sets(&["lr=0.01", "decay=cosine", "enable_msg=false", "decode=beam", "steps=7"])
            .unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.decay, Decay::Cosine);
        assert!(!c.enable_msg);
        assert_eq!(c.decode, Strategy::Beam);
        assert_eq!(c.steps, 7);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = RunConfig::default().merge_sets(&["learning_rate=1"]).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::default().merge_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn ill_typed_value_is_rejected() {
        assert!(RunConfig::default().merge_sets(&["steps=many"]).is_err());
        assert!(RunConfig::default().merge_sets(&["decay=sometimes"]).is_err());
        assert!(RunConfig::default().merge_sets(&["no_equals"]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::default().merge_sets(&["hidden=16", "seed=9"]).unwrap();
        let back = RunConfig::default().merge_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn self_critical_is_not_implemented() {
        let c = RunConfig::default().merge_sets(&["self_critical=true"]).unwrap();
        let e = c.validate().unwrap_err();
        assert!(matches!(e, Error::NotImplemented(_)));
        assert!(e.to_string().contains("not implemented"));
    }
}
