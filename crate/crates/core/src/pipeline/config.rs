//! Flat JSON run configuration with `key=value` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignConfig;
use crate::error::{Error, Result};
use crate::gnn::GnnConfig;
use crate::rvq::RvqConfig;
use crate::toylm::{LoraConfig, ToyLmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    pub codebook_size: usize,
    pub num_quantizers: usize,
    pub commitment_beta: f64,
    pub dead_code_batches: usize,
    pub ema_decay: f64,
    pub residual_pool_size: usize,

    pub feature_dim: usize,
    pub gnn_dim: usize,
    pub gnn_heads: usize,
    pub gnn_head_dim: usize,
    pub gnn_layers: usize,

    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ff_dim: usize,
    pub lm_context: usize,
    pub lm_feature_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,

    pub lr_lora: f64,
    pub lr_encoder: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// One of `hit@1`, `hit@3`, `hit@5`, `hit@10`.
    pub monitor: String,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub max_epochs: usize,
    /// Validate every this many optimizer steps; 0 validates once per epoch.
    pub val_every: usize,

    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub facts_per_subject: usize,
    pub holdout_fraction: f64,
    pub max_edges: usize,
    pub entity_words: usize,
    pub relation_words: usize,
    pub pretrain_entities: usize,
    pub pretrain_facts: usize,

    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    pub data_dir: String,
    pub out_dir: String,
    /// SPARQL response cache; `KGTOK_CACHE_DIR` wins when set.
    pub cache_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            codebook_size: 128,
            num_quantizers: 20,
            commitment_beta: 0.25,
            dead_code_batches: 4,
            ema_decay: 0.99,
            residual_pool_size: 4096,
            feature_dim: 64,
            gnn_dim: 64,
            gnn_heads: 4,
            gnn_head_dim: 16,
            gnn_layers: 1,
            lm_dim: 64,
            lm_layers: 2,
            lm_heads: 4,
            lm_ff_dim: 256,
            lm_context: 256,
            lm_feature_dim: 64,
            lora_rank: 4,
            lora_alpha: 8.0,
            lora_dropout: 0.2,
            lr_lora: 1e-5,
            lr_encoder: 5e-4,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            plateau_factor: 0.5,
            plateau_patience: 1,
            monitor: "hit@10".into(),
            early_stop_patience: 2,
            batch_size: 8,
            grad_accumulation: 2,
            max_epochs: 20,
            val_every: 0,
            n_entities: 6000,
            n_relations: 12,
            n_facts: 2400,
            facts_per_subject: 1,
            holdout_fraction: 0.1,
            max_edges: 32,
            entity_words: 1,
            relation_words: 1,
            pretrain_entities: 1500,
            pretrain_facts: 1200,
            pretrain_steps: 3000,
            pretrain_lr: 3e-3,
            pretrain_batch: 8,
            data_dir: "data".into(),
            out_dir: "runs".into(),
            cache_dir: ".kgtok-cache".into(),
        }
    }
}

fn check(ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg.to_string()))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies one `key=value` override. The value is parsed as JSON when
    /// possible and taken as a bare string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let mut value = serde_json::to_value(&*self)?;
        let map = value.as_object_mut().expect("struct serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        let parsed = serde_json::from_str(raw.trim()).unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(value).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.rvq().validate()?;
        self.gnn().validate()?;
        self.align().validate()?;
        self.lm(16).validate()?;
        check(self.lr_lora > 0.0 && self.lr_encoder > 0.0, "learning rates must be positive")?;
        check(self.weight_decay >= 0.0, "weight_decay must be non-negative")?;
        check(self.clip_norm > 0.0, "clip_norm must be positive")?;
        check(self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau_factor must lie in (0, 1)")?;
        check(self.monitored_k().is_some(), "monitor must be one of hit@1, hit@3, hit@5, hit@10")?;
        check(self.batch_size > 0 && self.grad_accumulation > 0, "batch_size and grad_accumulation must be positive")?;
        check(self.max_epochs > 0, "max_epochs must be positive")?;
        check(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5, "holdout_fraction must lie in (0, 0.5)")?;
        check(self.n_relations >= self.facts_per_subject, "facts_per_subject exceeds n_relations")?;
        check(self.facts_per_subject >= 1 && self.max_edges >= 1, "facts_per_subject and max_edges must be positive")?;
        check(self.n_facts >= 3 && self.pretrain_facts >= 1, "corpus too small")?;
        check(self.entity_words >= 1 && self.relation_words >= 1, "labels need at least one word")?;
        check(self.pretrain_batch > 0 && self.pretrain_lr > 0.0, "pretraining batch and lr must be positive")?;
        Ok(())
    }

    /// The `k` of the monitored Hit@k.
    pub fn monitored_k(&self) -> Option<usize> {
        match self.monitor.as_str() {
            "hit@1" => Some(1),
            "hit@3" => Some(3),
            "hit@5" => Some(5),
            "hit@10" => Some(10),
            _ => None,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn rvq(&self) -> RvqConfig {
        RvqConfig {
            q: self.num_quantizers,
            k: self.codebook_size,
            beta: self.commitment_beta,
            n_dead: self.dead_code_batches,
            ema_decay: self.ema_decay,
            pool_size: self.residual_pool_size,
        }
    }

    pub fn gnn(&self) -> GnnConfig {
        GnnConfig {
            d_in: self.feature_dim,
            d_gnn: self.gnn_dim,
            heads: self.gnn_heads,
            d_head: self.gnn_head_dim,
            layers: self.gnn_layers,
        }
    }

    pub fn align(&self) -> AlignConfig {
        AlignConfig::new(self.gnn_dim, self.lm_dim)
    }

    /// The vocabulary size comes from the corpus.
    pub fn lm(&self, vocab_size: usize) -> ToyLmConfig {
        ToyLmConfig {
            vocab_size,
            d_llm: self.lm_dim,
            layers: self.lm_layers,
            heads: self.lm_heads,
            d_ff: self.lm_ff_dim,
            context_length: self.lm_context,
            placeholder_token_id: 4,
            d_feature: self.lm_feature_dim,
            lora: LoraConfig {
                rank: self.lora_rank,
                alpha: self.lora_alpha,
                dropout: self.lora_dropout,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("codebook_size=64").unwrap();
        c.set("monitor=hit@5").unwrap();
        c.set("data_dir=/tmp/x").unwrap();
        assert_eq!((c.codebook_size, c.monitored_k(), c.data_dir.as_str()), (64, Some(5), "/tmp/x"));
        assert!(c.set("no_such_key=1").is_err());
        assert!(c.set("batch_size=-3").is_err());
        assert!(c.set("batch_size").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sed": 2}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.codebook_size, 128);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
