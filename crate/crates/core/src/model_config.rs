//! Model geometry and KV-cache size arithmetic.
//!
//! Every byte count the cache, the swap engine and the simulator use is
//! derived from a [`ModelConfig`]. A KV-token is the key and value vector of
//! one token across every layer, so its size is
//! `2 * n_layer * n_kv_head * head_size * bytes_per_scalar`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelConfigError {
    #[error("hidden size {hidden} != n_head {n_head} * head_size {head_size}")]
    HiddenMismatch {
        hidden: u64,
        n_head: u64,
        head_size: u64,
    },
    #[error("n_head {n_head} is not a multiple of n_kv_head {n_kv_head}")]
    GroupNotIntegral { n_head: u64, n_kv_head: u64 },
    #[error("n_partitions must be >= 1 and divide n_kv_head {n_kv_head}, got {n_partitions}")]
    BadPartitions { n_kv_head: u64, n_partitions: u64 },
    #[error("chunk size must be at least 1")]
    ZeroChunkSize,
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
    #[error("cannot read model config: {0}")]
    Io(String),
    #[error("cannot parse model config: {0}")]
    Parse(String),
}

fn default_bytes_per_scalar() -> u64 {
    2
}

fn default_partitions() -> u64 {
    1
}

/// Transformer geometry relevant to KV sizing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_layer: u64,
    /// Query hidden size.
    pub hidden: u64,
    pub n_head: u64,
    pub n_kv_head: u64,
    pub head_size: u64,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: u64,
    /// Tensor-parallel degree.
    #[serde(default = "default_partitions")]
    pub n_partitions: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelConfigError> {
        if self.hidden != self.n_head * self.head_size {
            return Err(ModelConfigError::HiddenMismatch {
                hidden: self.hidden,
                n_head: self.n_head,
                head_size: self.head_size,
            });
        }
        if self.n_kv_head == 0 || !self.n_head.is_multiple_of(self.n_kv_head) {
            return Err(ModelConfigError::GroupNotIntegral {
                n_head: self.n_head,
                n_kv_head: self.n_kv_head,
            });
        }
        if self.n_partitions == 0 || !self.n_kv_head.is_multiple_of(self.n_partitions) {
            return Err(ModelConfigError::BadPartitions {
                n_kv_head: self.n_kv_head,
                n_partitions: self.n_partitions,
            });
        }
        Ok(())
    }

    /// Query heads sharing one KV head.
    pub fn group_size(&self) -> u64 {
        self.n_head / self.n_kv_head
    }

    pub fn opt_13b() -> Self {
        Self::preset("opt-13b", 40, 5120, 40, 40, 1)
    }

    pub fn opt_66b() -> Self {
        Self::preset("opt-66b", 64, 9216, 72, 72, 4)
    }

    /// Llama 2-13B with the KV head count reduced from 40 to 10 (GQA group 4).
    pub fn llama2_13b() -> Self {
        Self::preset("llama2-13b", 40, 5120, 40, 10, 1)
    }

    pub fn llama2_70b() -> Self {
        Self::preset("llama2-70b", 80, 8192, 64, 8, 4)
    }

    fn preset(
        name: &str,
        n_layer: u64,
        hidden: u64,
        n_head: u64,
        n_kv_head: u64,
        n_partitions: u64,
    ) -> Self {
        Self {
            name: name.to_string(),
            n_layer,
            hidden,
            n_head,
            n_kv_head,
            head_size: 128,
            bytes_per_scalar: 2,
            n_partitions,
        }
    }

    pub fn presets() -> Vec<ModelConfig> {
        vec![
            Self::opt_13b(),
            Self::opt_66b(),
            Self::llama2_13b(),
            Self::llama2_70b(),
        ]
    }

    pub fn by_name(name: &str) -> Result<Self, ModelConfigError> {
        Self::presets()
            .into_iter()
            .find(|m| m.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| ModelConfigError::UnknownPreset(name.to_string()))
    }

    /// Parses a `key = value` config file.
    pub fn from_toml_str(text: &str) -> Result<Self, ModelConfigError> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| ModelConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ModelConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }
}

/// Bytes of one KV-token across all layers, keys and values, before partitioning.
pub fn kv_token_bytes(cfg: &ModelConfig) -> u64 {
    2 * cfg.n_layer * cfg.n_kv_head * cfg.head_size * cfg.bytes_per_scalar
}

/// Per-worker bytes moved when one chunk of `chunk_size` tokens is swapped.
pub fn chunk_bytes(cfg: &ModelConfig, chunk_size: u64) -> Result<u64, ModelConfigError> {
    if chunk_size == 0 {
        return Err(ModelConfigError::ZeroChunkSize);
    }
    Ok(kv_token_bytes(cfg) * chunk_size / cfg.n_partitions)
}

/// Per-layer bytes for `tokens` KV-tokens on one worker.
pub fn layer_bytes(cfg: &ModelConfig, tokens: u64) -> u64 {
    2 * tokens * cfg.n_kv_head * cfg.head_size * cfg.bytes_per_scalar / cfg.n_partitions
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for m in ModelConfig::presets() {
            m.validate().unwrap();
        }
    }

    #[test]
    fn opt_13b_token_bytes() {
        let b = kv_token_bytes(&ModelConfig::opt_13b());
        assert_eq!(b, 819_200);
        assert!((b as f64 / (1024.0 * 1024.0) - 0.78).abs() < 0.005);
    }

    #[test]
    fn gqa_llama_13b_is_quarter_of_opt() {
        assert_eq!(kv_token_bytes(&ModelConfig::llama2_13b()), 204_800);
        assert_eq!(
            kv_token_bytes(&ModelConfig::llama2_13b()) * 4,
            kv_token_bytes(&ModelConfig::opt_13b())
        );
    }

    #[test]
    fn zero_layers_zero_bytes() {
        let mut m = ModelConfig::opt_13b();
        m.n_layer = 0;
        assert_eq!(kv_token_bytes(&m), 0);
    }

    #[test]
    fn chunk_bytes_examples() {
        let opt = ModelConfig::opt_13b();
        assert_eq!(chunk_bytes(&opt, 32).unwrap(), 26_214_400);
        assert_eq!(chunk_bytes(&opt, 1).unwrap(), kv_token_bytes(&opt));
        assert_eq!(
            chunk_bytes(&ModelConfig::llama2_70b(), 32).unwrap(),
            2_621_440
        );
        assert_eq!(chunk_bytes(&opt, 0), Err(ModelConfigError::ZeroChunkSize));
    }

    #[test]
    fn validation_errors() {
        let mut m = ModelConfig::opt_13b();
        m.hidden = 5000;
        assert!(matches!(
            m.validate(),
            Err(ModelConfigError::HiddenMismatch { .. })
        ));
        let mut m = ModelConfig::opt_13b();
        m.n_kv_head = 7;
        assert!(matches!(
            m.validate(),
            Err(ModelConfigError::GroupNotIntegral { .. })
        ));
        let mut m = ModelConfig::llama2_70b();
        m.n_partitions = 3;
        assert!(matches!(
            m.validate(),
            Err(ModelConfigError::BadPartitions { .. })
        ));
    }

    #[test]
    fn parses_key_value_file() {
        let text = "name = \"tiny\"\nn_layer = 2\nhidden = 64\nn_head = 4\nn_kv_head = 2\nhead_size = 16\n";
        let m = ModelConfig::from_toml_str(text).unwrap();
        assert_eq!(m.bytes_per_scalar, 2);
        assert_eq!(m.n_partitions, 1);
        assert_eq!(kv_token_bytes(&m), 2 * 2 * 2 * 16 * 2);
        assert!(ModelConfig::from_toml_str("name = \"x\"\nn_layer = 1\nhidden = 10\nn_head = 4\nn_kv_head = 2\nhead_size = 16\n").is_err());
    }

    #[test]
    fn preset_lookup() {
        assert_eq!(ModelConfig::by_name("OPT-66B").unwrap().n_layer, 64);
        assert!(ModelConfig::by_name("gpt-5").is_err());
    }
}
