//! Unified run configuration: one TOML file covering codec, backbone,
//! head, training, and sampler settings. Every field has a default;
//! unknown keys are rejected; the whole config is echoed into checkpoints
//! so every artifact is self-describing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::codec::{derive_code_length, CodecConfig};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::sample::ScheduleKind;
use crate::tokenizer::{Tokenizer, TokenizerSpec};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub codec: CodecSection,
    pub backbone: BackboneSection,
    pub head: HeadSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerSection::default(),
            codec: CodecSection::default(),
            backbone: BackboneSection::default(),
            head: HeadSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub mode: String,
    pub alphabet: Option<String>,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self {
            mode: "byte".into(),
            alphabet: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    /// Tokens realized jointly per block (m).
    pub block_size: usize,
    /// Overrides the derived ceil(log2 V) width when set.
    pub code_length: Option<u32>,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            block_size: 4,
            code_length: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            hidden_size: 128,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
            max_seq_len: 1024,
            rope_base: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSection {
    pub head_hidden: usize,
    pub head_layers: usize,
    pub time_embed_dim: usize,
    pub mlp_ratio: usize,
    pub num_heads: usize,
    pub cross_mixing: bool,
}

impl Default for HeadSection {
    fn default() -> Self {
        Self {
            head_hidden: 64,
            head_layers: 2,
            time_embed_dim: 64,
            mlp_ratio: 4,
            num_heads: 2,
            cross_mixing: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub pack_length: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub cond_dropout_p: f64,
    pub checkpoint_interval: u64,
    /// Linear warmup over this fraction of total steps, then constant.
    pub warmup_frac: f64,
    /// Packed documents do not attend across boundaries unless disabled.
    pub isolate_documents: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            batch_size: 8,
            pack_length: 512,
            total_steps: 1000,
            seed: 42,
            cond_dropout_p: 0.1,
            checkpoint_interval: 200,
            warmup_frac: 0.01,
            isolate_documents: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub steps: usize,
    pub guidance_scale: f64,
    pub kind: ScheduleKind,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            steps: 15,
            guidance_scale: 9.0,
            kind: ScheduleKind::Uniform,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.build_tokenizer()?;
        let (codec, backbone, head) = self.build_model_configs()?;
        codec.validate()?;
        backbone.validate()?;
        head.validate()?;
        if self.train.pack_length % self.codec.block_size != 0 {
            return Err(Error::Config(format!(
                "train.pack_length {} not divisible by codec.block_size {}",
                self.train.pack_length, self.codec.block_size
            )));
        }
        if self.train.batch_size == 0 || self.train.total_steps == 0 {
            return Err(Error::Config("train.batch_size and train.total_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train.cond_dropout_p) {
            return Err(Error::Config("train.cond_dropout_p must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_frac) {
            return Err(Error::Config("train.warmup_frac must lie in [0, 1]".into()));
        }
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler.steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn build_tokenizer(&self) -> Result<Tokenizer> {
        let spec = match self.tokenizer.mode.as_str() {
            "byte" => TokenizerSpec::Byte,
            "char" => TokenizerSpec::Char {
                alphabet: self
                    .tokenizer
                    .alphabet
                    .clone()
                    .ok_or_else(|| Error::Config("tokenizer.alphabet required for char mode".into()))?,
            },
            "grammar-anbn" => TokenizerSpec::Char {
                alphabet: "ab".into(),
            },
            "grammar-addition" => TokenizerSpec::Char {
                alphabet: "0123456789+=".into(),
            },
            other => {
                return Err(Error::Config(format!(
                    "tokenizer.mode {other:?} (expected byte | char | grammar-anbn | grammar-addition)"
                )))
            }
        };
        Tokenizer::new(spec)
    }

    pub fn build_model_configs(&self) -> Result<(CodecConfig, BackboneConfig, HeadConfig)> {
        let tok = self.build_tokenizer()?;
        let vocab = tok.vocab_size();
        let code_length = self
            .codec
            .code_length
            .unwrap_or_else(|| derive_code_length(vocab));
        let codec = CodecConfig {
            vocab_size: vocab,
            code_length,
            block_size: self.codec.block_size,
            bos_id: tok.bos_id(),
            eos_id: tok.eos_id(),
            fallback_id: tok.fallback_id(),
            bit_order: crate::codec::BitOrder::BigEndian,
        };
        let backbone = BackboneConfig {
            hidden_size: self.backbone.hidden_size,
            num_layers: self.backbone.num_layers,
            num_heads: self.backbone.num_heads,
            mlp_ratio: self.backbone.mlp_ratio,
            block_size: self.codec.block_size,
            max_seq_len: self.backbone.max_seq_len,
            rope_base: self.backbone.rope_base,
        };
        let head = HeadConfig {
            head_hidden: self.head.head_hidden,
            head_layers: self.head.head_layers,
            block_size: self.codec.block_size,
            code_length: code_length as usize,
            cond_size: self.backbone.hidden_size,
            time_embed_dim: self.head.time_embed_dim,
            mlp_ratio: self.head.mlp_ratio,
            num_heads: self.head.num_heads,
            cross_mixing: self.head.cross_mixing,
        };
        Ok((codec, backbone, head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.codec.block_size, 4);
        assert_eq!(cfg.sampler.steps, 15);
        assert_eq!(cfg.sampler.guidance_scale, 9.0);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.train.beta1, 0.9);
        assert_eq!(cfg.train.beta2, 0.95);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[train]\nlr = 0.1\nbogus = 3\n";
        assert!(toml::from_str::<RunConfig>(text).is_err());
    }

    #[test]
    fn byte_mode_derives_nine_bit_codes() {
        let cfg = RunConfig::default();
        let (codec, _, head) = cfg.build_model_configs().unwrap();
        assert_eq!(codec.vocab_size, 259);
        assert_eq!(codec.code_length, 9);
        assert_eq!(head.code_length, 9);
    }

    #[test]
    fn misaligned_pack_length_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.codec.block_size = 3;
        cfg.train.pack_length = 512;
        assert!(cfg.validate().is_err());
    }
}
