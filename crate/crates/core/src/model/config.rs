use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dialogue::AssemblyConfig;
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    MaxPool,
    MeanPool,
    /// Width-3 same-padded convolution, then max-pooling.
    Cnn3,
    /// Widths 2, 3 and 4, each max-pooled, concatenated.
    CnnMulti,
}

impl Aggregator {
    pub const MULTI_WIDTHS: [usize; 3] = [2, 3, 4];

    pub fn widths(self) -> &'static [usize] {
        match self {
            Aggregator::MaxPool | Aggregator::MeanPool => &[],
            Aggregator::Cnn3 => &[3],
            Aggregator::CnnMulti => &Self::MULTI_WIDTHS,
        }
    }

    /// Width of an utterance vector for hidden size `d`.
    pub fn out_dim(self, d: usize) -> usize {
        match self {
            Aggregator::CnnMulti => d * Self::MULTI_WIDTHS.len(),
            _ => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Channels {
    #[default]
    Both,
    UtteranceOnly,
    SpeakerOnly,
    /// No decoupling head: max-pooled encoder output only.
    None,
}

impl Channels {
    pub fn utterance(self) -> bool {
        matches!(self, Channels::Both | Channels::UtteranceOnly)
    }

    pub fn speaker(self) -> bool {
        matches!(self, Channels::Both | Channels::SpeakerOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Two logits per (context, response) pair.
    Binary,
    /// One logit per candidate, softmax over the candidate set.
    #[default]
    MultiChoice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdfnConfig {
    pub d: usize,
    pub heads: usize,
    pub n_decoupling: usize,
    pub n_bigru_layers: usize,
    pub aggregator: Aggregator,
    pub fuse_gate: bool,
    pub fuse_original: bool,
    pub channels: Channels,
}

impl Default for MdfnConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            n_decoupling: 1,
            n_bigru_layers: 1,
            aggregator: Aggregator::MaxPool,
            fuse_gate: true,
            fuse_original: true,
            channels: Channels::Both,
        }
    }
}

/// Named ablation presets.
pub const PRESETS: [&str; 10] = [
    "MDFN",
    "+UA-Mask",
    "+SA-Mask",
    "Baseline",
    "-Gate",
    "-Original Info",
    "-Original Info -Gate",
    "Mean-Pool",
    "CNN",
    "CNN-Multi",
];

impl MdfnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head d {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.n_decoupling == 0 {
            return Err(Error::Config("n_decoupling must be at least 1".into()));
        }
        if self.n_bigru_layers == 0 {
            return Err(Error::Config("n_bigru_layers must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies preset `name` on top of `self`.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        match name {
            "MDFN" => {}
            "+UA-Mask" => self.channels = Channels::UtteranceOnly,
            "+SA-Mask" => self.channels = Channels::SpeakerOnly,
            "Baseline" => self.channels = Channels::None,
            "-Gate" => self.fuse_gate = false,
            "-Original Info" => self.fuse_original = false,
            "-Original Info -Gate" => {
                self.fuse_original = false;
                self.fuse_gate = false;
            }
            "Mean-Pool" => self.aggregator = Aggregator::MeanPool,
            "CNN" => self.aggregator = Aggregator::Cnn3,
            "CNN-Multi" => self.aggregator = Aggregator::CnnMulti,
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {PRESETS:?}"
                )))
            }
        }
        Ok(self)
    }
}

/// Everything that fixes the parameter layout and forward computation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default)]
    pub mode: TaskMode,
    pub assembly: AssemblyConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub head: MdfnConfig,
}

impl ModelConfig {
    /// Desk-scale defaults: `d = 64`, 4 heads, 2 encoder layers.
    pub fn new(vocab_size: usize, max_len: usize, mode: TaskMode) -> Self {
        let head = MdfnConfig::default();
        Self {
            mode,
            assembly: AssemblyConfig {
                max_len,
                max_utterances: 20,
            },
            encoder: EncoderConfig::new(vocab_size, head.d, head.heads, max_len),
            head,
        }
    }

    /// Sets the hidden size and head count of both encoder and head.
    pub fn with_width(mut self, d: usize, heads: usize) -> Self {
        self.encoder.d = d;
        self.encoder.heads = heads;
        self.head.d = d;
        self.head.heads = heads;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.assembly.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        if self.encoder.d != self.head.d {
            return Err(Error::Config(format!(
                "encoder d {} differs from head d {}",
                self.encoder.d, self.head.d
            )));
        }
        if self.encoder.max_len < self.assembly.max_len {
            return Err(Error::Config(format!(
                "encoder max_len {} below assembly max_len {}",
                self.encoder.max_len, self.assembly.max_len
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Model settings that do not depend on the vocabulary; `build` fills in
/// the vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub mode: TaskMode,
    pub max_len: usize,
    pub max_utterances: usize,
    pub encoder_layers: usize,
    pub ffn: Option<usize>,
    /// Frozen embedding file; the encoder is trained when absent.
    pub embeddings: Option<PathBuf>,
    pub head: MdfnConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            mode: TaskMode::MultiChoice,
            max_len: 64,
            max_utterances: 20,
            encoder_layers: 2,
            ffn: None,
            embeddings: None,
            head: MdfnConfig::default(),
        }
    }
}

impl ModelSpec {
    pub fn build(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::new(vocab_size, self.max_len, self.mode)
            .with_width(self.head.d, self.head.heads);
        cfg.assembly.max_utterances = self.max_utterances;
        cfg.encoder.layers = self.encoder_layers;
        cfg.encoder.ffn = self.ffn;
        if let Some(path) = &self.embeddings {
            cfg.encoder.mode = EncoderMode::FileBacked { path: path.clone() };
        }
        cfg.head = self.head;
        cfg.validate()?;
        Ok(cfg)
    }
}


#[cfg(test)]
mod spec_tests {
    use super::*;

    #[test]
    fn spec_builds_matching_config() {
        let spec: ModelSpec = serde_json::from_str(
            r#"{"max_len":32,"head":{"d":16,"heads":2,"channels":"speaker_only"}}"#,
        )
        .unwrap();
        let cfg = spec.build(50).unwrap();
        assert_eq!(cfg.encoder.vocab_size, 50);
        assert_eq!((cfg.encoder.d, cfg.encoder.heads), (16, 2));
        assert_eq!(cfg.assembly.max_len, 32);
        assert_eq!(cfg.head.channels, Channels::SpeakerOnly);
        assert!(serde_json::from_str::<ModelSpec>(r#"{"dim":3}"#).is_err());
    }
}
