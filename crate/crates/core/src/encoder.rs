//! Small transformer encoder producing one contextual vector per position.
//!
//! Token and learned positional embeddings feed `layers` pre-norm blocks
//! (self-attention restricted from padded columns, then a ReLU feed-forward
//! layer, each with a residual connection) and a final layer norm.
//!
//! A file-backed mode replaces the whole stack with a frozen lookup table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dialogue::TaggedSequence;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::nn::layers::{self, LayerNorm, Linear, Mhsa};
use crate::nn::{Graph, Initializer, ParamRegistry, Scalar, Tensor, Var};

/// Embedding file magic, `"MDFE"` read as a little-endian `u32`.
pub const EMBEDDING_MAGIC: u32 = u32::from_le_bytes(*b"MDFE");
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    Trainable,
    /// Frozen vectors read from an embedding file.
    FileBacked { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    /// Feed-forward width; `2 * d` when absent.
    #[serde(default)]
    pub ffn: Option<usize>,
    #[serde(default)]
    pub mode: EncoderMode,
}

fn default_layers() -> usize {
    2
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, d: usize, heads: usize, max_len: usize) -> Self {
        Self {
            vocab_size,
            d,
            layers: default_layers(),
            heads,
            max_len,
            ffn: None,
            mode: EncoderMode::Trainable,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn.unwrap_or(2 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "encoder vocab_size, d and max_len must be positive".into(),
            ));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder d {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Creates the trainable encoder parameters under `encoder.*`.
    /// File-backed encoders have none.
    pub fn declare<T: Scalar>(
        &self,
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
    ) -> Result<()> {
        self.validate()?;
        if !matches!(self.mode, EncoderMode::Trainable) {
            return Ok(());
        }
        let d = self.d;
        let bound = (3.0 / d as f64).sqrt();
        reg.insert("encoder.tok_emb", init.uniform(self.vocab_size, d, bound))?;
        reg.insert("encoder.pos_emb", init.uniform(self.max_len, d, bound))?;
        for i in 0..self.layers {
            let p = format!("encoder.layer{i}");
            LayerNorm::declare(reg, init, &format!("{p}.ln1"), d)?;
            Mhsa::declare(reg, init, &format!("{p}.attn"), d, self.heads)?;
            LayerNorm::declare(reg, init, &format!("{p}.ln2"), d)?;
            Linear::declare(reg, init, &format!("{p}.ffn1"), d, self.ffn_width())?;
            Linear::declare(reg, init, &format!("{p}.ffn2"), self.ffn_width(), d)?;
        }
        LayerNorm::declare(reg, init, "encoder.ln_f", d)
    }
}

/// The encoder bound to its frozen table, if any.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub cfg: EncoderConfig,
    table: Option<Tensor<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Loads the lookup table for file-backed configurations.
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let table = match &cfg.mode {
            EncoderMode::Trainable => None,
            EncoderMode::FileBacked { path } => {
                let t = load_embedding_file(path)?;
                if t.rows() != cfg.vocab_size || t.cols() != cfg.d {
                    return Err(Error::HeaderMismatch {
                        path: path.clone(),
                        detail: format!(
                            "table is {}x{}, config expects {}x{}",
                            t.rows(),
                            t.cols(),
                            cfg.vocab_size,
                            cfg.d
                        ),
                    });
                }
                Some(t.cast())
            }
        };
        Ok(Self { cfg, table })
    }

    pub fn with_table(cfg: EncoderConfig, table: Tensor<T>) -> Result<Self> {
        cfg.validate()?;
        if table.rows() != cfg.vocab_size || table.cols() != cfg.d {
            return Err(Error::shape(
                "encoder",
                format!(
                    "table {:?} for vocab {} and d {}",
                    table.shape(),
                    cfg.vocab_size,
                    cfg.d
                ),
            ));
        }
        Ok(Self {
            cfg,
            table: Some(table),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            cfg: self.cfg.clone(),
            table: self.table.as_ref().map(Tensor::cast),
        }
    }

    /// `E`, one row per position of `seq` (padding included).
    pub fn encode(&self, g: &mut Graph<'_, T>, seq: &TaggedSequence) -> Result<Var> {
        let l = seq.len();
        if l > self.cfg.max_len {
            return Err(Error::OverlongSequence {
                len: l,
                max_len: self.cfg.max_len,
            });
        }
        let ids: Vec<usize> = seq
            .token_ids
            .iter()
            .map(|&id| {
                let id = id as usize;
                if id < self.cfg.vocab_size {
                    Ok(id)
                } else {
                    Err(Error::TokenOutOfRange {
                        id: id as u32,
                        vocab_size: self.cfg.vocab_size,
                    })
                }
            })
            .collect::<Result<_>>()?;

        if let Some(table) = &self.table {
            let d = table.cols();
            let data = ids
                .iter()
                .flat_map(|&id| table.row_slice(id).iter().copied())
                .collect();
            return Ok(g.constant(Tensor::new([l, d], data)?));
        }

        let tok = g.param("encoder.tok_emb")?;
        let pos = g.param("encoder.pos_emb")?;
        let tok = g.gather_rows(tok, &ids)?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.gather_rows(pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = Mask::padding(seq);
        for i in 0..self.cfg.layers {
            let p = format!("encoder.layer{i}");
            let ln1 = LayerNorm::bind(g, &format!("{p}.ln1"))?;
            let attn = Mhsa::bind(g, &format!("{p}.attn"), self.cfg.heads)?;
            let ln2 = LayerNorm::bind(g, &format!("{p}.ln2"))?;
            let ffn1 = Linear::bind(g, &format!("{p}.ffn1"))?;
            let ffn2 = Linear::bind(g, &format!("{p}.ffn2"))?;

            let h = ln1.forward(g, x)?;
            let h = layers::mhsa(g, h, &mask, &attn)?;
            x = g.add(x, h)?;
            let h = ln2.forward(g, x)?;
            let h = ffn1.forward(g, h)?;
            let h = g.relu(h);
            let h = ffn2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let ln_f = LayerNorm::bind(g, "encoder.ln_f")?;
        ln_f.forward(g, x)
    }
}

/// Writes `table` (`vocab_size x d`) as an embedding file: a 16-byte header
/// of little-endian `u32` values `magic, vocab_size, d, 0`, then row-major
/// little-endian `f32` values.
pub fn write_embedding_file(path: impl AsRef<Path>, table: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * table.len());
    for v in [EMBEDDING_MAGIC, table.rows() as u32, table.cols() as u32, 0] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in table.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let mismatch = |detail: String| Error::HeaderMismatch {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(mismatch(format!("file has {} bytes", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != EMBEDDING_MAGIC {
        return Err(mismatch(format!("bad magic {:#010x}", word(0))));
    }
    let (rows, cols) = (word(1) as usize, word(2) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * rows * cols {
        return Err(mismatch(format!(
            "{rows}x{cols} table needs {} bytes, found {}",
            4 * rows * cols,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new([rows, cols], data)
}
