//! The mask-based decoupling-fusing head on top of the encoder.
//!
//! For each (context, candidate) sequence:
//!
//! 1. the encoder produces `E`;
//! 2. four masked attentions decouple `E` into `C_1..C_4`;
//! 3. two gates fuse them into the utterance-aware `C_u` and the
//!    speaker-aware `C_s` views;
//! 4. each view is pooled per utterance and run through a BiGRU;
//! 5. the two channel vectors are fused by `tanh(W [v1; v2] + b)` and
//!    classified.
//!
//! Stacked decoupling blocks feed block `t > 1` with a linear projection
//! of the previous block's `[C_u; C_s]` back to `d` columns, and that
//! projection plays the role of `E` inside the block.

mod config;
pub mod ops;


pub use config::{Aggregator, Channels, MdfnConfig, ModelConfig, ModelSpec, TaskMode, PRESETS};
pub use ops::{ChannelOutputs, Fused};

use crate::dialogue::{assemble, Dialogue, TaggedSequence};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::masks::{build_masks, MaskKind, MaskSet};
use crate::nn::layers::{Conv1d, GruCell, Linear, Mhsa};
use crate::nn::{Graph, Initializer, ParamRegistry, Scalar, Tensor, Var};
use ops::{BiGruParams, Fusion, GateParams};

/// An assembled sequence with padding removed, its masks and the
/// positions of each utterance (response last).
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub seq: TaggedSequence,
    pub masks: MaskSet,
    pub utterances: Vec<Vec<usize>>,
}

impl Prepared {
    pub fn new(seq: &TaggedSequence) -> Self {
        let seq = seq.trimmed();
        let masks = build_masks(&seq);
        let utterances = (1..=seq.num_utterances())
            .map(|i| seq.utterance_positions(i))
            .collect();
        Self {
            seq,
            masks,
            utterances,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Channel {
    Utterance,
    Speaker,
}

impl Channel {
    fn tag(self) -> &'static str {
        match self {
            Channel::Utterance => "u",
            Channel::Speaker => "s",
        }
    }

    fn kinds(self) -> [MaskKind; 2] {
        match self {
            Channel::Utterance => [MaskKind::SameUtterance, MaskKind::OtherUtterance],
            Channel::Speaker => [MaskKind::SameSpeaker, MaskKind::OtherSpeaker],
        }
    }
}

fn enabled(channels: Channels) -> Vec<Channel> {
    let mut out = Vec::new();
    if channels.utterance() {
        out.push(Channel::Utterance);
    }
    if channels.speaker() {
        out.push(Channel::Speaker);
    }
    out
}

fn block_prefix(t: usize) -> String {
    format!("head.block{t}")
}

/// Creates every parameter `cfg` needs.
pub fn declare_params<T: Scalar>(
    cfg: &ModelConfig,
    reg: &mut ParamRegistry<T>,
    init: &mut Initializer,
) -> Result<()> {
    cfg.validate()?;
    cfg.encoder.declare(reg, init)?;
    let h = &cfg.head;
    let d = h.d;
    let channels = enabled(h.channels);
    if channels.is_empty() {
        Linear::declare(reg, init, "head.pool", d, d)?;
    }
    for t in 0..if channels.is_empty() {
        0
    } else {
        h.n_decoupling
    } {
        let prefix = block_prefix(t);
        if t > 0 {
            Linear::declare(reg, init, &format!("{prefix}.input"), channels.len() * d, d)?;
        }
        for &ch in &channels {
            for kind in ch.kinds() {
                Mhsa::declare(
                    reg,
                    init,
                    &format!("{prefix}.attn{}", kind as usize + 1),
                    d,
                    h.heads,
                )?;
            }
            if h.fuse_gate {
                let gate = format!("{prefix}.gate_{}", ch.tag());
                let fin = if h.fuse_original { 4 * d } else { d };
                Linear::declare(reg, init, &format!("{gate}.fc1"), fin, d)?;
                Linear::declare(reg, init, &format!("{gate}.fc2"), fin, d)?;
                Linear::declare(reg, init, &format!("{gate}.fc3"), 2 * d, d)?;
            } else {
                Linear::declare(reg, init, &format!("{prefix}.fuse_{}", ch.tag()), 2 * d, d)?;
            }
        }
    }
    for &ch in &channels {
        for &w in h.aggregator.widths() {
            Conv1d::declare(
                reg,
                init,
                &format!("head.agg_{}.conv{w}", ch.tag()),
                w,
                d,
                d,
            )?;
        }
        for i in 0..h.n_bigru_layers {
            let input = if i == 0 {
                h.aggregator.out_dim(d)
            } else {
                2 * d
            };
            for dir in ["fwd", "bwd"] {
                GruCell::declare(
                    reg,
                    init,
                    &format!("head.gru_{}.l{i}.{dir}", ch.tag()),
                    input,
                    d,
                )?;
            }
        }
    }
    if !channels.is_empty() {
        Linear::declare(reg, init, "head.fuse", 4 * d, d)?;
    }
    let classes = match cfg.mode {
        TaskMode::Binary => 2,
        TaskMode::MultiChoice => 1,
    };
    Linear::declare(reg, init, "head.cls", d, classes)
}

struct BlockParams {
    input: Option<Linear>,
    attn: [Option<Mhsa>; 4],
    fusion_u: Option<Fusion>,
    fusion_s: Option<Fusion>,
}

struct ChannelHead {
    convs: Vec<Conv1d>,
    gru: BiGruParams,
}

/// Head parameters bound onto one graph.
pub struct Bound {
    pool: Option<Linear>,
    blocks: Vec<BlockParams>,
    head_u: Option<ChannelHead>,
    head_s: Option<ChannelHead>,
    fuse: Option<Linear>,
    cls: Linear,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    pub e: Var,
    /// Decoupled views of the last block.
    pub channels: Option<ChannelOutputs>,
    /// Fused views and gate ratios of the last block.
    pub fused: Option<Fused>,
    pub v: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Mdfn<T: Scalar> {
    cfg: ModelConfig,
    params: ParamRegistry<T>,
    encoder: Encoder<T>,
}

impl<T: Scalar> Mdfn<T> {
    /// A freshly initialized model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamRegistry::new();
        declare_params(&cfg, &mut params, &mut Initializer::new(seed))?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        Ok(Self {
            cfg,
            params,
            encoder,
        })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(cfg: ModelConfig, params: ParamRegistry<T>) -> Result<Self> {
        let mut expected = ParamRegistry::<T>::new();
        declare_params(&cfg, &mut expected, &mut Initializer::new(0))?;
        let want: Vec<(&str, &[usize])> = expected.iter().map(|(n, t)| (n, t.shape())).collect();
        let have: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != have {
            let missing = want.iter().find(|w| !have.contains(w));
            let extra = have.iter().find(|h| !want.contains(h));
            return Err(Error::Config(format!(
                "parameter layout does not match config (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        let encoder = Encoder::new(cfg.encoder.clone())?;
        Ok(Self {
            cfg,
            params,
            encoder,
        })
    }

    /// Same model at another precision.
    pub fn cast<U: Scalar>(&self) -> Mdfn<U> {
        Mdfn {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            encoder: self.encoder.cast(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamRegistry<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamRegistry<T> {
        self.params
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    /// Assembles and prepares every candidate of `dialogue`.
    pub fn prepare(&self, dialogue: &Dialogue) -> Result<Vec<Prepared>> {
        (0..dialogue.candidates.len())
            .map(|i| Ok(Prepared::new(&assemble(dialogue, i, &self.cfg.assembly)?)))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<'_, T>) -> Result<Bound> {
        let h = &self.cfg.head;
        let channels = enabled(h.channels);
        let has = |c| channels.contains(&c);
        let pool = if channels.is_empty() {
            Some(Linear::bind(g, "head.pool")?)
        } else {
            None
        };
        let mut blocks = Vec::new();
        for t in 0..if channels.is_empty() {
            0
        } else {
            h.n_decoupling
        } {
            let prefix = block_prefix(t);
            let input = if t > 0 {
                Some(Linear::bind(g, &format!("{prefix}.input"))?)
            } else {
                None
            };
            let mut attn = [None; 4];
            for &ch in &channels {
                for kind in ch.kinds() {
                    let name = format!("{prefix}.attn{}", kind as usize + 1);
                    attn[kind as usize] = Some(Mhsa::bind(g, &name, h.heads)?);
                }
            }
            let mut fusion = |ch: Channel| -> Result<Option<Fusion>> {
                if !has(ch) {
                    return Ok(None);
                }
                Ok(Some(if h.fuse_gate {
                    let gate = format!("{prefix}.gate_{}", ch.tag());
                    Fusion::Gate(GateParams {
                        fc1: Linear::bind(g, &format!("{gate}.fc1"))?,
                        fc2: Linear::bind(g, &format!("{gate}.fc2"))?,
                        fc3: Linear::bind(g, &format!("{gate}.fc3"))?,
                    })
                } else {
                    Fusion::Direct(Linear::bind(g, &format!("{prefix}.fuse_{}", ch.tag()))?)
                }))
            };
            let fusion_u = fusion(Channel::Utterance)?;
            let fusion_s = fusion(Channel::Speaker)?;
            blocks.push(BlockParams {
                input,
                attn,
                fusion_u,
                fusion_s,
            });
        }
        let mut channel_head = |ch: Channel| -> Result<Option<ChannelHead>> {
            if !has(ch) {
                return Ok(None);
            }
            let convs = h
                .aggregator
                .widths()
                .iter()
                .map(|&w| Conv1d::bind(g, &format!("head.agg_{}.conv{w}", ch.tag()), w))
                .collect::<Result<_>>()?;
            let layers = (0..h.n_bigru_layers)
                .map(|i| {
                    let p = format!("head.gru_{}.l{i}", ch.tag());
                    Ok((
                        GruCell::bind(g, &format!("{p}.fwd"))?,
                        GruCell::bind(g, &format!("{p}.bwd"))?,
                    ))
                })
                .collect::<Result<_>>()?;
            Ok(Some(ChannelHead {
                convs,
                gru: BiGruParams { layers },
            }))
        };
        let head_u = channel_head(Channel::Utterance)?;
        let head_s = channel_head(Channel::Speaker)?;
        let fuse = if channels.is_empty() {
            None
        } else {
            Some(Linear::bind(g, "head.fuse")?)
        };
        Ok(Bound {
            pool,
            blocks,
            head_u,
            head_s,
            fuse,
            cls: Linear::bind(g, "head.cls")?,
        })
    }

    /// Full forward pass for one prepared sequence.
    pub fn forward(&self, g: &mut Graph<'_, T>, b: &Bound, prep: &Prepared) -> Result<Trace> {
        let h = &self.cfg.head;
        let e = self.encoder.encode(g, &prep.seq)?;
        let d = h.d;

        if let Some(pool) = &b.pool {
            let all: Vec<usize> = (0..prep.seq.len()).collect();
            let pooled = g.max_pool_rows(e, &all)?;
            let v = pool.forward(g, pooled)?;
            let v = g.tanh(v);
            let logits = ops::score(g, v, &b.cls)?;
            return Ok(Trace {
                e,
                channels: None,
                fused: None,
                v,
                logits,
            });
        }

        let mut x = e;
        let mut fused = Fused::default();
        let mut channels = ChannelOutputs { c: [None; 4] };
        for block in &b.blocks {
            if let Some(input) = &block.input {
                let parts: Vec<Var> = [fused.cu, fused.cs].into_iter().flatten().collect();
                let cat = if parts.len() == 1 {
                    parts[0]
                } else {
                    g.concat_cols(&parts)?
                };
                x = input.forward(g, cat)?;
            }
            channels = ops::decouple(g, x, &prep.masks, &block.attn)?;
            let original = h.fuse_original.then_some(x);
            fused = ops::fuse_channels(
                g,
                original,
                &channels,
                block.fusion_u.as_ref(),
                block.fusion_s.as_ref(),
            )?;
        }

        let mut channel_vector = |head: &Option<ChannelHead>, c: Option<Var>| -> Result<Var> {
            match (head, c) {
                (Some(head), Some(c)) => {
                    let l = ops::aggregate(g, c, &prep.utterances, h.aggregator, &head.convs)?;
                    ops::integrate(g, l, &head.gru)
                }
                _ => Ok(g.constant(Tensor::zeros([1, 2 * d]))),
            }
        };
        let v1 = channel_vector(&b.head_u, fused.cu)?;
        let v2 = channel_vector(&b.head_s, fused.cs)?;
        let fuse = b.fuse.as_ref().expect("bound with channels");
        let v = ops::fuse_dialogue(g, v1, v2, fuse)?;
        let logits = ops::score(g, v, &b.cls)?;
        Ok(Trace {
            e,
            channels: Some(channels),
            fused: Some(fused),
            v,
            logits,
        })
    }

    /// Logits of every candidate: `1 x C` in multi-choice mode, one `1 x 2`
    /// row per candidate in binary mode.
    pub fn logits(&self, g: &mut Graph<'_, T>, preps: &[Prepared]) -> Result<Vec<Var>> {
        let b = self.bind(g)?;
        let rows = preps
            .iter()
            .map(|p| Ok(self.forward(g, &b, p)?.logits))
            .collect::<Result<Vec<_>>>()?;
        match self.cfg.mode {
            TaskMode::Binary => Ok(rows),
            TaskMode::MultiChoice => Ok(vec![g.concat_cols(&rows)?]),
        }
    }

    /// Summed cross-entropy of one dialogue and the number of terms it
    /// contributes to a batch mean: candidates in binary mode, one context
    /// in multi-choice mode.
    pub fn loss(&self, g: &mut Graph<'_, T>, dialogue: &Dialogue) -> Result<(Var, usize)> {
        check_labels(dialogue, self.cfg.mode)?;
        let preps = self.prepare(dialogue)?;
        let logits = self.logits(g, &preps)?;
        match self.cfg.mode {
            TaskMode::MultiChoice => {
                let targets: Vec<f64> = dialogue.labels.iter().map(|&y| f64::from(y)).collect();
                Ok((g.softmax_xent(logits[0], &targets)?, 1))
            }
            TaskMode::Binary => {
                let mut terms = Vec::with_capacity(logits.len());
                for (&row, &y) in logits.iter().zip(&dialogue.labels) {
                    let y = f64::from(y);
                    terms.push(g.softmax_xent(row, &[1.0 - y, y])?);
                }
                let cat = g.concat_cols(&terms)?;
                Ok((g.sum(cat), terms.len()))
            }
        }
    }

    /// Mean gate ratio `(P_1, P_2)` over all entries for one sequence;
    /// `None` for a channel without a gate.
    pub fn gate_means(&self, prep: &Prepared) -> Result<(Option<f64>, Option<f64>)> {
        let mut g = Graph::with_params(&self.params);
        let b = self.bind(&mut g)?;
        let trace = self.forward(&mut g, &b, prep)?;
        let mean = |v: Option<Var>| {
            v.map(|v| {
                let x = g.value(v).to_f64_vec();
                x.iter().sum::<f64>() / x.len() as f64
            })
        };
        let fused = trace.fused.unwrap_or_default();
        Ok((mean(fused.p1), mean(fused.p2)))
    }

    /// Matching score of every candidate: `softmax[1]` per pair in binary
    /// mode, the candidate softmax in multi-choice mode.
    pub fn scores(&self, dialogue: &Dialogue) -> Result<Vec<f64>> {
        let preps = self.prepare(dialogue)?;
        let mut g = Graph::with_params(&self.params);
        let logits = self.logits(&mut g, &preps)?;
        Ok(match self.cfg.mode {
            TaskMode::MultiChoice => ops::softmax(&g.value(logits[0]).to_f64_vec()),
            TaskMode::Binary => logits
                .iter()
                .map(|&l| ops::softmax(&g.value(l).to_f64_vec())[1])
                .collect(),
        })
    }
}

/// Label constraints of `mode`: one label per candidate, exactly one
/// positive for multi-choice.
pub fn check_labels(dialogue: &Dialogue, mode: TaskMode) -> Result<()> {
    if dialogue.labels.len() != dialogue.candidates.len() {
        return Err(Error::Dataset(format!(
            "{} labels for {} candidates",
            dialogue.labels.len(),
            dialogue.candidates.len()
        )));
    }
    if dialogue.labels.iter().any(|&y| y > 1) {
        return Err(Error::Dataset("labels must be 0 or 1".into()));
    }
    if mode == TaskMode::MultiChoice && dialogue.positives().count() != 1 {
        return Err(Error::Config(format!(
            "multi-choice instance needs exactly one positive, found {}",
            dialogue.positives().count()
        )));
    }
    Ok(())
}
