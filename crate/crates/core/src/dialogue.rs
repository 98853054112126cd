//! Dialogue domain types, tokenization and sequence assembly.
//!
//! A dialogue context plus one candidate response is flattened into
//!
//! ```text
//! [CLS] u_1 [SEP] u_2 [SEP] ... u_k [SEP] r [SEP] [PAD] ...
//! ```
//!
//! Every position carries the 1-based index of the utterance it belongs to
//! and the speaker of that utterance. `[CLS]` belongs to utterance 1, each
//! `[SEP]` belongs to the utterance it closes, and the response is utterance
//! `k + 1` spoken by [`SpeakerRole::Sender`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;

/// Reserved tokens in file order; their line number is their id.
pub const SPECIAL_TOKENS: [&str; 4] = [PAD, UNK, CLS, SEP];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeakerRole {
    /// The party that utters the candidate response.
    Sender,
    Receiver,
}

impl SpeakerRole {
    pub fn other(self) -> Self {
        match self {
            SpeakerRole::Sender => SpeakerRole::Receiver,
            SpeakerRole::Receiver => SpeakerRole::Sender,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<TokenId>,
    pub speaker: SpeakerRole,
}

impl Utterance {
    pub fn new(tokens: Vec<TokenId>, speaker: SpeakerRole) -> Self {
        Self { tokens, speaker }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub context: Vec<Utterance>,
    /// Candidate responses. Their speaker is always `Sender`.
    pub candidates: Vec<Utterance>,
    pub labels: Vec<u8>,
}

impl Dialogue {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == 1)
            .map(|(i, _)| i)
    }
}

/// Closed token vocabulary. Ids 0..=3 are `[PAD] [UNK] [CLS] [SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        for (id, special) in SPECIAL_TOKENS.iter().enumerate() {
            match tokens.get(id) {
                Some(t) if t == special => {}
                Some(t) => {
                    return Err(Error::Vocab(format!(
                        "line {id} must be {special}, found {t:?}"
                    )))
                }
                None => return Err(Error::Vocab(format!("missing reserved token {special}"))),
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Vocab(format!("line {id}: invalid token {t:?}")));
            }
            if index.insert(t.clone(), id as TokenId).is_some() {
                return Err(Error::Vocab(format!("line {id}: duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> TokenId {
        UNK_ID
    }
}

/// Whitespace split, lowercase, unknown words map to `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|w| vocab.id(&w.to_lowercase()).unwrap_or(vocab.unk_id()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyConfig {
    /// Padded sequence length, specials included.
    pub max_len: usize,
    /// Context is capped to this many most recent utterances.
    pub max_utterances: usize,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            max_len: 256,
            max_utterances: 20,
        }
    }
}

impl AssemblyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len < 3 {
            return Err(Error::Config(format!("max_len {} < 3", self.max_len)));
        }
        if self.max_utterances == 0 {
            return Err(Error::Config("max_utterances must be positive".into()));
        }
        Ok(())
    }
}

/// Flat, padded token sequence with utterance and speaker tags per position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSequence {
    pub token_ids: Vec<TokenId>,
    /// 1-based utterance index; 0 on padding.
    pub utt_index: Vec<usize>,
    /// `None` on padding.
    pub speaker: Vec<Option<SpeakerRole>>,
    /// `true` marks a real token.
    pub pad_mask: Vec<bool>,
}

impl TaggedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    /// Number of utterances including the response (`k + 1`).
    pub fn num_utterances(&self) -> usize {
        self.utt_index.iter().copied().max().unwrap_or(0)
    }

    /// Positions belonging to utterance `index` (1-based), in order.
    pub fn utterance_positions(&self, index: usize) -> Vec<usize> {
        self.utt_index
            .iter()
            .zip(&self.pad_mask)
            .enumerate()
            .filter(|(_, (&t, &real))| real && t == index)
            .map(|(i, _)| i)
            .collect()
    }

    /// The real-token prefix with padding removed.
    pub fn trimmed(&self) -> TaggedSequence {
        let n = self.real_len();
        TaggedSequence {
            token_ids: self.token_ids[..n].to_vec(),
            utt_index: self.utt_index[..n].to_vec(),
            speaker: self.speaker[..n].to_vec(),
            pad_mask: self.pad_mask[..n].to_vec(),
        }
    }
}

/// Longest-first trimming: one tail token at a time from the currently
/// longest context utterance (lowest index on ties). The response is
/// shortened only once every context utterance is down to one token.
pub(crate) fn longest_first_lengths(
    context: &[usize],
    response: usize,
    budget: usize,
) -> Option<(Vec<usize>, usize)> {
    let mut lens = context.to_vec();
    let mut resp = response;
    let mut total: usize = lens.iter().sum::<usize>() + resp;
    while total > budget {
        let longest = lens
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 1)
            .max_by(|(ia, la), (ib, lb)| la.cmp(lb).then(ib.cmp(ia)))
            .map(|(i, _)| i);
        match longest {
            Some(i) => lens[i] -= 1,
            None if resp > 1 => resp -= 1,
            None => return None,
        }
        total -= 1;
    }
    Some((lens, resp))
}

/// Assembles the context of `dialogue` with candidate `candidate_idx`.
pub fn assemble(
    dialogue: &Dialogue,
    candidate_idx: usize,
    cfg: &AssemblyConfig,
) -> Result<TaggedSequence> {
    cfg.validate()?;
    let candidate = dialogue
        .candidates
        .get(candidate_idx)
        .ok_or(Error::CandidateIndex {
            index: candidate_idx,
            count: dialogue.candidates.len(),
        })?;
    if dialogue.context.is_empty() {
        return Err(Error::EmptyContext);
    }
    if candidate.tokens.is_empty() {
        return Err(Error::EmptyCandidate(candidate_idx));
    }
    let start = dialogue.context.len().saturating_sub(cfg.max_utterances);
    let context = &dialogue.context[start..];
    if let Some(pos) = context.iter().position(|u| u.tokens.is_empty()) {
        return Err(Error::Dataset(format!(
            "context utterance {} has no tokens",
            start + pos + 1
        )));
    }

    let k = context.len();
    let specials = k + 2;
    let budget = cfg
        .max_len
        .checked_sub(specials)
        .ok_or(Error::SequenceTooLong {
            max_len: cfg.max_len,
        })?;
    let ctx_lens: Vec<usize> = context.iter().map(|u| u.tokens.len()).collect();
    let (ctx_lens, resp_len) = longest_first_lengths(&ctx_lens, candidate.tokens.len(), budget)
        .ok_or(Error::SequenceTooLong {
            max_len: cfg.max_len,
        })?;

    let mut seq = TaggedSequence {
        token_ids: Vec::with_capacity(cfg.max_len),
        utt_index: Vec::with_capacity(cfg.max_len),
        speaker: Vec::with_capacity(cfg.max_len),
        pad_mask: Vec::with_capacity(cfg.max_len),
    };
    let mut push = |id: TokenId, utt: usize, speaker: SpeakerRole| {
        seq.token_ids.push(id);
        seq.utt_index.push(utt);
        seq.speaker.push(Some(speaker));
        seq.pad_mask.push(true);
    };

    push(CLS_ID, 1, context[0].speaker);
    for (i, (utt, &len)) in context.iter().zip(&ctx_lens).enumerate() {
        for &t in &utt.tokens[..len] {
            push(t, i + 1, utt.speaker);
        }
        push(SEP_ID, i + 1, utt.speaker);
    }
    for &t in &candidate.tokens[..resp_len] {
        push(t, k + 1, SpeakerRole::Sender);
    }
    push(SEP_ID, k + 1, SpeakerRole::Sender);

    while seq.token_ids.len() < cfg.max_len {
        seq.token_ids.push(PAD_ID);
        seq.utt_index.push(0);
        seq.speaker.push(None);
        seq.pad_mask.push(false);
    }
    Ok(seq)
}
