//! JSONL dialogue files and the synthetic generator.
//!
//! One object per line:
//!
//! ```text
//! {"context":[{"speaker":"F","text":"..."}],"candidates":["..."],"labels":[0,1]}
//! ```
//!
//! Context speakers are mapped to roles relative to the response: the
//! speaker of the final context utterance is the `Receiver`, the other
//! speaker is the `Sender` who utters the candidates.

pub mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dialogue::{tokenize, Dialogue, SpeakerRole, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::model::TaskMode;

pub const SPEAKERS: [&str; 2] = ["F", "M"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

/// Wire form of one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub context: Vec<Turn>,
    pub candidates: Vec<String>,
    pub labels: Vec<u8>,
}

impl Record {
    /// Checks the schema and converts to token ids. `line` is 1-based and
    /// only used in error messages.
    pub fn to_dialogue(&self, vocab: &Vocab, mode: TaskMode, line: usize) -> Result<Dialogue> {
        let bad = |detail: String| Error::Schema { line, detail };
        let last = match self.context.last() {
            Some(t) => &t.speaker,
            None => return Err(bad("empty context".into())),
        };
        if self.candidates.is_empty() {
            return Err(bad("no candidates".into()));
        }
        if self.candidates.len() != self.labels.len() {
            return Err(bad(format!(
                "{} candidates but {} labels",
                self.candidates.len(),
                self.labels.len()
            )));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y > 1) {
            return Err(bad(format!("label {y} is not 0 or 1")));
        }
        let positives = self.labels.iter().filter(|&&y| y == 1).count();
        if mode == TaskMode::MultiChoice && positives != 1 {
            return Err(bad(format!(
                "multi-choice record needs exactly one positive, found {positives}"
            )));
        }
        let mut context = Vec::with_capacity(self.context.len());
        for (i, turn) in self.context.iter().enumerate() {
            if !SPEAKERS.contains(&turn.speaker.as_str()) {
                return Err(bad(format!(
                    "turn {i}: speaker {:?} is not F or M",
                    turn.speaker
                )));
            }
            let tokens = tokenize(&turn.text, vocab);
            if tokens.is_empty() {
                return Err(bad(format!("turn {i} has no tokens")));
            }
            let role = if &turn.speaker == last {
                SpeakerRole::Receiver
            } else {
                SpeakerRole::Sender
            };
            context.push(Utterance::new(tokens, role));
        }
        let mut candidates = Vec::with_capacity(self.candidates.len());
        for (i, text) in self.candidates.iter().enumerate() {
            let tokens = tokenize(text, vocab);
            if tokens.is_empty() {
                return Err(bad(format!("candidate {i} has no tokens")));
            }
            candidates.push(Utterance::new(tokens, SpeakerRole::Sender));
        }
        Ok(Dialogue {
            context,
            candidates,
            labels: self.labels.clone(),
        })
    }
}

/// Dialogues that passed validation and the per-line errors of the rest.
#[derive(Debug, Default)]
pub struct Loaded {
    pub dialogues: Vec<Dialogue>,
    pub rejected: Vec<Error>,
}

/// Parses JSONL text. Blank lines are ignored; malformed lines are
/// collected in `rejected` and logged.
pub fn parse_jsonl(text: &str, vocab: &Vocab, mode: TaskMode) -> Loaded {
    let mut out = Loaded::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Record>(raw)
            .map_err(|e| Error::Schema {
                line,
                detail: e.to_string(),
            })
            .and_then(|r| r.to_dialogue(vocab, mode, line));
        match parsed {
            Ok(d) => out.dialogues.push(d),
            Err(e) => {
                log::warn!("{e}");
                out.rejected.push(e);
            }
        }
    }
    if !out.rejected.is_empty() {
        log::warn!("rejected {} malformed lines", out.rejected.len());
    }
    out
}

pub fn read_jsonl(path: impl AsRef<Path>, vocab: &Vocab, mode: TaskMode) -> Result<Loaded> {
    Ok(parse_jsonl(&fs::read_to_string(path)?, vocab, mode))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Schema {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}
