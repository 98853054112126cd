//! Seeded synthetic dialogues whose answer depends on who said what.
//!
//! Every context utterance carries one key token from a shared key pool;
//! the rest are context fillers. Candidates carry one key plus fillers
//! from a separate pool, so the only tokens a candidate can share with the
//! context are keys.
//!
//! * `speaker_echo`: the answer repeats the key of the responder's most
//!   recent utterance; distractors repeat keys of the other speaker or
//!   keys absent from the context.
//! * `last_utterance_echo`: the answer repeats the key of the final
//!   utterance; distractors repeat keys of earlier utterances.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{to_jsonl, Record, Turn, SPEAKERS};
use crate::dialogue::{Vocab, SPECIAL_TOKENS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    SpeakerEcho,
    LastUtteranceEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub task: SynthTask,
    /// Total vocabulary size, reserved tokens included.
    pub vocab_size: usize,
    pub n_keys: usize,
    /// Dialogues over all three splits.
    pub n_dialogues: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Inclusive range of context utterances.
    pub turns: (usize, usize),
    /// Inclusive range of tokens per utterance, key included.
    pub utterance_len: (usize, usize),
    pub n_candidates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            task: SynthTask::SpeakerEcho,
            vocab_size: 200,
            n_keys: 40,
            n_dialogues: 5000,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            turns: (3, 5),
            utterance_len: (1, 2),
            n_candidates: 4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let (t0, t1) = self.turns;
        let (u0, u1) = self.utterance_len;
        if t0 < 2 || t0 > t1 {
            return bad(format!(
                "turns {:?} must satisfy 2 <= min <= max",
                self.turns
            ));
        }
        if u0 < 1 || u0 > u1 {
            return bad(format!(
                "utterance_len {:?} must satisfy 1 <= min <= max",
                self.utterance_len
            ));
        }
        if self.n_candidates < 2 {
            return bad("n_candidates must be at least 2".into());
        }
        if self.n_keys < t1 + self.n_candidates {
            return bad(format!(
                "n_keys {} cannot cover {} turns and {} candidates",
                self.n_keys, t1, self.n_candidates
            ));
        }
        if self.vocab_size < SPECIAL_TOKENS.len() + self.n_keys + 2 {
            return bad(format!(
                "vocab_size {} leaves no filler tokens after {} keys",
                self.vocab_size, self.n_keys
            ));
        }
        let fractions = self.valid_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.valid_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || fractions >= 1.0
        {
            return bad("valid_fraction + test_fraction must be below 1".into());
        }
        Ok(())
    }

    /// `(train, valid, test)` sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_dialogues as f64;
        let valid = (n * self.valid_fraction).round() as usize;
        let test = (n * self.test_fraction).round() as usize;
        (self.n_dialogues - valid - test, valid, test)
    }
}

/// Token pools as strings.
struct Pools {
    keys: Vec<String>,
    context: Vec<String>,
    candidate: Vec<String>,
}

impl Pools {
    fn new(cfg: &SynthConfig) -> Self {
        let fillers = cfg.vocab_size - SPECIAL_TOKENS.len() - cfg.n_keys;
        let n_context = fillers / 2;
        Self {
            keys: (0..cfg.n_keys).map(|i| format!("key{i}")).collect(),
            context: (0..n_context).map(|i| format!("c{i}")).collect(),
            candidate: (0..fillers - n_context).map(|i| format!("r{i}")).collect(),
        }
    }

    fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(
            SPECIAL_TOKENS
                .iter()
                .map(|s| s.to_string())
                .chain(self.keys.iter().cloned())
                .chain(self.context.iter().cloned())
                .chain(self.candidate.iter().cloned()),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub vocab: Vocab,
    pub train: Vec<Record>,
    pub valid: Vec<Record>,
    pub test: Vec<Record>,
}

impl SynthData {
    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `vocab.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("train.jsonl"), to_jsonl(&self.train))?;
        fs::write(dir.join("valid.jsonl"), to_jsonl(&self.valid))?;
        fs::write(dir.join("test.jsonl"), to_jsonl(&self.test))?;
        self.vocab.save(dir.join("vocab.txt"))
    }
}

fn utterance(rng: &mut impl Rng, key: &str, fillers: &[String], len: (usize, usize)) -> String {
    let n = rng.gen_range(len.0..=len.1);
    let at = rng.gen_range(0..n);
    (0..n)
        .map(|i| {
            if i == at {
                key
            } else {
                fillers.choose(rng).expect("filler pool is not empty")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Index of the context utterance the answer must echo.
fn target_turn(context: &[Turn], task: SynthTask) -> Option<usize> {
    let last = context.last()?;
    match task {
        SynthTask::LastUtteranceEcho => Some(context.len() - 1),
        SynthTask::SpeakerEcho => context.iter().rposition(|t| t.speaker != last.speaker),
    }
}

/// Candidates sharing a token with the utterance the task points at.
pub fn oracle_matches(record: &Record, task: SynthTask) -> Vec<usize> {
    let Some(t) = target_turn(&record.context, task) else {
        return Vec::new();
    };
    let words: Vec<&str> = record.context[t].text.split_whitespace().collect();
    record
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.split_whitespace().any(|w| words.contains(&w)))
        .map(|(i, _)| i)
        .collect()
}

fn dialogue(rng: &mut impl Rng, cfg: &SynthConfig, pools: &Pools) -> Result<Record> {
    let turns = rng.gen_range(cfg.turns.0..=cfg.turns.1);
    let first = rng.gen_range(0..2);
    let mut keys: Vec<&String> = pools.keys.iter().collect();
    keys.shuffle(rng);
    let (used, unused) = keys.split_at(turns);
    let context: Vec<Turn> = (0..turns)
        .map(|i| Turn {
            speaker: SPEAKERS[(first + i) % 2].to_string(),
            text: utterance(rng, used[i], &pools.context, cfg.utterance_len),
        })
        .collect();
    let answer = match cfg.task {
        SynthTask::SpeakerEcho => turns - 2,
        SynthTask::LastUtteranceEcho => turns - 1,
    };
    let mut echoed: Vec<usize> = match cfg.task {
        // the final speaker's turns
        SynthTask::SpeakerEcho => (0..turns).rev().step_by(2).collect(),
        SynthTask::LastUtteranceEcho => (0..turns - 1).collect(),
    };
    echoed.shuffle(rng);
    let n_distract = cfg.n_candidates - 1;
    let mut distractors: Vec<&String> = echoed.iter().take(n_distract).map(|&i| used[i]).collect();
    let missing = n_distract - distractors.len();
    distractors.extend(unused.iter().take(missing));
    let mut candidates: Vec<(String, u8)> = distractors
        .into_iter()
        .map(|k| (utterance(rng, k, &pools.candidate, cfg.utterance_len), 0))
        .collect();
    candidates.push((
        utterance(rng, used[answer], &pools.candidate, cfg.utterance_len),
        1,
    ));
    candidates.shuffle(rng);
    let (candidates, labels) = candidates.into_iter().unzip();
    let record = Record {
        context,
        candidates,
        labels,
    };
    let positive = record.labels.iter().position(|&y| y == 1);
    if oracle_matches(&record, cfg.task) != positive.into_iter().collect::<Vec<_>>() {
        return Err(Error::Dataset(format!(
            "generated dialogue violates the task rule: {record:?}"
        )));
    }
    Ok(record)
}

/// Generates the three splits. Dialogue ids run through train, valid and
/// test in that order.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let pools = Pools::new(cfg);
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let (n_train, n_valid, _) = cfg.split_sizes();
    let mut all = (0..cfg.n_dialogues)
        .map(|_| dialogue(&mut rng, cfg, &pools))
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(n_train + n_valid);
    let valid = all.split_off(n_train);
    Ok(SynthData {
        vocab: pools.vocab()?,
        train: all,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_jsonl;
    use crate::model::TaskMode;

    fn cfg(task: SynthTask, n: usize) -> SynthConfig {
        SynthConfig {
            task,
            n_dialogues: n,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn speaker_rule_oracle_is_perfect() {
        let data = generate(&cfg(SynthTask::SpeakerEcho, 1000)).unwrap();
        let all: Vec<&Record> = data
            .train
            .iter()
            .chain(&data.valid)
            .chain(&data.test)
            .collect();
        assert_eq!(all.len(), 1000);
        let correct = all
            .iter()
            .filter(|r| {
                let m = oracle_matches(r, SynthTask::SpeakerEcho);
                m.len() == 1 && r.labels[m[0]] == 1
            })
            .count();
        assert_eq!(correct as f64 / all.len() as f64, 1.0);
    }

    #[test]
    fn structure_invariants() {
        for task in [SynthTask::SpeakerEcho, SynthTask::LastUtteranceEcho] {
            let data = generate(&cfg(task, 300)).unwrap();
            for r in data.train.iter().chain(&data.test) {
                assert!(r.context.len() >= 2);
                for w in r.context.windows(2) {
                    assert_ne!(w[0].speaker, w[1].speaker);
                }
                assert_eq!(r.labels.iter().filter(|&&y| y == 1).count(), 1);
                let key = |s: &str| {
                    s.split_whitespace()
                        .find(|w| w.starts_with("key"))
                        .unwrap()
                        .to_string()
                };
                let keys: Vec<String> = r.candidates.iter().map(|c| key(c)).collect();
                let pos = r.labels.iter().position(|&y| y == 1).unwrap();
                for (i, k) in keys.iter().enumerate() {
                    if i != pos {
                        assert_ne!(k, &keys[pos]);
                    }
                }
            }
        }
    }

    #[test]
    fn last_utterance_distractors_echo_earlier_turns() {
        let c = SynthConfig {
            turns: (4, 6),
            ..cfg(SynthTask::LastUtteranceEcho, 200)
        };
        let data = generate(&c).unwrap();
        for r in &data.train {
            let m = oracle_matches(r, SynthTask::LastUtteranceEcho);
            assert_eq!(m.len(), 1);
            assert_eq!(r.labels[m[0]], 1);
            let earlier: Vec<&str> = r.context[..r.context.len() - 1]
                .iter()
                .flat_map(|t| t.text.split_whitespace())
                .collect();
            let echoing = r
                .candidates
                .iter()
                .filter(|c| c.split_whitespace().any(|w| earlier.contains(&w)))
                .count();
            assert_eq!(echoing, 3);
        }
    }

    #[test]
    fn random_guessing_is_at_chance() {
        let data = generate(&cfg(SynthTask::SpeakerEcho, 2000)).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let all: Vec<&Record> = data.train.iter().chain(&data.test).collect();
        let hits = all
            .iter()
            .filter(|r| r.labels[rng.gen_range(0..r.candidates.len())] == 1)
            .count();
        let acc = hits as f64 / all.len() as f64;
        assert!((acc - 0.25).abs() < 0.03, "{acc}");
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let c = cfg(SynthTask::LastUtteranceEcho, 100);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate(&c).unwrap().write(a.path()).unwrap();
        generate(&c).unwrap().write(b.path()).unwrap();
        for f in ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap()
            );
        }
        let other = generate(&SynthConfig { seed: 12, ..c }).unwrap();
        assert_ne!(
            to_jsonl(&other.train),
            to_jsonl(
                &generate(&cfg(SynthTask::LastUtteranceEcho, 100))
                    .unwrap()
                    .train
            )
        );
    }

    #[test]
    fn splits_and_vocab_load() {
        let data = generate(&cfg(SynthTask::SpeakerEcho, 100)).unwrap();
        assert_eq!(
            (data.train.len(), data.valid.len(), data.test.len()),
            (80, 10, 10)
        );
        assert_eq!(data.vocab.len(), 200);
        let loaded = parse_jsonl(&to_jsonl(&data.test), &data.vocab, TaskMode::MultiChoice);
        assert!(loaded.rejected.is_empty());
        assert_eq!(loaded.dialogues.len(), 10);
        assert!(loaded
            .dialogues
            .iter()
            .flat_map(|d| d.context.iter().flat_map(|u| &u.tokens))
            .all(|&t| t != data.vocab.unk_id()));
    }

    #[test]
    fn inconsistent_ranges_are_rejected() {
        for c in [
            SynthConfig {
                turns: (1, 4),
                ..SynthConfig::default()
            },
            SynthConfig {
                turns: (5, 4),
                ..SynthConfig::default()
            },
            SynthConfig {
                utterance_len: (0, 2),
                ..SynthConfig::default()
            },
            SynthConfig {
                n_keys: 5,
                ..SynthConfig::default()
            },
            SynthConfig {
                vocab_size: 40,
                ..SynthConfig::default()
            },
            SynthConfig {
                valid_fraction: 0.6,
                test_fraction: 0.5,
                ..SynthConfig::default()
            },
        ] {
            assert!(matches!(generate(&c), Err(Error::Config(_))), "{c:?}");
        }
    }
}
