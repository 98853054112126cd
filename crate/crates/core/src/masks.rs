//! The four additive attention masks that decouple a dialogue into
//! utterance-aware and speaker-aware views.
//!
//! | mask | a real position `i` attends to `j` when |
//! | ---- | --------------------------------------- |
//! | `m1` | same utterance (`T_i == T_j`)           |
//! | `m2` | other utterance (`T_i != T_j`)          |
//! | `m3` | same speaker (`S_i == S_j`)             |
//! | `m4` | other speaker (`S_i != S_j`)            |
//!
//! Allowed cells hold `0`, blocked cells hold [`NEG_INF`]. Padded columns are
//! blocked everywhere and padded rows only see themselves. A real row with no
//! allowed cell (e.g. `m2` on a single-utterance sequence) falls back to
//! attending to itself and is recorded in `fallback_rows`.

use std::sync::Arc;

use serde::Serialize;

use crate::dialogue::TaggedSequence;

/// Finite stand-in for negative infinity; `exp` of it underflows to exactly 0.
pub const NEG_INF: f32 = -1.0e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum MaskKind {
    SameUtterance,
    OtherUtterance,
    SameSpeaker,
    OtherSpeaker,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::SameUtterance,
        MaskKind::OtherUtterance,
        MaskKind::SameSpeaker,
        MaskKind::OtherSpeaker,
    ];

    fn allows(self, seq: &TaggedSequence, i: usize, j: usize) -> bool {
        match self {
            MaskKind::SameUtterance => seq.utt_index[i] == seq.utt_index[j],
            MaskKind::OtherUtterance => seq.utt_index[i] != seq.utt_index[j],
            MaskKind::SameSpeaker => seq.speaker[i] == seq.speaker[j],
            MaskKind::OtherSpeaker => seq.speaker[i] != seq.speaker[j],
        }
    }
}

/// Square `l x l` additive mask, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    len: usize,
    data: Arc<[f32]>,
}

impl Mask {
    pub fn from_fn(len: usize, mut allowed: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(len * len);
        for i in 0..len {
            for j in 0..len {
                data.push(if allowed(i, j) { 0.0 } else { NEG_INF });
            }
        }
        Self {
            len,
            data: data.into(),
        }
    }

    /// All-zero mask: plain softmax attention.
    pub fn open(len: usize) -> Self {
        Self::from_fn(len, |_, _| true)
    }

    /// Full attention among real tokens, padded columns blocked.
    pub fn padding(seq: &TaggedSequence) -> Self {
        let pad = &seq.pad_mask;
        Self::from_fn(seq.len(), |i, j| if pad[i] { pad[j] } else { i == j })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.len + j]
    }

    pub fn is_open(&self, i: usize, j: usize) -> bool {
        self.get(i, j) == 0.0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn shared(&self) -> Arc<[f32]> {
        Arc::clone(&self.data)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    fn set(data: &mut [f32], len: usize, i: usize, j: usize, v: f32) {
        data[i * len + j] = v;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub m1: Mask,
    pub m2: Mask,
    pub m3: Mask,
    pub m4: Mask,
    /// Rows where the identity fallback applied, per mask, ascending.
    pub fallback_rows: [Vec<usize>; 4],
}

impl MaskSet {
    pub fn get(&self, kind: MaskKind) -> &Mask {
        match kind {
            MaskKind::SameUtterance => &self.m1,
            MaskKind::OtherUtterance => &self.m2,
            MaskKind::SameSpeaker => &self.m3,
            MaskKind::OtherSpeaker => &self.m4,
        }
    }

    pub fn fallback(&self, kind: MaskKind) -> &[usize] {
        &self.fallback_rows[kind as usize]
    }

    pub fn len(&self) -> usize {
        self.m1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m1.is_empty()
    }
}

fn build_one(seq: &TaggedSequence, kind: MaskKind) -> (Mask, Vec<usize>) {
    let len = seq.len();
    let pad = &seq.pad_mask;
    let mut data = vec![NEG_INF; len * len];
    let mut fallback = Vec::new();
    for i in 0..len {
        if !pad[i] {
            Mask::set(&mut data, len, i, i, 0.0);
            continue;
        }
        let mut any = false;
        for j in 0..len {
            if pad[j] && kind.allows(seq, i, j) {
                Mask::set(&mut data, len, i, j, 0.0);
                any = true;
            }
        }
        if !any {
            Mask::set(&mut data, len, i, i, 0.0);
            fallback.push(i);
        }
    }
    (
        Mask {
            len,
            data: data.into(),
        },
        fallback,
    )
}

/// Builds `m1..m4` from the utterance and speaker tags of `seq`.
pub fn build_masks(seq: &TaggedSequence) -> MaskSet {
    let (m1, f1) = build_one(seq, MaskKind::SameUtterance);
    let (m2, f2) = build_one(seq, MaskKind::OtherUtterance);
    let (m3, f3) = build_one(seq, MaskKind::SameSpeaker);
    let (m4, f4) = build_one(seq, MaskKind::OtherSpeaker);
    MaskSet {
        m1,
        m2,
        m3,
        m4,
        fallback_rows: [f1, f2, f3, f4],
    }
}

/// JSON view used by `inspect-masks`: cells are `0` or `"-inf"`.
#[derive(Debug, Serialize)]
pub struct MaskSetView {
    pub len: usize,
    pub masks: Vec<MaskView>,
}

#[derive(Debug, Serialize)]
pub struct MaskView {
    pub name: &'static str,
    pub kind: MaskKind,
    pub grid: Vec<Vec<serde_json::Value>>,
    pub fallback_rows: Vec<usize>,
}

impl MaskSet {
    pub fn to_view(&self) -> MaskSetView {
        let names = ["m1", "m2", "m3", "m4"];
        let masks = MaskKind::ALL
            .iter()
            .zip(names)
            .map(|(&kind, name)| {
                let m = self.get(kind);
                let grid = (0..m.len())
                    .map(|i| {
                        (0..m.len())
                            .map(|j| {
                                if m.is_open(i, j) {
                                    serde_json::Value::from(0)
                                } else {
                                    serde_json::Value::from("-inf")
                                }
                            })
                            .collect()
                    })
                    .collect();
                MaskView {
                    name,
                    kind,
                    grid,
                    fallback_rows: self.fallback(kind).to_vec(),
                }
            })
            .collect();
        MaskSetView {
            len: self.len(),
            masks,
        }
    }
}
