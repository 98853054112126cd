//! Helpers shared by the integration tests: random inputs and brute-force
//! oracles written without the library's own code paths.

#![allow(dead_code)]

use mdfn::dialogue::{SpeakerRole, TaggedSequence};
use mdfn::masks::{MaskKind, MaskSet, NEG_INF};
use mdfn::nn::{Graph, Tensor};
use mdfn::train::RankingInstance;
use rand::Rng;

/// Random tagged sequence of total length `len` (at most 64) with a
/// random number of real tokens split into contiguous utterances.
pub fn random_sequence(rng: &mut impl Rng, len: usize) -> TaggedSequence {
    let real = rng.gen_range(1..=len);
    let mut utt_index = Vec::with_capacity(len);
    let mut speaker = Vec::with_capacity(len);
    let mut current = 1;
    let mut role = if rng.gen_bool(0.5) {
        SpeakerRole::Sender
    } else {
        SpeakerRole::Receiver
    };
    for i in 0..real {
        if i > 0 && rng.gen_bool(0.3) {
            current += 1;
            // consecutive utterances usually switch speaker
            if rng.gen_bool(0.8) {
                role = role.other();
            }
        }
        utt_index.push(current);
        speaker.push(Some(role));
    }
    utt_index.resize(len, 0);
    speaker.resize(len, None);
    let mut pad_mask = vec![true; real];
    pad_mask.resize(len, false);
    let token_ids = (0..len)
        .map(|i| if i < real { rng.gen_range(4..50) } else { 0 })
        .collect();
    TaggedSequence {
        token_ids,
        utt_index,
        speaker,
        pad_mask,
    }
}

/// Ranking instance with small integer scores so ties are frequent.
pub fn random_instance(rng: &mut impl Rng, id: usize, n: usize) -> RankingInstance {
    RankingInstance {
        context_id: id,
        scores: (0..n).map(|_| f64::from(rng.gen_range(0u8..4))).collect(),
        labels: (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect(),
    }
}

/// 0-based position of every candidate, computed by counting the
/// candidates that beat it: a higher score, or an equal score at a lower
/// index.
pub fn brute_positions(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

/// Per-instance metric values of an instance with at least one positive.
pub struct BruteScores {
    /// Entry `k - 1` holds recall at `k`.
    pub recall: Vec<f64>,
    pub ap: f64,
    pub rr: f64,
    pub p1: f64,
}

pub fn brute_scores(inst: &RankingInstance) -> BruteScores {
    let n = inst.scores.len();
    let pos = brute_positions(&inst.scores);
    let mut by_position = vec![0usize; n];
    for (c, &p) in pos.iter().enumerate() {
        by_position[p] = c;
    }
    let mut hits = 0usize;
    let mut ap_sum = 0.0;
    let mut first = None;
    for (p, &c) in by_position.iter().enumerate() {
        if inst.labels[c] == 1 {
            hits += 1;
            ap_sum += hits as f64 / (p + 1) as f64;
            first.get_or_insert(p + 1);
        }
    }
    let first = first.expect("instance has a positive");
    BruteScores {
        recall: (1..=n).map(|k| f64::from(u8::from(first <= k))).collect(),
        ap: ap_sum / hits as f64,
        rr: 1.0 / first as f64,
        p1: f64::from(inst.labels[by_position[0]]),
    }
}

/// Plain single-head-at-a-time attention over `x` (rows), restricted to
/// keys `allowed[i]` for query `i`. Weights are `d x d` row-major.
pub fn restricted_attention(
    x: &[Vec<f64>],
    allowed: &[Vec<usize>],
    w: [&[f64]; 4],
    heads: usize,
) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let dk = d / heads;
    let proj = |w: &[f64], row: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|j| (0..d).map(|i| row[i] * w[i * d + j]).sum())
            .collect()
    };
    let q: Vec<Vec<f64>> = x.iter().map(|r| proj(w[0], r)).collect();
    let k: Vec<Vec<f64>> = x.iter().map(|r| proj(w[1], r)).collect();
    let v: Vec<Vec<f64>> = x.iter().map(|r| proj(w[2], r)).collect();
    let mut cat = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for (i, keys) in allowed.iter().enumerate() {
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = keys.iter().zip(&e).map(|(&j, ej)| ej / z * v[j][c]).sum();
            }
        }
    }
    cat.iter().map(|r| proj(w[3], r)).collect()
}

/// `max |a - b| / max |b|` over all entries.
pub fn max_rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let diff = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().flatten().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(f64::MIN_POSITIVE)
}

/// Checks the four masks of `seq` cell by cell against the utterance and
/// speaker predicates. Returns the first violation.
pub fn check_masks(seq: &TaggedSequence, masks: &MaskSet) -> Result<(), String> {
    let l = seq.len();
    let real = &seq.pad_mask;
    let same_utt = |i: usize, j: usize| seq.utt_index[i] == seq.utt_index[j];
    let same_spk = |i: usize, j: usize| seq.speaker[i] == seq.speaker[j];
    let preds: [(MaskKind, &dyn Fn(usize, usize) -> bool); 4] = [
        (MaskKind::SameUtterance, &|i, j| same_utt(i, j)),
        (MaskKind::OtherUtterance, &|i, j| !same_utt(i, j)),
        (MaskKind::SameSpeaker, &|i, j| same_spk(i, j)),
        (MaskKind::OtherSpeaker, &|i, j| !same_spk(i, j)),
    ];
    for (kind, pred) in preds {
        let m = masks.get(kind);
        if m.len() != l {
            return Err(format!("{kind:?}: size {} for length {l}", m.len()));
        }
        for i in 0..l {
            let expected_fallback = real[i] && !(0..l).any(|j| real[j] && pred(i, j));
            if expected_fallback != masks.fallback(kind).contains(&i) {
                return Err(format!("{kind:?}: fallback status of row {i}"));
            }
            for j in 0..l {
                let v = m.get(i, j);
                if v.is_nan() || (v != 0.0 && v != NEG_INF) {
                    return Err(format!("{kind:?}[{i},{j}] = {v}"));
                }
                let open = v == 0.0;
                let want = if !real[i] || expected_fallback {
                    i == j
                } else {
                    real[j] && pred(i, j)
                };
                if open != want {
                    return Err(format!("{kind:?}[{i},{j}] open = {open}"));
                }
                if real[i] && real[j] && open != (m.get(j, i) == 0.0) {
                    return Err(format!("{kind:?} not symmetric at ({i},{j})"));
                }
            }
        }
    }
    for i in (0..l).filter(|&i| real[i]) {
        for (a, b) in [
            (MaskKind::SameUtterance, MaskKind::OtherUtterance),
            (MaskKind::SameSpeaker, MaskKind::OtherSpeaker),
        ] {
            if masks.fallback(a).contains(&i) || masks.fallback(b).contains(&i) {
                continue;
            }
            for j in (0..l).filter(|&j| real[j]) {
                if masks.get(a).is_open(i, j) == masks.get(b).is_open(i, j) {
                    return Err(format!("{a:?}/{b:?} not a partition at ({i},{j})"));
                }
            }
        }
    }
    Ok(())
}

/// Applies every mask to random scores through the library softmax and
/// checks that real rows put exactly zero weight on padded columns and
/// that no weight is NaN.
pub fn check_padding_opacity(
    rng: &mut impl Rng,
    seq: &TaggedSequence,
    masks: &MaskSet,
) -> Result<(), String> {
    let l = seq.len();
    for kind in MaskKind::ALL {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(l, l, |_, _| rng.gen_range(-30.0..30.0)));
        let p = g
            .masked_softmax(x, masks.get(kind).as_slice())
            .map_err(|e| e.to_string())?;
        let w = g.value(p);
        if w.data().iter().any(|v| v.is_nan()) {
            return Err(format!("{kind:?}: NaN weight"));
        }
        for i in (0..l).filter(|&i| seq.pad_mask[i]) {
            let row = w.row_slice(i);
            if let Some(j) = (0..l).find(|&j| !seq.pad_mask[j] && row[j] != 0.0) {
                return Err(format!("{kind:?}: row {i} weights padded column {j}"));
            }
            let total: f32 = row.iter().sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(format!("{kind:?}: row {i} sums to {total}"));
            }
        }
    }
    Ok(())
}
