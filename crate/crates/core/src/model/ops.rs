//! The head's building blocks as free functions over bound parameters.

use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskSet};
use crate::model::Aggregator;
use crate::nn::layers::{self, Conv1d, GruCell, Linear, Mhsa};
use crate::nn::{Graph, Scalar, Tensor, Var};

/// `C_1..C_4`; entries are `None` for disabled channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelOutputs {
    pub c: [Option<Var>; 4],
}

impl ChannelOutputs {
    pub fn get(&self, kind: MaskKind) -> Option<Var> {
        self.c[kind as usize]
    }
}

/// `C_i = MHSA(E, M_i)` for every block in `attn` that is present.
pub fn decouple<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Var,
    masks: &MaskSet,
    attn: &[Option<Mhsa>; 4],
) -> Result<ChannelOutputs> {
    let mut c = [None; 4];
    for kind in MaskKind::ALL {
        if let Some(p) = &attn[kind as usize] {
            c[kind as usize] = Some(layers::mhsa(g, e, masks.get(kind), p)?);
        }
    }
    Ok(ChannelOutputs { c })
}

/// Gate layers: `fc1` and `fc2` read one view each, `fc3` maps the pair
/// to the ratio `P`.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

fn heuristics<T: Scalar>(g: &mut Graph<'_, T>, e: Option<Var>, view: Var) -> Result<Var> {
    match e {
        Some(e) => {
            let diff = g.sub(e, view)?;
            let prod = g.mul(e, view)?;
            g.concat_cols(&[e, view, diff, prod])
        }
        None => Ok(view),
    }
}

/// ```text
/// E1 = ReLU(FC([E, Ebar, E - Ebar, E * Ebar]))
/// E2 = ReLU(FC([E, Ehat, E - Ehat, E * Ehat]))
/// P  = Sigmoid(FC([E1, E2]))
/// ```
///
/// Without `e` the feature vectors reduce to `Ebar` and `Ehat`.
pub fn gate<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Option<Var>,
    ebar: Var,
    ehat: Var,
    p: &GateParams,
) -> Result<Var> {
    let f1 = heuristics(g, e, ebar)?;
    let f1 = p.fc1.forward(g, f1)?;
    let e1 = g.relu(f1);
    let f2 = heuristics(g, e, ehat)?;
    let f2 = p.fc2.forward(g, f2)?;
    let e2 = g.relu(f2);
    let cat = g.concat_cols(&[e1, e2])?;
    let s = p.fc3.forward(g, cat)?;
    Ok(g.sigmoid(s))
}

#[derive(Debug, Clone, Copy)]
pub enum Fusion {
    Gate(GateParams),
    /// `FC([C_a, C_b])` without a ratio.
    Direct(Linear),
}

/// Fuses one channel's two views. Returns the fused matrix and the gate
/// ratio when a gate is used.
pub fn fuse_pair<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Option<Var>,
    a: Var,
    b: Var,
    fusion: &Fusion,
) -> Result<(Var, Option<Var>)> {
    match fusion {
        Fusion::Gate(p) => {
            let ratio = gate(g, e, a, b, p)?;
            Ok((convex(g, ratio, a, b)?, Some(ratio)))
        }
        Fusion::Direct(fc) => {
            let cat = g.concat_cols(&[a, b])?;
            Ok((fc.forward(g, cat)?, None))
        }
    }
}

/// `P * A + (1 - P) * B`.
pub fn convex<T: Scalar>(g: &mut Graph<'_, T>, p: Var, a: Var, b: Var) -> Result<Var> {
    let pa = g.mul(p, a)?;
    let q = g.one_minus(p);
    let qb = g.mul(q, b)?;
    g.add(pa, qb)
}

/// Fused channels `(C_u, C_s)` with the gate ratios `(P_1, P_2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Fused {
    pub cu: Option<Var>,
    pub cs: Option<Var>,
    pub p1: Option<Var>,
    pub p2: Option<Var>,
}

pub fn fuse_channels<T: Scalar>(
    g: &mut Graph<'_, T>,
    e: Option<Var>,
    c: &ChannelOutputs,
    utterance: Option<&Fusion>,
    speaker: Option<&Fusion>,
) -> Result<Fused> {
    let mut out = Fused::default();
    if let (Some(f), Some(c1), Some(c2)) = (utterance, c.c[0], c.c[1]) {
        let (cu, p1) = fuse_pair(g, e, c1, c2, f)?;
        out.cu = Some(cu);
        out.p1 = p1;
    }
    if let (Some(f), Some(c3), Some(c4)) = (speaker, c.c[2], c.c[3]) {
        let (cs, p2) = fuse_pair(g, e, c3, c4, f)?;
        out.cs = Some(cs);
        out.p2 = p2;
    }
    Ok(out)
}

/// One row per utterance: pooled rows of `c` at each position set. CNN
/// aggregators convolve each utterance span on its own, max-pool each
/// filter's output and concatenate filters.
pub fn aggregate<T: Scalar>(
    g: &mut Graph<'_, T>,
    c: Var,
    utterances: &[Vec<usize>],
    aggregator: Aggregator,
    convs: &[Conv1d],
) -> Result<Var> {
    if utterances.is_empty() {
        return Err(Error::shape("aggregate", "no utterances"));
    }
    if convs.len() != aggregator.widths().len() {
        return Err(Error::shape(
            "aggregate",
            format!("{} filters for {aggregator:?}", convs.len()),
        ));
    }
    let mut rows = Vec::with_capacity(utterances.len());
    for (i, pos) in utterances.iter().enumerate() {
        if pos.is_empty() {
            return Err(Error::shape(
                "aggregate",
                format!("utterance {} is empty", i + 1),
            ));
        }
        let row = match aggregator {
            Aggregator::MaxPool => g.max_pool_rows(c, pos)?,
            Aggregator::MeanPool => g.mean_pool_rows(c, pos)?,
            Aggregator::Cnn3 | Aggregator::CnnMulti => {
                let span = g.gather_rows(c, pos)?;
                let all: Vec<usize> = (0..pos.len()).collect();
                let mut pooled = Vec::with_capacity(convs.len());
                for conv in convs {
                    let h = layers::conv1d_same(g, span, conv)?;
                    pooled.push(g.max_pool_rows(h, &all)?);
                }
                if pooled.len() == 1 {
                    pooled[0]
                } else {
                    g.concat_cols(&pooled)?
                }
            }
        };
        rows.push(row);
    }
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        g.concat_rows(&rows)
    }
}

/// Forward and backward cells of each stacked layer.
#[derive(Debug, Clone)]
pub struct BiGruParams {
    pub layers: Vec<(GruCell, GruCell)>,
}

/// Runs one GRU direction over the rows of `xs`; returns hidden states in
/// sequence order. Input projections for all steps are computed up front.
pub fn gru_sequence<T: Scalar>(
    g: &mut Graph<'_, T>,
    xs: Var,
    p: &GruCell,
    reverse: bool,
) -> Result<Vec<Var>> {
    let n = g.value(xs).rows();
    let hidden = p.hidden(g);
    let xz = layers::linear(g, xs, p.w_z, p.b_z)?;
    let xr = layers::linear(g, xs, p.w_r, p.b_r)?;
    let xh = layers::linear(g, xs, p.w_h, p.b_h)?;
    let mut h = g.constant(Tensor::zeros([1, hidden]));
    let mut states = vec![h; n];
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for j in order {
        let step = |g: &mut Graph<'_, T>, proj: Var, u: Var, state: Var| -> Result<Var> {
            let x = g.row(proj, j)?;
            let hu = g.matmul(state, u)?;
            g.add(x, hu)
        };
        let z = step(g, xz, p.u_z, h)?;
        let z = g.sigmoid(z);
        let r = step(g, xr, p.u_r, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = step(g, xh, p.u_h, rh)?;
        let cand = g.tanh(cand);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h)?;
        let new = g.mul(z, cand)?;
        h = g.add(old, new)?;
        states[j] = h;
    }
    Ok(states)
}

/// BiGRU over utterance rows `l`. Returns `[fwd state at the last row;
/// bwd state at the first row]` of the top layer, `1 x 2d`.
pub fn integrate<T: Scalar>(g: &mut Graph<'_, T>, l: Var, p: &BiGruParams) -> Result<Var> {
    if p.layers.is_empty() {
        return Err(Error::shape("integrate", "no BiGRU layers"));
    }
    let mut input = l;
    let mut last = None;
    for (i, (fwd, bwd)) in p.layers.iter().enumerate() {
        let hf = gru_sequence(g, input, fwd, false)?;
        let hb = gru_sequence(g, input, bwd, true)?;
        let n = hf.len();
        last = Some(g.concat_cols(&[hf[n - 1], hb[0]])?);
        if i + 1 < p.layers.len() {
            let f = g.concat_rows(&hf)?;
            let b = g.concat_rows(&hb)?;
            input = g.concat_cols(&[f, b])?;
        }
    }
    Ok(last.expect("at least one layer"))
}

/// `tanh(W [v1; v2] + b)`.
pub fn fuse_dialogue<T: Scalar>(g: &mut Graph<'_, T>, v1: Var, v2: Var, p: &Linear) -> Result<Var> {
    let cat = g.concat_cols(&[v1, v2])?;
    let h = p.forward(g, cat)?;
    Ok(g.tanh(h))
}

/// Classifier logits for one dialogue vector.
pub fn score<T: Scalar>(g: &mut Graph<'_, T>, v: Var, p: &Linear) -> Result<Var> {
    p.forward(g, v)
}

/// Row softmax of plain numbers.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}
