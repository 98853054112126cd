//! Layers composed from graph primitives. Each layer's parameters live in a
//! [`ParamRegistry`] under a name prefix: `declare` creates them, `bind`
//! fetches them onto a graph.

use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::nn::{Graph, Initializer, ParamRegistry, Scalar, Var};

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// `x * w + b`, `w` is `in x out`.
pub fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    pub fn declare<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<()> {
        reg.insert(join(prefix, "w"), init.glorot(fan_in, fan_out))?;
        reg.insert(join(prefix, "b"), init.zeros(fan_out))
    }

    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: g.param(&join(prefix, "w"))?,
            b: g.param(&join(prefix, "b"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        linear(g, x, self.w, self.b)
    }
}

/// Multi-head self-attention projections. Head `i` uses columns
/// `i*d_k..(i+1)*d_k` of `w_q`, `w_k` and `w_v`; `d_k = d / heads`.
#[derive(Debug, Clone, Copy)]
pub struct Mhsa {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub heads: usize,
}

impl Mhsa {
    pub fn declare<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        heads: usize,
    ) -> Result<()> {
        check_heads(d, heads)?;
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            reg.insert(join(prefix, name), init.glorot(d, d))?;
        }
        Ok(())
    }

    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            w_q: g.param(&join(prefix, "w_q"))?,
            w_k: g.param(&join(prefix, "w_k"))?,
            w_v: g.param(&join(prefix, "w_v"))?,
            w_o: g.param(&join(prefix, "w_o"))?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &Mask) -> Result<Var> {
        mhsa(g, x, mask, self)
    }
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "hidden size {d} not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// `Concat(head_1..head_h) W_O` with
/// `head_i = softmax(Q_i K_i^T / sqrt(d_k) + M) V_i`.
pub fn mhsa<T: Scalar>(g: &mut Graph<'_, T>, x: Var, mask: &Mask, p: &Mhsa) -> Result<Var> {
    attention(g, x, Some(mask), p)
}

/// [`mhsa`] without any mask.
pub fn mhsa_unmasked<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &Mhsa) -> Result<Var> {
    attention(g, x, None, p)
}

fn attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: Option<&Mask>,
    p: &Mhsa,
) -> Result<Var> {
    let d = g.value(x).cols();
    check_heads(d, p.heads)?;
    let l = g.value(x).rows();
    if let Some(mask) = mask {
        if mask.len() != l {
            return Err(Error::shape(
                "mhsa",
                format!("mask {0}x{0} for {l} positions", mask.len()),
            ));
        }
    }
    let dk = d / p.heads;
    let q = g.matmul(x, p.w_q)?;
    let k = g.matmul(x, p.w_k)?;
    let v = g.matmul(x, p.w_v)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk)?,
                g.slice_cols(k, h * dk, dk)?,
                g.slice_cols(v, h * dk, dk)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.affine(scores, scale, 0.0);
        let attn = match mask {
            Some(m) => g.masked_softmax(scores, m.as_slice())?,
            None => g.softmax_rows(scores)?,
        };
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.matmul(cat, p.w_o)
}

/// GRU cell parameters. `w_*` map the input, `u_*` the previous state.
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruCell {
    pub fn declare<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<()> {
        for gate in ["z", "r", "h"] {
            reg.insert(
                join(prefix, &format!("w_{gate}")),
                init.glorot(input, hidden),
            )?;
            reg.insert(
                join(prefix, &format!("u_{gate}")),
                init.glorot(hidden, hidden),
            )?;
            reg.insert(join(prefix, &format!("b_{gate}")), init.zeros(hidden))?;
        }
        Ok(())
    }

    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(&join(prefix, n));
        Ok(Self {
            w_z: p("w_z")?,
            w_r: p("w_r")?,
            w_h: p("w_h")?,
            u_z: p("u_z")?,
            u_r: p("u_r")?,
            u_h: p("u_h")?,
            b_z: p("b_z")?,
            b_r: p("b_r")?,
            b_h: p("b_h")?,
        })
    }

    pub fn hidden<T: Scalar>(&self, g: &Graph<'_, T>) -> usize {
        g.value(self.u_z).cols()
    }
}

/// One GRU step on row vectors:
///
/// ```text
/// z  = sigmoid(x W_z + h U_z + b_z)
/// r  = sigmoid(x W_r + h U_r + b_r)
/// h~ = tanh(x W_h + (r * h) U_h + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_cell<T: Scalar>(g: &mut Graph<'_, T>, h_prev: Var, x: Var, p: &GruCell) -> Result<Var> {
    let gate = |g: &mut Graph<'_, T>, w, u, b, h| -> Result<Var> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_bias(s, b)
    };
    let z = gate(g, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = g.sigmoid(z);
    let r = gate(g, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev)?;
    let cand = gate(g, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = g.tanh(cand);
    let keep = g.one_minus(z);
    let old = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(old, new)
}

/// Same-padded 1-D convolution over rows: `w` is `(width * c_in) x c_out`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: Var,
    pub b: Var,
    pub width: usize,
}

impl Conv1d {
    pub fn declare<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
        prefix: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<()> {
        reg.insert(join(prefix, "w"), init.glorot(width * c_in, c_out))?;
        reg.insert(join(prefix, "b"), init.zeros(c_out))
    }

    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self {
            w: g.param(&join(prefix, "w"))?,
            b: g.param(&join(prefix, "b"))?,
            width,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        conv1d_same(g, x, self)
    }
}

pub fn conv1d_same<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: &Conv1d) -> Result<Var> {
    let cols = g.im2col_same(x, p.width)?;
    linear(g, cols, p.w, p.b)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn declare<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        init: &mut Initializer,
        prefix: &str,
        d: usize,
    ) -> Result<()> {
        reg.insert(join(prefix, "gamma"), init.ones(d))?;
        reg.insert(join(prefix, "beta"), init.zeros(d))
    }

    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: g.param(&join(prefix, "gamma"))?,
            beta: g.param(&join(prefix, "beta"))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, Self::EPS)
    }
}
