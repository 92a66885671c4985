//! Non-local operations, dot-product attention and gate-routed co-attention.
//!
//! The generic non-local operation computes
//! `y_i = (1 / C(q_i, K)) * sum_j f(q_i, k_j) g(v_j)`; scaled dot-product
//! attention is the instance `f = exp(<q W^Q, k W^K>)`, `g(v) = v W^V`,
//! `C = sum_j f`. Co-attention runs two such operations ("left" and "right"
//! branches) whose V, K and Q gates may each read from either of two input
//! channels, as described by a [`GateRouting`] per branch.
//!
//! The model code works on the tape ([`multi_head_attention`],
//! [`coattention_on_graph`]); the tensor-level functions wrap the same code
//! for direct use and testing.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{AttentionLayout, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Left,
    Right,
}

/// Which input channel feeds each gate of one attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GateRouting {
    pub v_source: Channel,
    pub k_source: Channel,
    pub q_source: Channel,
}

impl GateRouting {
    pub const fn all(c: Channel) -> Self {
        Self {
            v_source: c,
            k_source: c,
            q_source: c,
        }
    }
}

/// The encoder wiring: each branch keeps its own V and K and takes its
/// query from the opposite channel. Returns `(alpha, beta)` for the left
/// and right branch.
pub const fn crossed_routing() -> (GateRouting, GateRouting) {
    (
        GateRouting {
            v_source: Channel::Left,
            k_source: Channel::Left,
            q_source: Channel::Right,
        },
        GateRouting {
            v_source: Channel::Right,
            k_source: Channel::Right,
            q_source: Channel::Left,
        },
    )
}

/// Routing under which co-attention reduces to two self-attentions.
pub const fn self_routing() -> (GateRouting, GateRouting) {
    (GateRouting::all(Channel::Left), GateRouting::all(Channel::Right))
}

/// Boolean `n_q x n_k` matrix of disallowed query/key pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_k: usize,
    disallowed: Vec<bool>,
}

impl AttentionMask {
    pub fn none(n_q: usize, n_k: usize) -> Self {
        Self {
            n_q,
            n_k,
            disallowed: vec![false; n_q * n_k],
        }
    }

    /// Disallows every key position flagged in `key_is_pad`.
    pub fn key_padding(n_q: usize, key_is_pad: &[bool]) -> Self {
        let n_k = key_is_pad.len();
        let mut m = Self::none(n_q, n_k);
        for i in 0..n_q {
            for (j, &pad) in key_is_pad.iter().enumerate() {
                m.disallowed[i * n_k + j] = pad;
            }
        }
        m
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_k(&self) -> usize {
        self.n_k
    }

    pub fn disallow(&mut self, i: usize, j: usize) {
        self.disallowed[i * self.n_k + j] = true;
    }

    pub fn is_disallowed(&self, i: usize, j: usize) -> bool {
        self.disallowed[i * self.n_k + j]
    }

    pub fn count_disallowed(&self) -> usize {
        self.disallowed.iter().filter(|&&d| d).count()
    }

    /// Union of the disallowed sets.
    pub fn union(&self, other: &AttentionMask) -> Result<AttentionMask> {
        if (self.n_q, self.n_k) != (other.n_q, other.n_k) {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.n_q, self.n_k, other.n_q, other.n_k
            )));
        }
        Ok(AttentionMask {
            n_q: self.n_q,
            n_k: self.n_k,
            disallowed: self
                .disallowed
                .iter()
                .zip(&other.disallowed)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    /// Rejects masks with a row that allows nothing.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n_q {
            if (0..self.n_k).all(|j| self.is_disallowed(i, j)) {
                return Err(Error::Mask { row: i });
            }
        }
        Ok(())
    }
}

/// Strictly-upper-triangular mask: position `i` may not see `j > i`.
pub fn causal_mask(n: usize) -> AttentionMask {
    let mut m = AttentionMask::none(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.disallow(i, j);
        }
    }
    m
}

/// Projection matrices of one attention head.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionHeadParams {
    fn check(&self, d: usize) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.rows() != d {
                return Err(Error::shape(format!(
                    "{name} {:?} does not accept inputs of width {d}",
                    w.shape()
                )));
            }
        }
        if self.w_q.cols() != self.w_k.cols() {
            return Err(Error::shape(format!(
                "w_q {:?} and w_k {:?} project to different widths",
                self.w_q.shape(),
                self.w_k.shape()
            )));
        }
        Ok(())
    }
}

/// All heads of one multi-head attention plus the output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadParams {
    pub heads: Vec<AttentionHeadParams>,
    pub w_o: Tensor,
}

/// Tape handles for one multi-head attention. Head projections are stored
/// side by side: head `h` owns columns `h*d_k..(h+1)*d_k` of `w_q`.
#[derive(Debug, Clone, Copy)]
pub struct MhaVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_q: Option<Var>,
    pub b_k: Option<Var>,
    pub b_v: Option<Var>,
    pub b_o: Option<Var>,
}

impl MhaVars {
    /// Places the tensors of `p` on the tape as leaves.
    pub fn leaves(g: &mut Graph, p: &MultiHeadParams) -> Result<Self> {
        let cat = |f: fn(&AttentionHeadParams) -> &Tensor| -> Result<Tensor> {
            let mut it = p.heads.iter();
            let first = it
                .next()
                .ok_or_else(|| Error::shape("multi-head attention needs at least one head"))?;
            it.try_fold(f(first).clone(), |acc, h| Tensor::concat_cols(&acc, f(h)))
        };
        let (wq, wk, wv) = (cat(|h| &h.w_q)?, cat(|h| &h.w_k)?, cat(|h| &h.w_v)?);
        Ok(Self {
            w_q: g.leaf(wq),
            w_k: g.leaf(wk),
            w_v: g.leaf(wv),
            w_o: g.leaf(p.w_o.clone()),
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        })
    }
}

fn project(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Batched multi-head attention on the tape. `q_in` holds `batch * q_len`
/// stacked rows, `k_in`/`v_in` hold `batch * k_len`. `masks` is empty, a
/// single shared mask, or one mask per batch item.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &MhaVars,
    heads: usize,
    (batch, q_len, k_len): (usize, usize, usize),
    masks: Rc<Vec<AttentionMask>>,
    scale: bool,
) -> Result<Var> {
    let q = project(g, q_in, w.w_q, w.b_q)?;
    let k = project(g, k_in, w.w_k, w.b_k)?;
    let v = project(g, v_in, w.w_v, w.b_v)?;
    let width = g.value(q).cols();
    if heads == 0 || !width.is_multiple_of(heads) || !g.value(v).cols().is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{heads} heads do not evenly divide projection widths {width} / {}",
            g.value(v).cols()
        )));
    }
    let d_k = width / heads;
    let layout = AttentionLayout {
        batch,
        q_len,
        k_len,
        heads,
        scale: if scale { 1.0 / (d_k as f64).sqrt() } else { 1.0 },
        masks,
    };
    let att = g.attention(q, k, v, layout)?;
    if g.value(att).cols() != g.value(w.w_o).rows() {
        return Err(Error::shape(format!(
            "concatenated heads width {} vs output projection {:?}",
            g.value(att).cols(),
            g.value(w.w_o).shape()
        )));
    }
    project(g, att, w.w_o, w.b_o)
}

/// One side of a co-attention call: the stacked rows of a channel and its
/// per-item length.
#[derive(Debug, Clone, Copy)]
pub struct ChannelInput {
    pub x: Var,
    pub len: usize,
}

/// Masks for the two branches; each is interpreted as in
/// [`multi_head_attention`] against that branch's (Q source, K source).
#[derive(Debug, Clone, Default)]
pub struct CoattentionMasks {
    pub left: Rc<Vec<AttentionMask>>,
    pub right: Rc<Vec<AttentionMask>>,
}

/// Gate-routed co-attention on the tape. Each branch draws V, K and Q from
/// the channel its routing names and uses its own parameters.
#[allow(clippy::too_many_arguments)]
pub fn coattention_on_graph(
    g: &mut Graph,
    left: ChannelInput,
    right: ChannelInput,
    batch: usize,
    alpha: GateRouting,
    beta: GateRouting,
    left_params: &MhaVars,
    right_params: &MhaVars,
    heads: usize,
    masks: &CoattentionMasks,
) -> Result<(Var, Var)> {
    let pick = |c: Channel| match c {
        Channel::Left => left,
        Channel::Right => right,
    };
    let branch = |g: &mut Graph, r: GateRouting, w: &MhaVars, m: &Rc<Vec<AttentionMask>>| {
        let (q, k, v) = (pick(r.q_source), pick(r.k_source), pick(r.v_source));
        if k.len != v.len {
            return Err(Error::shape(format!(
                "key source length {} differs from value source length {}",
                k.len, v.len
            )));
        }
        multi_head_attention(g, q.x, k.x, v.x, w, heads, (batch, q.len, k.len), m.clone(), true)
    };
    let y_left = branch(g, alpha, left_params, &masks.left)?;
    let y_right = branch(g, beta, right_params, &masks.right)?;
    Ok((y_left, y_right))
}

/// Direct double-loop evaluation of the generic non-local operation
/// `y_i = (1 / norm(q_i, K)) * sum_j pair(q_i, k_j) * unary(v_j)`.
pub fn nonlocal_op<F, G, C>(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    pair: F,
    unary: G,
    norm: C,
) -> Result<Tensor>
where
    F: Fn(&[f64], &[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
    C: Fn(&[f64], &Tensor) -> f64,
{
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "K has {} rows but V has {}",
            k.rows(),
            v.rows()
        )));
    }
    let transformed: Vec<Vec<f64>> = (0..v.rows()).map(|j| unary(v.row(j))).collect();
    let width = transformed.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(q.rows() * width);
    for i in 0..q.rows() {
        let qi = q.row(i);
        let c = norm(qi, k);
        if c == 0.0 {
            return Err(Error::Division { row: i });
        }
        let mut acc = vec![0.0; width];
        for (j, gv) in transformed.iter().enumerate() {
            let w = pair(qi, k.row(j));
            for (a, x) in acc.iter_mut().zip(gv) {
                *a += w * x;
            }
        }
        out.extend(acc.into_iter().map(|a| a / c));
    }
    Tensor::new(vec![q.rows(), width], out)
}

/// Single-head attention `softmax(s * (Q W^Q)(K W^K)ᵀ) V W^V` with
/// `s = 1/sqrt(d_k)` when `scale` is set and 1 otherwise.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &AttentionHeadParams,
    mask: Option<&AttentionMask>,
    scale: bool,
) -> Result<Tensor> {
    params.check(q.cols())?;
    params.check(k.cols())?;
    params.check(v.cols())?;
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "K has {} rows but V has {}",
            k.rows(),
            v.rows()
        )));
    }
    if let Some(m) = mask {
        if (m.n_q(), m.n_k()) != (q.rows(), k.rows()) {
            return Err(Error::shape(format!(
                "mask {}x{} for {} queries and {} keys",
                m.n_q(),
                m.n_k(),
                q.rows(),
                k.rows()
            )));
        }
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let (wq, wk, wv) = (
        g.constant(params.w_q.clone()),
        g.constant(params.w_k.clone()),
        g.constant(params.w_v.clone()),
    );
    let qp = g.matmul(qv, wq)?;
    let kp = g.matmul(kv, wk)?;
    let vp = g.matmul(vv, wv)?;
    let d_k = params.w_q.cols();
    let layout = AttentionLayout {
        batch: 1,
        q_len: q.rows(),
        k_len: k.rows(),
        heads: 1,
        scale: if scale { 1.0 / (d_k as f64).sqrt() } else { 1.0 },
        masks: Rc::new(mask.cloned().into_iter().collect()),
    };
    let y = g.attention(qp, kp, vp, layout)?;
    Ok(g.value(y).clone())
}

/// Multi-head attention: per-head scaled dot-product outputs concatenated
/// along features and projected by `w_o`.
pub fn multi_head(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    params: &MultiHeadParams,
    mask: Option<&AttentionMask>,
) -> Result<Tensor> {
    check_heads(params, q.cols())?;
    let mut g = Graph::new();
    let w = MhaVars::leaves(&mut g, params)?;
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let y = multi_head_attention(
        &mut g,
        qv,
        kv,
        vv,
        &w,
        params.heads.len(),
        (1, q.rows(), k.rows()),
        Rc::new(mask.cloned().into_iter().collect()),
        true,
    )?;
    Ok(g.value(y).clone())
}

fn check_heads(params: &MultiHeadParams, d: usize) -> Result<()> {
    if params.heads.is_empty() {
        return Err(Error::shape("multi-head attention needs at least one head"));
    }
    for h in &params.heads {
        h.check(d)?;
    }
    let d_v: usize = params.heads.iter().map(|h| h.w_v.cols()).sum();
    let first = &params.heads[0];
    if params
        .heads
        .iter()
        .any(|h| h.w_q.cols() != first.w_q.cols() || h.w_v.cols() != first.w_v.cols())
    {
        return Err(Error::shape("heads have unequal widths"));
    }
    if params.w_o.rows() != d_v {
        return Err(Error::shape(format!(
            "heads concatenate to width {d_v} but w_o is {:?}",
            params.w_o.shape()
        )));
    }
    Ok(())
}

/// Tensor-level co-attention. Returns `(Y_left, Y_right)`; each output has
/// as many rows as its branch's query source.
pub fn coattention(
    x_left: &Tensor,
    x_right: &Tensor,
    alpha: GateRouting,
    beta: GateRouting,
    left_params: &MultiHeadParams,
    right_params: &MultiHeadParams,
    masks: (Option<&AttentionMask>, Option<&AttentionMask>),
) -> Result<(Tensor, Tensor)> {
    if x_left.cols() != x_right.cols() {
        return Err(Error::shape(format!(
            "channel widths differ: {:?} vs {:?}",
            x_left.shape(),
            x_right.shape()
        )));
    }
    check_heads(left_params, x_left.cols())?;
    check_heads(right_params, x_left.cols())?;
    if left_params.heads.len() != right_params.heads.len() {
        return Err(Error::shape("branches have different head counts"));
    }
    let mut g = Graph::new();
    let wl = MhaVars::leaves(&mut g, left_params)?;
    let wr = MhaVars::leaves(&mut g, right_params)?;
    let left = ChannelInput {
        x: g.constant(x_left.clone()),
        len: x_left.rows(),
    };
    let right = ChannelInput {
        x: g.constant(x_right.clone()),
        len: x_right.rows(),
    };
    let masks = CoattentionMasks {
        left: Rc::new(masks.0.cloned().into_iter().collect()),
        right: Rc::new(masks.1.cloned().into_iter().collect()),
    };
    let (yl, yr) = coattention_on_graph(
        &mut g,
        left,
        right,
        1,
        alpha,
        beta,
        &wl,
        &wr,
        left_params.heads.len(),
        &masks,
    )?;
    Ok((g.value(yl).clone(), g.value(yr).clone()))
}
