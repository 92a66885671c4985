//! Eager tape for reverse-mode differentiation.
//!
//! Each method on [`Graph`] evaluates one primitive immediately and records
//! what its backward pass needs. [`Graph::backward`] then walks the tape in
//! reverse, calling the per-operation backward functions from
//! [`crate::tensor`] (and the fused attention kernel below).

use std::collections::HashMap;
use std::rc::Rc;

use crate::attention::AttentionMask;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{self, CrossEntropyCache, LayerNormCache, Tensor, LAYER_NORM_EPS};

/// Score assigned to disallowed attention positions before the softmax.
pub const MASK_SCORE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call. Queries are stacked as
/// `batch * q_len` rows and keys/values as `batch * k_len` rows; heads are
/// contiguous column blocks.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Multiplier applied to the raw scores (`1/sqrt(d_k)` or 1).
    pub scale: f64,
    /// Either empty, one mask per batch item, or a single shared mask.
    pub masks: Rc<Vec<AttentionMask>>,
}

impl AttentionLayout {
    fn mask(&self, b: usize) -> Option<&AttentionMask> {
        match self.masks.len() {
            0 => None,
            1 => Some(&self.masks[0]),
            _ => Some(&self.masks[b]),
        }
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        cache: CrossEntropyCache,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    store: Option<u64>,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter into the graph. Repeated calls return the
    /// same node, so shared weights accumulate a single gradient.
    ///
    /// # Panics
    /// If parameters from two different stores are bound into one graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let uid = *self.store.get_or_insert(store.uid());
        assert_eq!(uid, store.uid(), "graph already holds parameters of another store");
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::gemm(self.value(a), false, self.value(b), true)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::MatMulBt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape(format!(
                "bias {:?} does not match width of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut y = xv.clone();
        for i in 0..y.rows() {
            for (o, b) in y.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(y, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(y, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let y = tensor::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::SoftmaxRows(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (y, cache) = tensor::layer_norm(
            self.value(x),
            self.value(gain),
            self.value(bias),
            LAYER_NORM_EPS,
        )?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        let (y, mask) = tensor::dropout(self.value(x), p, rng, training)?;
        match mask {
            None => Ok(x),
            Some(mask) => {
                let rg = self.rg(x);
                Ok(self.push(y, Op::Dropout { x, mask }, rg))
            }
        }
    }

    /// Row lookup: output row `i` is row `ids[i]` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
            data.extend_from_slice(t.row(id));
        }
        let y = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            y,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = Tensor::concat_cols(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::ConcatCols(a, b), rg))
    }

    /// Fused multi-head scaled dot-product attention over already projected
    /// queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = layout;
        if heads == 0 || qv.cols() % heads != 0 || vv.cols() % heads != 0 {
            return Err(Error::shape(format!(
                "{heads} heads do not divide widths {} / {}",
                qv.cols(),
                vv.cols()
            )));
        }
        if qv.cols() != kv.cols() {
            return Err(Error::shape(format!(
                "query width {} differs from key width {}",
                qv.cols(),
                kv.cols()
            )));
        }
        if qv.rows() != batch * q_len || kv.rows() != batch * k_len || vv.rows() != batch * k_len {
            return Err(Error::shape(format!(
                "attention rows q={} k={} v={} do not match batch {batch} x ({q_len}, {k_len})",
                qv.rows(),
                kv.rows(),
                vv.rows()
            )));
        }
        let n_masks = layout.masks.len();
        if n_masks > 1 && n_masks != batch {
            return Err(Error::shape(format!("{n_masks} masks for batch of {batch}")));
        }
        for m in layout.masks.iter() {
            if m.n_q() != q_len || m.n_k() != k_len {
                return Err(Error::shape(format!(
                    "mask {}x{} for attention {q_len}x{k_len}",
                    m.n_q(),
                    m.n_k()
                )));
            }
        }

        let (dq, dv) = (qv.cols() / heads, vv.cols() / heads);
        let (qc, vc) = (qv.cols(), vv.cols());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; batch * q_len * vc];
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        let mut scores = vec![0.0; k_len];
        for b in 0..batch {
            let mask = layout.mask(b);
            for h in 0..heads {
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * qc + h * dq..][..dq];
                    let mut any = false;
                    for (j, s) in scores.iter_mut().enumerate() {
                        if mask.is_some_and(|m| m.is_disallowed(i, j)) {
                            *s = MASK_SCORE;
                            continue;
                        }
                        any = true;
                        let krow = &kd[(b * k_len + j) * qc + h * dq..][..dq];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                        *s = dot * layout.scale;
                    }
                    if !any {
                        return Err(Error::Mask { row: i });
                    }
                    tensor::softmax_in_place(&mut scores);
                    let p_off = ((b * heads + h) * q_len + i) * k_len;
                    probs[p_off..p_off + k_len].copy_from_slice(&scores);
                    let orow = &mut out[(b * q_len + i) * vc + h * dv..][..dv];
                    for (j, &p) in scores.iter().enumerate() {
                        let vrow = &vd[(b * k_len + j) * vc + h * dv..][..dv];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let y = Tensor::new(vec![batch * q_len, vc], out)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            y,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch][head][q][k]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad_id: usize,
    ) -> Result<Var> {
        let (loss, cache) = tensor::cross_entropy(self.value(logits), targets, smoothing, pad_id)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, cache }, rg))
    }

    /// Scalar `sum(x ⊙ weights)`; a convenient probe objective for
    /// gradient checks of non-scalar outputs.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape(format!(
                "weights {:?} vs input {:?}",
                weights.shape(),
                xv.shape()
            )));
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let send = |v: Var, g: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (da, db) = tensor::matmul_backward(self.value(*a), self.value(*b), &dy)?;
                    send(*a, da, &mut grads)?;
                    send(*b, db, &mut grads)?;
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = dy b, db = dyᵀ a
                    let da = tensor::gemm(&dy, false, self.value(*b), false)?;
                    let db = tensor::gemm(&dy, true, self.value(*a), false)?;
                    send(*a, da, &mut grads)?;
                    send(*b, db, &mut grads)?;
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut grads)?;
                    send(*b, dy, &mut grads)?;
                }
                Op::AddRow(x, bias) => {
                    let mut db = Tensor::zeros(self.value(*bias).shape());
                    for i in 0..dy.rows() {
                        for (o, g) in db.data_mut().iter_mut().zip(dy.row(i)) {
                            *o += g;
                        }
                    }
                    send(*bias, db, &mut grads)?;
                    send(*x, dy, &mut grads)?;
                }
                Op::Scale(x, s) => send(*x, dy.scale(*s), &mut grads)?,
                Op::Relu(x) => send(*x, tensor::relu_backward(self.value(*x), &dy)?, &mut grads)?,
                Op::SoftmaxRows(x) => {
                    send(*x, tensor::softmax_rows_backward(&node.value, &dy)?, &mut grads)?
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let (dx, dg, db) = tensor::layer_norm_backward(cache, self.value(*gain), &dy)?;
                    send(*x, dx, &mut grads)?;
                    send(*gain, dg, &mut grads)?;
                    send(*bias, db, &mut grads)?;
                }
                Op::Dropout { x, mask } => {
                    let mut dx = dy;
                    for (g, m) in dx.data_mut().iter_mut().zip(mask) {
                        *g *= m;
                    }
                    send(*x, dx, &mut grads)?;
                }
                Op::Gather { table, ids } => {
                    let mut dt = Tensor::zeros(self.value(*table).shape());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, g) in dt.row_mut(id).iter_mut().zip(dy.row(i)) {
                            *o += g;
                        }
                    }
                    send(*table, dt, &mut grads)?;
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    send(*a, dy.slice_cols(0, ca), &mut grads)?;
                    send(*b, dy.slice_cols(ca, dy.cols()), &mut grads)?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &dy)?;
                    send(*q, dq, &mut grads)?;
                    send(*k, dk, &mut grads)?;
                    send(*v, dv, &mut grads)?;
                }
                Op::CrossEntropy { logits, cache } => {
                    let g = tensor::cross_entropy_backward(cache, dy.data()[0]);
                    send(*logits, g, &mut grads)?;
                }
                Op::WeightedSum { x, weights } => {
                    send(*x, weights.scale(dy.data()[0]), &mut grads)?;
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        dy: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            batch,
            q_len,
            k_len,
            heads,
            scale,
            ..
        } = *layout;
        let (qc, vc) = (qv.cols(), vv.cols());
        let (dqh, dvh) = (qc / heads, vc / heads);
        let mut dq = Tensor::zeros(qv.shape());
        let mut dk = Tensor::zeros(kv.shape());
        let mut dvt = Tensor::zeros(vv.shape());
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), dy.data());
        let mut dp = vec![0.0; k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let p_off = ((b * heads + h) * q_len + i) * k_len;
                    let p = &probs[p_off..p_off + k_len];
                    let grow = &gd[(b * q_len + i) * vc + h * dvh..][..dvh];
                    for j in 0..k_len {
                        let vrow = &vd[(b * k_len + j) * vc + h * dvh..][..dvh];
                        dp[j] = grow.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        let dvrow = &mut dvt.data_mut()[(b * k_len + j) * vc + h * dvh..][..dvh];
                        for (o, g) in dvrow.iter_mut().zip(grow) {
                            *o += p[j] * g;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, c)| a * c).sum();
                    let qrow = &qd[(b * q_len + i) * qc + h * dqh..][..dqh];
                    for j in 0..k_len {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * k_len + j) * qc + h * dqh..][..dqh];
                        let dqrow = &mut dq.data_mut()[(b * q_len + i) * qc + h * dqh..][..dqh];
                        for (o, x) in dqrow.iter_mut().zip(krow) {
                            *o += ds * x;
                        }
                        let dkrow = &mut dk.data_mut()[(b * k_len + j) * qc + h * dqh..][..dqh];
                        for (o, x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds * x;
                        }
                    }
                }
            }
        }
        Ok((dq, dk, dvt))
    }
}
