//! Parameterized building blocks shared by both architectures.

use std::rc::Rc;

use crate::attention::{multi_head_attention, AttentionMask, MhaVars};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| (2.0 * rng.uniform() - 1.0) * a).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, d_in, d_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
        })
    }

    pub fn vars(&self, g: &mut Graph, store: &ParamStore) -> MhaVars {
        let mut p = |id| g.param(store, id);
        MhaVars {
            w_q: p(self.q.weight),
            w_k: p(self.k.weight),
            w_v: p(self.v.weight),
            w_o: p(self.o.weight),
            b_q: Some(p(self.q.bias)),
            b_k: Some(p(self.k.bias)),
            b_v: Some(p(self.v.bias)),
            b_o: Some(p(self.o.bias)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        q: Var,
        kv: Var,
        heads: usize,
        dims: (usize, usize, usize),
        masks: Rc<Vec<AttentionMask>>,
    ) -> Result<Var> {
        let w = self.vars(g, store);
        multi_head_attention(g, q, kv, kv, &w, heads, dims, masks, true)
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, d_ff, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Post-norm residual wrapper: `norm(x + dropout(sublayer))`.
pub struct Residual<'a> {
    pub store: &'a ParamStore,
    pub dropout_p: f64,
    pub training: bool,
}

impl Residual<'_> {
    pub fn apply(&self, g: &mut Graph, rng: &mut Rng, x: Var, sub: Var, norm: &Norm) -> Result<Var> {
        let sub = g.dropout(sub, self.dropout_p, rng, self.training)?;
        let y = g.add(x, sub)?;
        norm.forward(g, self.store, y)
    }
}
