//! Crossed co-attention encoder-decoder and the Transformer baseline.
//!
//! Both architectures share one embedding table between encoder inputs,
//! decoder inputs and the output projection, add sinusoidal positions, and
//! use post-norm residual sublayers.
//!
//! THM encoder block, per branch `b` in {left, right}:
//!
//! ```text
//! y_b = coattention(x_left, x_right)_b        (crossed V/K/Q routing)
//! x_b = norm(x_b + y_b);  x_b = norm(x_b + ffn_b(x_b))
//! ```
//!
//! THM decoder block:
//!
//! ```text
//! s   = norm(y + self_attn(y))                (causal)
//! a_b = norm(s + cross_b(q = s, kv = mem_b));  a_b = norm(a_b + ffn_b(a_b))
//! z   = norm(s + fuse([a_left | a_right]))    (2d -> d)
//! out = norm(z + ffn(z))
//! ```

pub mod checkpoint;
pub mod config;
pub mod count;
pub mod layers;

use std::rc::Rc;

pub use checkpoint::Checkpoint;
pub use config::{Arch, ModelConfig};
pub use count::{count_parameters, ParamCount};

use crate::attention::{
    causal_mask, coattention_on_graph, crossed_routing, AttentionMask, Channel, ChannelInput,
    CoattentionMasks, GateRouting,
};
use crate::data::{Batch, IdMatrix, PAD};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use layers::{Ffn, Linear, Mha, Norm, Residual};

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_encoding(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        let row = t.row_mut(pos);
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
        }
    }
    t
}

/// Embedding lookup scaled by `sqrt(d_model)`, optionally plus positions.
pub fn embed_tokens(tokens: &[usize], table: &Tensor, positions: bool, max_len: usize) -> Result<Tensor> {
    if tokens.len() > max_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: max_len,
        });
    }
    let (vocab, d) = (table.rows(), table.cols());
    let scale = (d as f64).sqrt();
    let pe = positions.then(|| sinusoidal_encoding(tokens.len().max(1), d));
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (pos, &t) in tokens.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Vocab { id: t, vocab });
        }
        for (j, &e) in table.row(t).iter().enumerate() {
            data.push(e * scale + pe.as_ref().map_or(0.0, |p| p.get(pos, j)));
        }
    }
    Tensor::new(vec![tokens.len(), d], data)
}

/// Attention sublayer followed by a feed-forward sublayer. Used as an
/// encoder branch, a decoder cross-attention branch, and the baseline's
/// encoder block.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub attn: Mha,
    pub attn_norm: Norm,
    pub ffn: Ffn,
    pub ffn_norm: Norm,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attn: Mha::new(store, &format!("{name}.attn"), cfg.d_model, rng)?,
            attn_norm: Norm::new(store, &format!("{name}.attn_norm"), cfg.d_model)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, rng)?,
            ffn_norm: Norm::new(store, &format!("{name}.ffn_norm"), cfg.d_model)?,
        })
    }

    fn ffn_sublayer(&self, g: &mut Graph, res: &Residual, rng: &mut Rng, x: Var) -> Result<Var> {
        let f = self.ffn.forward(g, res.store, x)?;
        res.apply(g, rng, x, f, &self.ffn_norm)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        res: &Residual,
        rng: &mut Rng,
        q: Var,
        kv: Var,
        heads: usize,
        dims: (usize, usize, usize),
        masks: Rc<Vec<AttentionMask>>,
    ) -> Result<Var> {
        let a = self.attn.forward(g, res.store, q, kv, heads, dims, masks)?;
        let x = res.apply(g, rng, q, a, &self.attn_norm)?;
        self.ffn_sublayer(g, res, rng, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ThmEncoderBlock {
    pub left: Branch,
    pub right: Branch,
}

#[derive(Debug, Clone, Copy)]
pub struct ThmDecoderBlock {
    pub self_attn: Mha,
    pub self_norm: Norm,
    pub left: Branch,
    pub right: Branch,
    pub fuse: Linear,
    pub fuse_norm: Norm,
    pub ffn: Ffn,
    pub ffn_norm: Norm,
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerDecoderBlock {
    pub self_attn: Mha,
    pub self_norm: Norm,
    pub cross: Branch,
}

#[derive(Debug, Clone)]
enum Body {
    Thm {
        encoder: Vec<ThmEncoderBlock>,
        decoder: Vec<ThmDecoderBlock>,
    },
    Transformer {
        encoder: Vec<Branch>,
        decoder: Vec<TransformerDecoderBlock>,
    },
}

/// Encoder output on a tape. `right` is `None` for the baseline.
#[derive(Debug, Clone)]
pub struct EncoderMemory {
    pub left: Var,
    pub right: Option<Var>,
    pub batch: usize,
    pub src_len: usize,
    /// Per batch item, which source positions are padding.
    pub src_pad: Vec<Vec<bool>>,
}

/// Encoder output detached from any tape, for step-wise decoding.
#[derive(Debug, Clone)]
pub struct MemoryTensors {
    pub left: Tensor,
    pub right: Option<Tensor>,
    pub batch: usize,
    pub src_len: usize,
    pub src_pad: Vec<Vec<bool>>,
}

impl MemoryTensors {
    pub fn from_graph(g: &Graph, m: &EncoderMemory) -> Self {
        Self {
            left: g.value(m.left).clone(),
            right: m.right.map(|r| g.value(r).clone()),
            batch: m.batch,
            src_len: m.src_len,
            src_pad: m.src_pad.clone(),
        }
    }

    pub fn on_graph(&self, g: &mut Graph) -> EncoderMemory {
        EncoderMemory {
            left: g.constant(self.left.clone()),
            right: self.right.as_ref().map(|r| g.constant(r.clone())),
            batch: self.batch,
            src_len: self.src_len,
            src_pad: self.src_pad.clone(),
        }
    }

    /// Keeps only the listed batch items.
    pub fn select(&self, items: &[usize]) -> Self {
        let pick = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = items
                .iter()
                .flat_map(|&b| (0..self.src_len).map(move |i| b * self.src_len + i))
                .map(|r| t.row(r).to_vec())
                .collect();
            Tensor::from_rows(&rows).expect("non-empty selection")
        };
        Self {
            left: pick(&self.left),
            right: self.right.as_ref().map(pick),
            batch: items.len(),
            src_len: self.src_len,
            src_pad: items.iter().map(|&b| self.src_pad[b].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: ParamId,
    body: Body,
    routing: (GateRouting, GateRouting),
}

impl Model {
    /// Builds a model with freshly initialized parameters: Xavier-uniform
    /// weights, zero biases, unit norm gains, and `N(0, d^-1/2)` embeddings.
    /// Values are rounded to 32-bit precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let table = Tensor::new(
            vec![config.vocab_size, d],
            (0..config.vocab_size * d).map(|_| rng.normal(0.0, std)).collect(),
        )?;
        let embed = store.add("embed.weight", table)?;
        let cfg = &config;
        let body = match config.arch {
            Arch::Thm => {
                let mut encoder = Vec::new();
                for i in 0..cfg.n_blocks {
                    encoder.push(ThmEncoderBlock {
                        left: Branch::new(&mut store, &format!("encoder.{i}.left"), cfg, &mut rng)?,
                        right: Branch::new(&mut store, &format!("encoder.{i}.right"), cfg, &mut rng)?,
                    });
                }
                let mut decoder = Vec::new();
                for i in 0..cfg.n_blocks {
                    let p = format!("decoder.{i}");
                    decoder.push(ThmDecoderBlock {
                        self_attn: Mha::new(&mut store, &format!("{p}.self_attn"), d, &mut rng)?,
                        self_norm: Norm::new(&mut store, &format!("{p}.self_norm"), d)?,
                        left: Branch::new(&mut store, &format!("{p}.left"), cfg, &mut rng)?,
                        right: Branch::new(&mut store, &format!("{p}.right"), cfg, &mut rng)?,
                        fuse: Linear::new(&mut store, &format!("{p}.fuse"), 2 * d, d, &mut rng)?,
                        fuse_norm: Norm::new(&mut store, &format!("{p}.fuse_norm"), d)?,
                        ffn: Ffn::new(&mut store, &format!("{p}.ffn"), d, cfg.d_ff, &mut rng)?,
                        ffn_norm: Norm::new(&mut store, &format!("{p}.ffn_norm"), d)?,
                    });
                }
                Body::Thm { encoder, decoder }
            }
            Arch::Transformer => {
                let mut encoder = Vec::new();
                for i in 0..cfg.n_blocks {
                    encoder.push(Branch::new(&mut store, &format!("encoder.{i}"), cfg, &mut rng)?);
                }
                let mut decoder = Vec::new();
                for i in 0..cfg.n_blocks {
                    let p = format!("decoder.{i}");
                    decoder.push(TransformerDecoderBlock {
                        self_attn: Mha::new(&mut store, &format!("{p}.self_attn"), d, &mut rng)?,
                        self_norm: Norm::new(&mut store, &format!("{p}.self_norm"), d)?,
                        cross: Branch::new(&mut store, &format!("{p}.cross"), cfg, &mut rng)?,
                    });
                }
                Body::Transformer { encoder, decoder }
            }
        };
        store.round_to_f32();
        Ok(Self {
            config,
            params: store,
            embed,
            body,
            routing: crossed_routing(),
        })
    }

    /// Replaces the encoder co-attention routing (crossed by default).
    pub fn set_routing(&mut self, alpha: GateRouting, beta: GateRouting) {
        self.routing = (alpha, beta);
    }

    pub fn routing(&self) -> (GateRouting, GateRouting) {
        self.routing
    }

    pub fn embedding(&self) -> ParamId {
        self.embed
    }

    pub fn thm_encoder_blocks(&self) -> &[ThmEncoderBlock] {
        match &self.body {
            Body::Thm { encoder, .. } => encoder,
            Body::Transformer { .. } => &[],
        }
    }

    pub fn thm_decoder_blocks(&self) -> &[ThmDecoderBlock] {
        match &self.body {
            Body::Thm { decoder, .. } => decoder,
            Body::Transformer { .. } => &[],
        }
    }

    fn residual(&self, training: bool) -> Residual<'_> {
        Residual {
            store: &self.params,
            dropout_p: self.config.dropout_p,
            training,
        }
    }

    /// Scaled embeddings plus positions, then dropout. Rows are stacked per
    /// batch item.
    pub fn embed(&self, g: &mut Graph, tokens: &IdMatrix, rng: &mut Rng, training: bool) -> Result<Var> {
        if tokens.cols > self.config.max_len {
            return Err(Error::Length {
                len: tokens.cols,
                max: self.config.max_len,
            });
        }
        let table = g.param(&self.params, self.embed);
        let x = g.gather(table, &tokens.ids)?;
        let x = g.scale(x, (self.config.d_model as f64).sqrt());
        let pe = sinusoidal_encoding(tokens.cols, self.config.d_model);
        let mut rows = Vec::with_capacity(tokens.rows * tokens.cols);
        for _ in 0..tokens.rows {
            for p in 0..tokens.cols {
                rows.push(pe.row(p).to_vec());
            }
        }
        let pe = g.constant(Tensor::from_rows(&rows)?);
        let x = g.add(x, pe)?;
        g.dropout(x, self.config.dropout_p, rng, training)
    }

    fn key_padding(tokens: &IdMatrix, n_q: usize) -> Rc<Vec<AttentionMask>> {
        Rc::new(
            (0..tokens.rows)
                .map(|b| AttentionMask::key_padding(n_q, &tokens.pad_flags(b)))
                .collect(),
        )
    }

    /// Runs the encoder. THM feeds `src_left` and `src_right` to the two
    /// branches; the baseline reads `src_left` only.
    pub fn encode(
        &self,
        g: &mut Graph,
        src_left: &IdMatrix,
        src_right: &IdMatrix,
        rng: &mut Rng,
        training: bool,
    ) -> Result<EncoderMemory> {
        let res = self.residual(training);
        let heads = self.config.n_heads;
        let (batch, n) = (src_left.rows, src_left.cols);
        let src_pad: Vec<Vec<bool>> = (0..batch).map(|b| src_left.pad_flags(b)).collect();
        match &self.body {
            Body::Thm { encoder, .. } => {
                if (src_right.rows, src_right.cols) != (batch, n) {
                    return Err(Error::shape(format!(
                        "encoder inputs differ in shape: {batch}x{n} vs {}x{}",
                        src_right.rows, src_right.cols
                    )));
                }
                let mut xl = self.embed(g, src_left, rng, training)?;
                let mut xr = self.embed(g, src_right, rng, training)?;
                let (alpha, beta) = self.routing;
                let pads = |c: Channel| match c {
                    Channel::Left => Self::key_padding(src_left, n),
                    Channel::Right => Self::key_padding(src_right, n),
                };
                let masks = CoattentionMasks {
                    left: pads(alpha.k_source),
                    right: pads(beta.k_source),
                };
                for block in encoder {
                    let wl = block.left.attn.vars(g, &self.params);
                    let wr = block.right.attn.vars(g, &self.params);
                    let (yl, yr) = coattention_on_graph(
                        g,
                        ChannelInput { x: xl, len: n },
                        ChannelInput { x: xr, len: n },
                        batch,
                        alpha,
                        beta,
                        &wl,
                        &wr,
                        heads,
                        &masks,
                    )?;
                    let hl = res.apply(g, rng, xl, yl, &block.left.attn_norm)?;
                    let hr = res.apply(g, rng, xr, yr, &block.right.attn_norm)?;
                    xl = block.left.ffn_sublayer(g, &res, rng, hl)?;
                    xr = block.right.ffn_sublayer(g, &res, rng, hr)?;
                }
                Ok(EncoderMemory {
                    left: xl,
                    right: Some(xr),
                    batch,
                    src_len: n,
                    src_pad,
                })
            }
            Body::Transformer { encoder, .. } => {
                let mut x = self.embed(g, src_left, rng, training)?;
                let masks = Self::key_padding(src_left, n);
                for block in encoder {
                    x = block.forward(g, &res, rng, x, x, heads, (batch, n, n), masks.clone())?;
                }
                Ok(EncoderMemory {
                    left: x,
                    right: None,
                    batch,
                    src_len: n,
                    src_pad,
                })
            }
        }
    }

    /// Decoder over teacher-forced inputs `tgt_in` (BOS-prefixed). Returns
    /// logits with one row per (batch item, position).
    pub fn decode(
        &self,
        g: &mut Graph,
        mem: &EncoderMemory,
        tgt_in: &IdMatrix,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var> {
        let res = self.residual(training);
        let heads = self.config.n_heads;
        let (batch, m, n) = (tgt_in.rows, tgt_in.cols, mem.src_len);
        if batch != mem.batch {
            return Err(Error::shape(format!(
                "decoder batch {batch} vs encoder batch {}",
                mem.batch
            )));
        }
        let causal = causal_mask(m);
        let self_masks = Rc::new(
            (0..batch)
                .map(|b| causal.union(&AttentionMask::key_padding(m, &tgt_in.pad_flags(b))))
                .collect::<Result<Vec<_>>>()?,
        );
        let cross_masks = Rc::new(
            mem.src_pad
                .iter()
                .map(|p| AttentionMask::key_padding(m, p))
                .collect::<Vec<_>>(),
        );
        let mut y = self.embed(g, tgt_in, rng, training)?;
        match &self.body {
            Body::Thm { decoder, .. } => {
                let right = mem
                    .right
                    .ok_or_else(|| Error::shape("THM decoder needs two encoder memories"))?;
                for block in decoder {
                    let a = block.self_attn.forward(g, &self.params, y, y, heads, (batch, m, m), self_masks.clone())?;
                    let s = res.apply(g, rng, y, a, &block.self_norm)?;
                    let bl = block.left.forward(g, &res, rng, s, mem.left, heads, (batch, m, n), cross_masks.clone())?;
                    let br = block.right.forward(g, &res, rng, s, right, heads, (batch, m, n), cross_masks.clone())?;
                    let cat = g.concat_cols(bl, br)?;
                    let f = block.fuse.forward(g, &self.params, cat)?;
                    let z = res.apply(g, rng, s, f, &block.fuse_norm)?;
                    let h = block.ffn.forward(g, &self.params, z)?;
                    y = res.apply(g, rng, z, h, &block.ffn_norm)?;
                }
            }
            Body::Transformer { decoder, .. } => {
                for block in decoder {
                    let a = block.self_attn.forward(g, &self.params, y, y, heads, (batch, m, m), self_masks.clone())?;
                    let s = res.apply(g, rng, y, a, &block.self_norm)?;
                    y = block.cross.forward(g, &res, rng, s, mem.left, heads, (batch, m, n), cross_masks.clone())?;
                }
            }
        }
        let table = g.param(&self.params, self.embed);
        g.matmul_bt(y, table)
    }

    /// Encodes a batch the way training or evaluation sees it: THM training
    /// uses the two corrupted copies, everything else the clean source.
    pub fn encode_batch(&self, g: &mut Graph, batch: &Batch, rng: &mut Rng, training: bool) -> Result<EncoderMemory> {
        match (self.config.arch, training) {
            (Arch::Thm, true) => self.encode(g, &batch.src_corrupt_left, &batch.src_corrupt_right, rng, true),
            _ => self.encode(g, &batch.src, &batch.src, rng, training),
        }
    }

    /// Logits for a batch, `(batch * tgt_len) x vocab`.
    pub fn batch_logits(&self, g: &mut Graph, batch: &Batch, rng: &mut Rng, training: bool) -> Result<Var> {
        let mem = self.encode_batch(g, batch, rng, training)?;
        self.decode(g, &mem, &batch.tgt_in, rng, training)
    }

    /// Label-smoothed cross-entropy over the batch's non-pad targets.
    pub fn batch_loss(&self, g: &mut Graph, batch: &Batch, rng: &mut Rng, training: bool) -> Result<Var> {
        let logits = self.batch_logits(g, batch, rng, training)?;
        g.cross_entropy(logits, &batch.tgt_out.ids, self.config.label_smoothing, PAD)
    }

    /// Tensor-level convenience: logits for explicit encoder inputs and a
    /// shifted target.
    pub fn logits(
        &self,
        src_left: &IdMatrix,
        src_right: &IdMatrix,
        tgt_in: &IdMatrix,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let mem = self.encode(&mut g, src_left, src_right, rng, training)?;
        let y = self.decode(&mut g, &mem, tgt_in, rng, training)?;
        Ok(g.value(y).clone())
    }

    /// Clean-source encoder output for inference.
    pub fn memory(&self, src: &IdMatrix) -> Result<MemoryTensors> {
        let mut g = Graph::new();
        let mut rng = Rng::new(0);
        let mem = self.encode(&mut g, src, src, &mut rng, false)?;
        Ok(MemoryTensors::from_graph(&g, &mem))
    }

    /// Log-probabilities of the next token after each prefix in `prefixes`
    /// (all of equal length, BOS-initial), one row per prefix.
    pub fn next_token_log_probs(&self, mem: &MemoryTensors, prefixes: &IdMatrix) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = mem.on_graph(&mut g);
        let mut rng = Rng::new(0);
        let logits = self.decode(&mut g, &m, prefixes, &mut rng, false)?;
        let lv = g.value(logits);
        let t = prefixes.cols;
        let rows: Vec<Vec<f64>> = (0..prefixes.rows)
            .map(|b| {
                let row = lv.row(b * t + t - 1);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Overwrites parameter values by name; every model parameter must be
    /// present with a matching shape.
    pub fn load_values<'a>(&mut self, values: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        let mut filled = vec![false; self.params.len()];
        for (name, t) in values {
            let Some(id) = self.params.id(name) else { continue };
            let p = self.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: stored {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            filled[id.index()] = true;
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            let name = &self.params.iter().nth(i).expect("index in range").name;
            return Err(Error::format(format!("missing parameter {name}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positional_encoding_values() {
        let pe = sinusoidal_encoding(3, 4);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(1, 0) - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn embed_without_positions_is_scaled_row() {
        let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let e = embed_tokens(&[2], &table, false, 8).unwrap();
        let s = 2f64.sqrt();
        assert_eq!(e.data(), &[5.0 * s, 6.0 * s]);
        assert!(matches!(embed_tokens(&[3], &table, false, 8), Err(Error::Vocab { id: 3, .. })));
        assert!(matches!(embed_tokens(&[0; 9], &table, true, 8), Err(Error::Length { len: 9, max: 8 })));
    }

    #[test]
    fn graph_embedding_matches_tensor_embedding() {
        let mut cfg = ModelConfig::tiny(Arch::Transformer);
        cfg.vocab_size = 12;
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.d_ff = 16;
        let model = Model::new(cfg, 1).unwrap();
        let toks = IdMatrix::from_rows(&[vec![4, 5, 6]]).unwrap();
        let mut g = Graph::new();
        let x = model.embed(&mut g, &toks, &mut Rng::new(0), false).unwrap();
        let table = &model.params.get(model.embedding()).value;
        let want = embed_tokens(&[4, 5, 6], table, true, 100).unwrap();
        assert!(g.value(x).max_abs_diff(&want).unwrap() < 1e-12);
    }
}
