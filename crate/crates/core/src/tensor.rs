//! Dense row-major tensors and the primitive operations the networks are
//! built from. Every operation here comes as a forward function plus an
//! explicit backward function; [`crate::graph`] only sequences them.

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(vec![n, m], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix; a rank-1 tensor is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = (self.rows(), self.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor {
            shape: vec![m, n],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let (n, c) = (self.rows(), self.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Tensor {
            shape: vec![n, w],
            data,
        }
    }

    /// `[a ‖ b]` along the feature axis.
    pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rows() != b.rows() {
            return Err(Error::shape(format!(
                "concat needs equal rows: {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.rows() * (ca + cb));
        for i in 0..a.rows() {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Ok(Tensor {
            shape: vec![a.rows(), ca + cb],
            data,
        })
    }

    fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn expect_matrix(&self, what: &str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::shape(format!(
                "{what} must be a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// `op(a) · op(b)` where `op` optionally transposes. Backed by a blocked
/// GEMM kernel; [`naive_matmul`] is the reference.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    a.expect_matrix("left operand")?;
    b.expect_matrix("right operand")?;
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac)
    } else {
        (ar, ac, ac, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc)
    } else {
        (br, bc, bc, 1)
    };
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?}{} x {:?}{}",
            a.shape,
            if trans_a { "ᵀ" } else { "" },
            b.shape,
            if trans_b { "ᵀ" } else { "" },
        )));
    }
    let mut out = vec![0.0; m * n];
    // SAFETY: the pointers come from live slices whose lengths match the
    // (rows, cols, strides) passed, and `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

/// Gradients of `Y = A·B`: `dA = dY·Bᵀ`, `dB = Aᵀ·dY`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((gemm(dy, false, b, true)?, gemm(a, true, dy, false)?))
}

/// Triple-loop product, kept as the oracle for [`gemm`].
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_matrix("left operand")?;
    b.expect_matrix("right operand")?;
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    if b.shape[0] != k {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data[i * k + p] * b.data[p * m + j];
            }
            out[i * m + j] = s;
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Given `y = softmax_rows(x)` and `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let mut dx = dy.clone();
    y.expect_same_shape(dy)?;
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = yr[j] * (dyr[j] - dot);
        }
    }
    Ok(dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, d| if v > 0.0 { d } else { 0.0 })
}

/// Normalized activations and per-row inverse standard deviations saved by
/// [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        return Err(Error::param(format!("layer norm eps must be positive, got {eps}")));
    }
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(format!(
            "layer norm width {d} vs gain {:?} / bias {:?}",
            gain.shape, bias.shape
        )));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        let xr = xhat.row_mut(i);
        for (j, v) in xr.iter_mut().enumerate() {
            *v = (row[j] - mean) * r;
        }
        let xr = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = xr[j] * gain.data[j] + bias.data[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    cache.xhat.expect_same_shape(dy)?;
    let d = dy.cols();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(gain.shape());
    let mut dbias = Tensor::zeros(gain.shape());
    let mut dxhat = vec![0.0; d];
    for i in 0..dy.rows() {
        let (xh, dyr) = (cache.xhat.row(i), dy.row(i));
        for j in 0..d {
            dgain.data[j] += dyr[j] * xh[j];
            dbias.data[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let r = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Ok((dx, dgain, dbias))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1-p)`), which is also the backward map.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng, training: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    let mut out = x.clone();
    for (o, m) in out.data.iter_mut().zip(&mask) {
        *o *= m;
    }
    Ok((out, Some(mask)))
}

/// Saved state of [`cross_entropy`]: softmax probabilities and the targets
/// that counted.
#[derive(Debug, Clone)]
pub struct CrossEntropyCache {
    pub probs: Tensor,
    pub targets: Vec<Option<usize>>,
    pub smoothing: f64,
    pub count: usize,
}

/// Label-smoothed negative log-likelihood averaged over non-pad rows. The
/// smoothed target puts `1-ε` on the gold token and spreads `ε` uniformly
/// over all `V` classes.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f64,
    pad_id: usize,
) -> Result<(f64, CrossEntropyCache)> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::shape(format!(
            "{} targets for {n} logit rows",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::param(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let mut probs = logits.clone();
    let mut kept = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut count = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad_id {
            kept.push(None);
            continue;
        }
        if t >= v {
            return Err(Error::Vocab { id: t, vocab: v });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let nll = lse - row[t];
        let mean_nll = lse - row.iter().sum::<f64>() / v as f64;
        total += (1.0 - smoothing) * nll + smoothing * mean_nll;
        for (j, p) in probs.row_mut(i).iter_mut().enumerate() {
            *p = (row[j] - lse).exp();
        }
        kept.push(Some(t));
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((
        total / count as f64,
        CrossEntropyCache {
            probs,
            targets: kept,
            smoothing,
            count,
        },
    ))
}

/// Gradient of the mean loss w.r.t. the logits, scaled by `dloss`.
pub fn cross_entropy_backward(cache: &CrossEntropyCache, dloss: f64) -> Tensor {
    let v = cache.probs.cols();
    let mut g = Tensor::zeros(cache.probs.shape());
    let scale = dloss / cache.count as f64;
    let uniform = cache.smoothing / v as f64;
    for (i, t) in cache.targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let p = cache.probs.row(i);
        for (j, o) in g.row_mut(i).iter_mut().enumerate() {
            let q = uniform + if j == t { 1.0 - cache.smoothing } else { 0.0 };
            *o = scale * (p[j] - q);
        }
    }
    g
}
